use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{psnr, rmse, ssim_per_band, uiqi_per_band};
use crate::error::Result;
use crate::numerics::Tensor;

/// PSNR values are written as numbers, or the string `"inf"` when infinite.
mod db {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn to_repr(v: f64) -> serde_json::Value {
        if v.is_finite() {
            serde_json::json!(v)
        } else if v > 0.0 {
            "inf".into()
        } else if v < 0.0 {
            "-inf".into()
        } else {
            "nan".into()
        }
    }

    fn from_text(s: &str) -> Option<f64> {
        match s {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => from_text(&t).ok_or_else(|| serde::de::Error::custom(format!("bad number {t:?}"))),
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(|r| match r {
                    Repr::Num(v) => Ok(v),
                    Repr::Text(t) => from_text(&t).ok_or_else(|| serde::de::Error::custom(format!("bad number {t:?}"))),
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerBand {
    #[serde(with = "db::vec")]
    pub psnr_db: Vec<f64>,
    pub rmse_255: Vec<f64>,
    pub ssim: Vec<f64>,
    /// `nan` for bands without a valid window.
    #[serde(with = "db::vec")]
    pub uiqi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub rmse_255: f64,
    pub ssim: f64,
    pub uiqi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_band: Option<PerBand>,
}

/// All four metrics, optionally with a per-band breakdown.
pub fn evaluate(pred: &Tensor<f32>, gt: &Tensor<f32>, with_bands: bool) -> Result<MetricReport> {
    let ssim_b = ssim_per_band(pred, gt)?;
    let uiqi_b = uiqi_per_band(pred, gt)?;
    let valid: Vec<f64> = uiqi_b.iter().copied().filter(|q| !q.is_nan()).collect();
    let per_band = if with_bands {
        let p = gt.dim(1) * gt.dim(2);
        let band = |b: usize| {
            let shape = [1, gt.dim(1), gt.dim(2)];
            let x = Tensor::new(shape, pred.data()[b * p..(b + 1) * p].to_vec()).expect("band slice");
            let y = Tensor::new(shape, gt.data()[b * p..(b + 1) * p].to_vec()).expect("band slice");
            (x, y)
        };
        let mut out = PerBand {
            psnr_db: Vec::new(),
            rmse_255: Vec::new(),
            ssim: ssim_b.clone(),
            uiqi: uiqi_b.clone(),
        };
        for b in 0..gt.dim(0) {
            let (x, y) = band(b);
            out.psnr_db.push(psnr(&x, &y)?);
            out.rmse_255.push(rmse(&x, &y)?);
        }
        Some(out)
    } else {
        None
    };
    Ok(MetricReport {
        psnr_db: psnr(pred, gt)?,
        rmse_255: rmse(pred, gt)?,
        ssim: ssim_b.iter().sum::<f64>() / ssim_b.len() as f64,
        uiqi: if valid.is_empty() { 1.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 },
        per_band,
    })
}
