use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::data::Dataset;
use super::trainer::Trainer;
use crate::error::{FrnError, Result};
use crate::metrics::MetricReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Alpha,
    Levels,
    Refs,
}

impl FromStr for AblationAxis {
    type Err = FrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationAxis::Alpha),
            "levels" => Ok(AblationAxis::Levels),
            "refs" => Ok(AblationAxis::Refs),
            other => Err(FrnError::Contract(format!(
                "unknown ablation axis {other:?}; expected alpha, levels or refs"
            ))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::Alpha => "alpha",
            AblationAxis::Levels => "levels",
            AblationAxis::Refs => "refs",
        })
    }
}

impl AblationAxis {
    pub fn title(self) -> &'static str {
        match self {
            AblationAxis::Alpha => "suppression threshold α",
            AblationAxis::Levels => "number of recursive levels M",
            AblationAxis::Refs => "number of reference spectral channels S",
        }
    }
}

/// Labelled configurations for one sweep. The first row is always the
/// baseline variant: no mask, a single level, or no RGB conditioning.
pub fn ablation_rows(axis: AblationAxis, values: &[f64], base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let int = |v: f64, what: &str| {
        if v >= 1.0 && v.fract() == 0.0 && v <= 64.0 {
            Ok(v as usize)
        } else {
            Err(FrnError::Contract(format!("{what} must be a positive integer, got {v}")))
        }
    };
    let mut rows = Vec::with_capacity(values.len() + 1);
    match axis {
        AblationAxis::Alpha => {
            rows.push(("w/o".to_string(), TrainConfig { alpha: 0.0, ..base.clone() }));
            for &v in values {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(FrnError::Contract(format!("alpha must lie in (0, 1], got {v}")));
                }
                rows.push((format!("α={v}"), TrainConfig { alpha: v, ..base.clone() }));
            }
        }
        AblationAxis::Levels => {
            rows.push((
                "w/o".to_string(),
                TrainConfig {
                    levels: 1,
                    branch: None,
                    ..base.clone()
                },
            ));
            for &v in values {
                let m = int(v, "levels")?;
                rows.push((
                    format!("M={m}"),
                    TrainConfig {
                        levels: m,
                        branch: None,
                        ..base.clone()
                    },
                ));
            }
        }
        AblationAxis::Refs => {
            rows.push((
                "w/o RGB".to_string(),
                TrainConfig {
                    use_rgb: false,
                    ..base.clone()
                },
            ));
            for &v in values {
                let s = int(v, "refs")?;
                rows.push((
                    format!("S={s}"),
                    TrainConfig {
                        refs: s,
                        use_rgb: true,
                        ..base.clone()
                    },
                ));
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub train: TrainConfig,
    pub metrics: MetricReport,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

pub const TABLE_COLUMNS: [&str; 5] = ["Config", "PSNR", "RMSE", "UIQI", "SSIM"];

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("Ablation: {}\n\n| {} |\n|", self.axis.title(), TABLE_COLUMNS.join(" | "));
        out.push_str(&"---|".repeat(TABLE_COLUMNS.len()));
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:.4} | {:.4} |",
                r.label, m.psnr_db, m.rmse_255, m.uiqi, m.ssim
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = TABLE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(out, "{},{},{},{},{}", r.label, m.psnr_db, m.rmse_255, m.uiqi, m.ssim);
        }
        out
    }

    /// PSNR gain of the named row over the first (baseline) row.
    pub fn gain_over_baseline(&self, label: &str) -> Option<f64> {
        let base = self.rows.first()?;
        let row = self.rows.iter().find(|r| r.label == label)?;
        Some(row.metrics.psnr_db - base.metrics.psnr_db)
    }

    /// For the levels axis: whether the deepest recursion scores at least as
    /// well as the one-shot row.
    pub fn trend(&self) -> Option<String> {
        if self.axis != AblationAxis::Levels {
            return None;
        }
        let deepest = self.rows.iter().skip(1).max_by_key(|r| r.train.levels)?;
        let gain = self.gain_over_baseline(&deepest.label)?;
        Some(format!(
            "{} vs one-shot: {gain:+.2} dB ({})",
            deepest.label,
            if gain >= 0.0 { "recursion ahead" } else { "one-shot ahead" }
        ))
    }
}

/// Trains one run per row with a shared seed and step budget, scoring each
/// on `eval` (or on the training scenes when `eval` is `None`).
pub fn run_ablation(
    axis: AblationAxis,
    values: &[f64],
    base: &TrainConfig,
    model: &ModelConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let eval = eval.unwrap_or(train);
    let mut rows = Vec::new();
    for (label, cfg) in ablation_rows(axis, values, base)? {
        let start = Instant::now();
        let mut t = Trainer::new(cfg.clone(), model.clone(), train)?;
        let mut last = f64::NAN;
        t.run(|_, rec| {
            last = rec.loss;
            Ok(())
        })?;
        let metrics = t.evaluate(&eval.scenes)?.mean;
        let row = AblationRow {
            label,
            train: cfg,
            metrics,
            final_loss: last,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { axis, rows })
}
