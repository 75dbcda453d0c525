use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    read_checkpoint, read_meta, write_checkpoint, Checkpoint, CheckpointMeta, ADAM_M_PREFIX, ADAM_V_PREFIX,
};
use super::config::{ModelConfig, TrainConfig};
use super::data::{Dataset, Scene};
use super::eval::{evaluate_scenes, predict_tiled, EvalReport};
use super::optim::{cosine_lr, l1_loss, Adam};
use crate::error::{FrnError, Result};
use crate::fractal::{band_average, Frn};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::simdata::{resample_bands, sample_patch, SpectralCube};
use crate::ssm::{EpsilonPolicy, ScanContext};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean threshold drawn during the step.
    pub epsilon: f64,
    pub wall_ms: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random stream for sample `i` of `step`.
pub fn sample_seed(seed: u64, step: u64, i: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ i)
}

/// Resamples `[L, H, W]` to `bands` along the channel axis.
pub(crate) fn resample_tensor(t: &Tensor<f32>, bands: usize) -> Result<Tensor<f32>> {
    if t.dim(0) == bands {
        return Ok(t.clone());
    }
    Ok(resample_bands(&SpectralCube::new(t.clone(), None)?, bands)?.data)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub frn: Frn,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Updates applied so far.
    pub step: u64,
    data_bands: usize,
    /// Training scenes with targets at the network's band count.
    targets: Vec<Scene>,
}

struct SampleResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
    draws: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: ModelConfig, data: &Dataset) -> Result<Self> {
        let data_bands = data.bands()?;
        let frn_cfg = config.frn_config(&model, data_bands)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x1417));
        let mut store = ParamStore::new();
        let frn = Frn::new(&mut store, frn_cfg, &mut rng)?;
        let adam = Adam::new(&store, config.beta1, config.beta2, config.adam_eps);
        let k = frn.config.k_bands;
        let targets = data
            .scenes
            .iter()
            .map(|s| {
                if s.cube.dim(1) < config.patch || s.cube.dim(2) < config.patch {
                    return Err(FrnError::Contract(format!(
                        "scene {} ({}x{}) is smaller than the {} patch",
                        s.name,
                        s.cube.dim(1),
                        s.cube.dim(2),
                        config.patch
                    )));
                }
                Ok(Scene {
                    name: s.name.clone(),
                    cube: resample_tensor(&s.cube, k)?,
                    rgb: s.rgb.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Trainer {
            config,
            model,
            frn,
            store,
            adam,
            step: 0,
            data_bands,
            targets,
        })
    }

    pub fn data_bands(&self) -> usize {
        self.data_bands
    }

    pub fn training_policy(&self) -> EpsilonPolicy {
        if self.config.alpha > 0.0 {
            EpsilonPolicy::Uniform {
                alpha: self.config.alpha,
            }
        } else {
            EpsilonPolicy::Off
        }
    }

    fn sample(&self, step: u64, i: u64) -> Result<SampleResult> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, step, i));
        let scene = &self.targets[rng.gen_range(0..self.targets.len())];
        let patch = sample_patch(&scene.cube, &scene.rgb, cfg.patch, cfg.flips, &mut rng)?;
        let mut ctx = ScanContext::new(self.training_policy(), rng.gen())?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let rgb = g.input(patch.rgb);
        let rec = self.frn.forward(&mut g, &p, rgb, &mut ctx)?;
        let target = g.input(patch.cube.clone());
        let mut loss = l1_loss(&mut g, rec.cube, target)?;
        let coarse = rec.levels.len() - 1;
        if cfg.deep_supervision && coarse > 0 {
            let mut total = None;
            for (spec, &out) in self.frn.plan.level_specs.iter().zip(&rec.levels).take(coarse) {
                let avg = g.input(band_average(&patch.cube, &spec.intervals)?);
                let l = l1_loss(&mut g, out, avg)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let total = total.expect("at least one coarse level");
            let weighted = g.scale(total, (cfg.deep_weight / coarse as f64) as f32)?;
            loss = g.add(loss, weighted)?;
        }
        let value = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let grads = p
            .vars()
            .iter()
            .zip(self.store.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok(SampleResult {
            loss: value,
            grads,
            draws: ctx.draws().to_vec(),
        })
    }

    /// Loss and summed gradient of the batch for `step`, without updating.
    fn batch(&self, step: u64) -> Result<(f64, Vec<Vec<f32>>, f64)> {
        let results: Vec<SampleResult> = (0..self.config.batch as u64)
            .into_par_iter()
            .map(|i| self.sample(step, i))
            .collect::<Result<_>>()?;
        let inv = 1.0 / results.len() as f32;
        let mut grads: Vec<Vec<f32>> = self.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let (mut loss, mut eps_sum, mut eps_n) = (0.0, 0.0, 0usize);
        for r in &results {
            loss += r.loss;
            eps_sum += r.draws.iter().sum::<f64>();
            eps_n += r.draws.len();
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
        }
        grads.iter_mut().flatten().for_each(|v| *v *= inv);
        let eps = if eps_n == 0 { 0.0 } else { eps_sum / eps_n as f64 };
        Ok((loss / results.len() as f64, grads, eps))
    }

    /// Mean training loss of the batch the next step would use.
    pub fn peek_loss(&self) -> Result<f64> {
        Ok(self.batch(self.step)?.0)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let start = Instant::now();
        let cfg = &self.config;
        let lr = cosine_lr(self.step, cfg.total_steps, cfg.lr0, cfg.lr_min);
        let (loss, grads, epsilon) = self.batch(self.step)?;
        let grad_norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(FrnError::NonFiniteLoss {
                step: self.step,
                lr,
                grad_norm,
            });
        }
        self.adam.step(self.store.tensors_mut(), &grads, lr)?;
        let rec = LogRecord {
            step: self.step,
            lr,
            loss,
            epsilon,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Steps until `total_steps`, reporting each record.
    pub fn run(&mut self, mut on_log: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.total_steps {
            let rec = self.step()?;
            on_log(self, &rec)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, scenes: &[Scene]) -> Result<EvalReport> {
        evaluate_scenes(
            &self.frn,
            &self.store,
            scenes,
            self.config.eval_tile,
            self.config.eval_overlap,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for (prefix, moments) in [(ADAM_M_PREFIX, &self.adam.m), (ADAM_V_PREFIX, &self.adam.v)] {
            for (n, t) in names.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        Checkpoint {
            step: self.step,
            tensors,
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            train: self.config.clone(),
            model: self.model.clone(),
            data_bands: self.data_bands,
            step: self.step,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.checkpoint(), Some(&self.meta()))
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let fetch = |key: &str| {
                ck.get(key)
                    .cloned()
                    .ok_or_else(|| FrnError::Contract(format!("checkpoint lacks tensor {key}")))
            };
            self.store.set(name, fetch(name)?)?;
            for (prefix, slot) in [(ADAM_M_PREFIX, &mut self.adam.m[i]), (ADAM_V_PREFIX, &mut self.adam.v[i])] {
                let t = fetch(&format!("{prefix}{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(FrnError::Shape {
                        op: "restore",
                        lhs: slot.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                *slot = t;
            }
        }
        self.step = ck.step;
        self.adam.t = ck.step;
        Ok(())
    }

    /// Rebuilds a trainer from a checkpoint and its metadata sidecar.
    pub fn load(path: impl AsRef<Path>, data: &Dataset) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_meta(path)?;
        if data.bands()? != meta.data_bands {
            return Err(FrnError::Contract(format!(
                "checkpoint was trained on {} bands, data has {}",
                meta.data_bands,
                data.bands()?
            )));
        }
        let mut t = Trainer::new(meta.train, meta.model, data)?;
        t.restore(&read_checkpoint(path)?)?;
        Ok(t)
    }
}

/// A trained network ready for inference, without optimizer state.
pub struct Model {
    pub frn: Frn,
    pub store: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

impl Model {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_meta(path)?;
        let cfg = meta.train.frn_config(&meta.model, meta.data_bands)?;
        let mut store = ParamStore::new();
        let frn = Frn::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let ck = read_checkpoint(path)?;
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = ck
                .get(&name)
                .cloned()
                .ok_or_else(|| FrnError::Contract(format!("checkpoint lacks tensor {name}")))?;
            store.set(&name, t)?;
        }
        Ok(Model { frn, store, meta })
    }

    /// `[3, H, W]` RGB to a cube with the training data's band count.
    pub fn predict(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let t = &self.meta.train;
        let pred = predict_tiled(&self.frn, &self.store, rgb, t.eval_tile, t.eval_overlap)?;
        resample_tensor(&pred, self.meta.data_bands)
    }

    pub fn evaluate(&self, scenes: &[Scene]) -> Result<EvalReport> {
        if let Some(s) = scenes.iter().find(|s| s.cube.dim(0) != self.meta.data_bands) {
            return Err(FrnError::Contract(format!(
                "model predicts {} bands but scene {} has {}",
                self.meta.data_bands,
                s.name,
                s.cube.dim(0)
            )));
        }
        evaluate_scenes(
            &self.frn,
            &self.store,
            scenes,
            self.meta.train.eval_tile,
            self.meta.train.eval_overlap,
        )
    }
}
