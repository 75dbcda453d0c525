use rand::Rng;
use serde::{Deserialize, Serialize};

use super::plan::{build_plan, nearest_intervals, Interval, RecursionPlan};
use crate::error::{FrnError, Result};
use crate::net::{AtomicGenerator, GeneratorConfig};
use crate::numerics::{BoundParams, Graph, ParamStore, Real, Tensor, Var};
use crate::ssm::ScanContext;

/// Anything that maps a conditioning stack `[S + 3, H, W]` to `n` planes.
/// `slot` is the index of the invocation within its level.
pub trait AtomicModel<T: Real> {
    fn out_channels(&self) -> usize;
    fn invoke(&self, g: &mut Graph<T>, cond: Var, slot: usize, ctx: &mut ScanContext) -> Result<Var>;
}

/// A generator bound to its parameters inside one graph.
pub struct BoundGenerator<'a> {
    pub generator: &'a AtomicGenerator,
    pub params: &'a BoundParams,
}

impl<T: Real> AtomicModel<T> for BoundGenerator<'_> {
    fn out_channels(&self) -> usize {
        self.generator.config.out_channels
    }

    fn invoke(&self, g: &mut Graph<T>, cond: Var, slot: usize, ctx: &mut ScanContext) -> Result<Var> {
        let heads = self.generator.config.heads;
        self.generator.forward_slot(g, self.params, cond, if heads == 1 { 0 } else { slot }, ctx)
    }
}

/// How an invocation is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    /// Number of reference planes `S`.
    pub references: usize,
    /// When false, the RGB slots carry zeros from level 2 on. Level 1 has
    /// nothing else to condition on and always sees RGB.
    pub use_rgb: bool,
}

impl Default for Conditioning {
    fn default() -> Self {
        Conditioning {
            references: 4,
            use_rgb: true,
        }
    }
}

/// Estimates available to the next level, one plane per interval.
#[derive(Clone, Debug)]
pub struct LevelState<T: Real> {
    /// Disjoint intervals with their `[1, H, W]` estimates, in channel order.
    pub generated: Vec<(Interval, Tensor<T>)>,
    /// `[3, H, W]`
    pub rgb: Tensor<T>,
}

impl<T: Real> LevelState<T> {
    pub fn new(rgb: Tensor<T>) -> Self {
        LevelState {
            generated: Vec::new(),
            rgb,
        }
    }
}

/// Per-pixel mean of the RGB planes, `[1, H, W]`.
pub fn rgb_mean_plane<T: Real>(rgb: &Tensor<T>) -> Tensor<T> {
    let p = rgb.numel() / 3;
    let d = rgb.data();
    let third = T::of(1.0 / 3.0);
    Tensor::from_fn([1, rgb.dim(1), rgb.dim(2)], |i| (d[i] + d[p + i] + d[2 * p + i]) * third)
}

/// Conditioning stack for refining `target`: the `S` nearest estimates in
/// center order, RGB-mean planes for any missing slots, then RGB.
pub fn select_references<T: Real>(state: &LevelState<T>, target: Interval, references: usize) -> Tensor<T> {
    let intervals: Vec<Interval> = state.generated.iter().map(|(iv, _)| *iv).collect();
    let picked = nearest_intervals(&intervals, target, references);
    let mean = rgb_mean_plane(&state.rgb);
    let mut data: Vec<T> = Vec::with_capacity((references + 3) * mean.numel());
    for &i in &picked {
        data.extend_from_slice(state.generated[i].1.data());
    }
    for _ in picked.len()..references {
        data.extend_from_slice(mean.data());
    }
    data.extend_from_slice(state.rgb.data());
    Tensor::new([references + 3, state.rgb.dim(1), state.rgb.dim(2)], data)
        .expect("reference stack size is fixed by construction")
}

/// Output of a recursive reconstruction inside a graph.
pub struct Reconstruction {
    /// `[K, H, W]`
    pub cube: Var,
    /// Level-ℓ estimates `[n^ℓ, H, W]`, ℓ = 1..m.
    pub levels: Vec<Var>,
}

/// Runs the plan level by level. `models[ℓ−1]` serves every invocation of
/// level ℓ; `rgb` is `[3, H, W]`.
pub fn reconstruct<T: Real, M: AtomicModel<T>>(
    g: &mut Graph<T>,
    rgb: Var,
    plan: &RecursionPlan,
    models: &[M],
    cond: Conditioning,
    ctx: &mut ScanContext,
) -> Result<Reconstruction> {
    if models.len() != plan.levels {
        return Err(FrnError::Contract(format!(
            "plan has {} levels but {} generators were given",
            plan.levels,
            models.len()
        )));
    }
    let rs = g.shape(rgb).to_vec();
    if rs.len() != 3 || rs[0] != 3 {
        return Err(FrnError::Contract(format!("rgb must be [3, H, W], got {rs:?}")));
    }
    let mean = g.channel_mean(rgb)?;
    let zeros = g.input(Tensor::zeros(rs.clone()));
    let mut prev: Vec<Var> = Vec::new();
    let mut levels = Vec::with_capacity(plan.levels);
    for (spec, model) in plan.level_specs.iter().zip(models) {
        if model.out_channels() != plan.branch {
            return Err(FrnError::Contract(format!(
                "level {} generator emits {} channels, plan needs {}",
                spec.level,
                model.out_channels(),
                plan.branch
            )));
        }
        let prev_intervals = if spec.level > 1 {
            &plan.level_specs[spec.level - 2].intervals[..]
        } else {
            &[][..]
        };
        let colour = if cond.use_rgb || spec.level == 1 { rgb } else { zeros };
        let mut planes = vec![None; spec.intervals.len()];
        for (slot, inv) in spec.invocations.iter().enumerate() {
            let picked = nearest_intervals(prev_intervals, inv.parent, cond.references);
            let mut parts: Vec<Var> = picked.iter().map(|&i| prev[i]).collect();
            parts.resize(cond.references, mean);
            parts.push(colour);
            let stack = g.concat(&parts)?;
            let out = model.invoke(g, stack, slot, ctx)?;
            for (k, &slot) in inv.output_slots.iter().enumerate() {
                planes[slot] = Some(g.slice(out, k, 1)?);
            }
        }
        prev = planes
            .into_iter()
            .map(|p| p.expect("every slot of a level is produced by one invocation"))
            .collect();
        levels.push(g.concat(&prev)?);
    }
    let cube = *levels.last().expect("plans have at least one level");
    Ok(Reconstruction { cube, levels })
}

/// Single atomic call emitting all `K` bands, conditioned like level 1.
pub fn one_shot_baseline<T: Real, M: AtomicModel<T>>(
    g: &mut Graph<T>,
    rgb: Var,
    model: &M,
    references: usize,
    ctx: &mut ScanContext,
) -> Result<Var> {
    let k = model.out_channels();
    let plan = build_plan(k, k)?;
    let cond = Conditioning {
        references,
        use_rgb: true,
    };
    Ok(reconstruct(g, rgb, &plan, std::slice::from_ref(model), cond, ctx)?.cube)
}

/// Averages of `cube: [K, H, W]` over each interval, `[len, H, W]`.
pub fn band_average<T: Real>(cube: &Tensor<T>, intervals: &[Interval]) -> Result<Tensor<T>> {
    let s = cube.shape();
    if s.len() != 3 {
        return Err(FrnError::Contract(format!("cube must be [K, H, W], got {s:?}")));
    }
    let p = s[1] * s[2];
    let mut out = Vec::with_capacity(intervals.len() * p);
    for iv in intervals {
        if iv.hi > s[0] {
            return Err(FrnError::Contract(format!("interval {iv:?} exceeds {} bands", s[0])));
        }
        let inv = T::of(1.0 / iv.width() as f64);
        let mut acc = vec![T::zero(); p];
        for band in iv.lo..iv.hi {
            acc.iter_mut()
                .zip(&cube.data()[band * p..(band + 1) * p])
                .for_each(|(a, &v)| *a += v);
        }
        out.extend(acc.into_iter().map(|v| v * inv));
    }
    Tensor::new([intervals.len(), s[1], s[2]], out)
}

/// Model hyperparameters of a full network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrnConfig {
    pub k_bands: usize,
    pub branch: usize,
    pub references: usize,
    pub use_rgb: bool,
    pub base_width: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub d_state: usize,
    pub alpha: f64,
    /// One output head per invocation slot instead of one per level.
    pub slot_heads: bool,
}

impl Default for FrnConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        FrnConfig {
            k_bands: 32,
            branch: 2,
            references: 4,
            use_rgb: true,
            base_width: g.base_width,
            depth: g.depth,
            blocks_per_stage: g.blocks_per_stage,
            d_state: g.d_state,
            alpha: g.alpha,
            slot_heads: true,
        }
    }
}

impl FrnConfig {
    /// Generator config with a single head.
    pub fn generator(&self, out_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: self.references + 3,
            out_channels,
            base_width: self.base_width,
            depth: self.depth,
            blocks_per_stage: self.blocks_per_stage,
            d_state: self.d_state,
            alpha: self.alpha,
            heads: 1,
        }
    }

    /// Generator config for level `level` of `plan`.
    pub fn level_generator(&self, plan: &RecursionPlan, level: usize) -> GeneratorConfig {
        let heads = if self.slot_heads { plan.level_specs[level - 1].invocations.len() } else { 1 };
        GeneratorConfig {
            heads,
            ..self.generator(plan.branch)
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            references: self.references,
            use_rgb: self.use_rgb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.references == 0 {
            return Err(FrnError::contract("references must be at least 1"));
        }
        build_plan(self.k_bands, self.branch)?;
        self.generator(self.branch).validate()
    }
}

/// The recursive network: a plan and one generator per level. Parameters
/// are stored under `level{ℓ}.` prefixes.
#[derive(Clone, Debug)]
pub struct Frn {
    pub config: FrnConfig,
    pub plan: RecursionPlan,
    pub generators: Vec<AtomicGenerator>,
}

impl Frn {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: FrnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = build_plan(config.k_bands, config.branch)?;
        let generators = (1..=plan.levels)
            .map(|l| AtomicGenerator::new(store, &format!("level{l}"), config.level_generator(&plan, l), rng))
            .collect::<Result<_>>()?;
        Ok(Frn {
            config,
            plan,
            generators,
        })
    }

    pub fn param_count(&self) -> usize {
        self.generators.iter().map(|g| crate::net::param_count(&g.config)).sum()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        rgb: Var,
        ctx: &mut ScanContext,
    ) -> Result<Reconstruction> {
        let models: Vec<BoundGenerator> = self
            .generators
            .iter()
            .map(|generator| BoundGenerator { generator, params: p })
            .collect();
        reconstruct(g, rgb, &self.plan, &models, self.config.conditioning(), ctx)
    }

    /// `rgb: [3, H, W] → [K, H, W]` outside of a training graph.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, rgb: &Tensor<T>, ctx: &mut ScanContext) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(rgb.clone());
        let r = self.forward(&mut g, &p, x, ctx)?;
        Ok(g.value(r.cube).clone())
    }
}
