use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FrnError, Result};
use crate::numerics::{fan_in_uniform, BoundParams, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::ssm::{BssmBlock, EpsilonPolicy, ScanContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `S + 3` with RGB, `S` without.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub d_state: usize,
    pub alpha: f64,
    /// Number of output heads. Head `j` serves invocation slot `j`; the
    /// body is shared.
    #[serde(default = "one")]
    pub heads: usize,
}

fn one() -> usize {
    1
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 7,
            out_channels: 2,
            base_width: 32,
            depth: 2,
            blocks_per_stage: 1,
            d_state: 8,
            alpha: 0.5,
            heads: 1,
        }
    }
}

impl GeneratorConfig {
    /// The `w/o RGB` ablation conditions on references alone, so one input
    /// channel is the minimum accepted here.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FrnError::Contract(msg));
        if self.in_channels == 0 {
            return bad("generator needs at least one input channel".into());
        }
        if self.out_channels == 0 {
            return bad("generator needs at least one output channel".into());
        }
        if self.heads == 0 {
            return bad("generator needs at least one head".into());
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return bad(format!("base_width must be even and positive, got {}", self.base_width));
        }
        if self.d_state == 0 {
            return bad("d_state must be positive".into());
        }
        if self.depth > 8 {
            return bad(format!("depth {} is unreasonably large", self.depth));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Exact number of learnable scalars of a generator built from `config`.
pub fn param_count(config: &GeneratorConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let blocks = |w: usize| config.blocks_per_stage * BssmBlock::scalar_count(w, config.d_state);
    let b = config.base_width;
    let mut total = conv(config.in_channels, b, 3) + config.heads * conv(b, config.out_channels, 3);
    for i in 0..config.depth {
        let (lo, hi) = (config.width(i), config.width(i + 1));
        total += conv(lo, hi, 2) + blocks(hi);
        total += conv(hi + lo, lo, 1) + blocks(lo);
    }
    total + blocks(config.width(config.depth))
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan = cin * k * k;
        Conv {
            weight: store.add(format!("{name}.weight"), fan_in_uniform([cout, cin, k, k], fan, rng)),
            bias: store.add(format!("{name}.bias"), fan_in_uniform([cout], fan, rng)),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), stride, pad)
    }
}

/// Parameter layout of one generator. Values live in a [`ParamStore`] so
/// several generators can share one store under distinct prefixes.
#[derive(Clone, Debug)]
pub struct AtomicGenerator {
    pub config: GeneratorConfig,
    embed: Conv,
    down: Vec<Conv>,
    encoder: Vec<Vec<BssmBlock>>,
    bottleneck: Vec<BssmBlock>,
    /// Indexed by stage; applied from the deepest stage outwards.
    fuse: Vec<Conv>,
    decoder: Vec<Vec<BssmBlock>>,
    heads: Vec<Conv>,
}

impl AtomicGenerator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: GeneratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let stack = |store: &mut ParamStore<T>, rng: &mut R, name: String, width: usize| {
            (0..c.blocks_per_stage)
                .map(|k| BssmBlock::new(store, &format!("{name}.{k}"), width, c.d_state, rng))
                .collect::<Vec<_>>()
        };
        let embed = Conv::new(store, &format!("{prefix}.embed"), c.in_channels, c.base_width, 3, rng);
        let mut down = Vec::new();
        let mut encoder = Vec::new();
        for i in 0..c.depth {
            down.push(Conv::new(store, &format!("{prefix}.down{i}"), c.width(i), c.width(i + 1), 2, rng));
            encoder.push(stack(store, rng, format!("{prefix}.enc{i}"), c.width(i + 1)));
        }
        let bottleneck = stack(store, rng, format!("{prefix}.mid"), c.width(c.depth));
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..c.depth {
            let (lo, hi) = (c.width(i), c.width(i + 1));
            fuse.push(Conv::new(store, &format!("{prefix}.fuse{i}"), hi + lo, lo, 1, rng));
            decoder.push(stack(store, rng, format!("{prefix}.dec{i}"), lo));
        }
        let heads = (0..c.heads)
            .map(|j| {
                let name = if c.heads == 1 { format!("{prefix}.head") } else { format!("{prefix}.head{j}") };
                Conv::new(store, &name, c.base_width, c.out_channels, 3, rng)
            })
            .collect();
        Ok(AtomicGenerator {
            config,
            embed,
            down,
            encoder,
            bottleneck,
            fuse,
            decoder,
            heads,
        })
    }

    /// Every BSSM block, in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &BssmBlock> {
        self.encoder
            .iter()
            .flatten()
            .chain(&self.bottleneck)
            .chain(self.decoder.iter().rev().flatten())
    }

    /// Parameters of linear output head `slot`.
    pub fn head_params(&self, slot: usize) -> [ParamId; 2] {
        [self.heads[slot].weight, self.heads[slot].bias]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 3 || shape[0] != c.in_channels {
            return Err(FrnError::Contract(format!(
                "generator expects [{}, H, W] conditioning, got {shape:?}",
                c.in_channels
            )));
        }
        let m = c.spatial_multiple();
        if shape[1] == 0 || shape[2] == 0 || shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(FrnError::Contract(format!(
                "spatial size {}x{} must be a positive multiple of {m} for depth {}",
                shape[1], shape[2], c.depth
            )));
        }
        Ok(())
    }

    /// `cond: [in_channels, H, W] → [out_channels, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        cond: Var,
        ctx: &mut ScanContext,
    ) -> Result<Var> {
        self.forward_slot(g, p, cond, 0, ctx)
    }

    /// As [`forward`](Self::forward), read out through head `slot`.
    pub fn forward_slot<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        cond: Var,
        slot: usize,
        ctx: &mut ScanContext,
    ) -> Result<Var> {
        self.check_input(g.shape(cond))?;
        let head = self.heads.get(slot).ok_or_else(|| {
            FrnError::Contract(format!("head {slot} requested from a generator with {}", self.heads.len()))
        })?;
        let run = |g: &mut Graph<T>, ctx: &mut ScanContext, blocks: &[BssmBlock], mut x: Var| {
            for b in blocks {
                x = b.forward(g, p, x, ctx)?;
            }
            Ok::<_, FrnError>(x)
        };
        let mut x = self.embed.apply(g, p, cond, 1, 1)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (conv, blocks) in self.down.iter().zip(&self.encoder) {
            skips.push(x);
            x = conv.apply(g, p, x, 2, 0)?;
            x = run(g, ctx, blocks, x)?;
        }
        x = run(g, ctx, &self.bottleneck, x)?;
        for i in (0..self.config.depth).rev() {
            let up = g.upsample2x(x)?;
            let cat = g.concat(&[up, skips[i]])?;
            x = self.fuse[i].apply(g, p, cat, 1, 0)?;
            x = run(g, ctx, &self.decoder[i], x)?;
        }
        head.apply(g, p, x, 1, 1)
    }

    /// Forward pass outside of any training graph.
    pub fn generate<T: Real>(&self, store: &ParamStore<T>, cond: &Tensor<T>, ctx: &mut ScanContext) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(cond.clone());
        let y = self.forward(&mut g, &p, x, ctx)?;
        Ok(g.value(y).clone())
    }

    /// Runs `batch: [B, in, H, W]` sample by sample in parallel. Sample `i`
    /// draws its thresholds from a context seeded with `seed + i`.
    pub fn generate_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &Tensor<T>,
        policy: EpsilonPolicy,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(FrnError::Contract(format!("batch must be [B, C, H, W], got {s:?}")));
        }
        let (b, per) = (s[0], s[1] * s[2] * s[3]);
        let outs: Vec<Tensor<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x = Tensor::new(&s[1..], batch.data()[i * per..(i + 1) * per].to_vec())?;
                let mut ctx = ScanContext::new(policy, seed.wrapping_add(i as u64))?;
                self.generate(store, &x, &mut ctx)
            })
            .collect::<Result<_>>()?;
        let data: Vec<T> = outs.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new([b, self.config.out_channels, s[2], s[3]], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: GeneratorConfig) -> (ParamStore<f32>, AtomicGenerator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = AtomicGenerator::new(&mut store, "g", config, &mut rng).unwrap();
        (store, g)
    }

    #[test]
    fn embed_and_head_only() {
        let cfg = GeneratorConfig {
            depth: 0,
            blocks_per_stage: 0,
            ..Default::default()
        };
        assert_eq!(param_count(&cfg), 2626);
        assert_eq!(build(cfg).0.scalar_count(), 2626);
    }

    #[test]
    fn default_count_matches_store() {
        let cfg = GeneratorConfig::default();
        assert_eq!(param_count(&cfg), build(cfg).0.scalar_count());
    }

    #[test]
    fn indivisible_size_names_the_multiple() {
        let (store, g) = build(GeneratorConfig::default());
        let x = Tensor::zeros([7, 10, 8]);
        let err = g.generate(&store, &x, &mut ScanContext::unmasked()).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, g) = build(GeneratorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([7, 16, 12], 0.0, 1.0, &mut rng);
        let y = g.generate(&store, &x, &mut ScanContext::inference(0.5).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 16, 12]);
        assert!(y.is_finite());
    }
}
