//! Central-difference verification of analytic gradients.
//!
//! Every differentiable op is registered here under a name together with a
//! canonical input shape and value range. [`grad_check`] evaluates
//! `L = Σ out ⊙ R` for a fixed random `R`, differentiates it, and compares
//! each input gradient entry with `(L(x+h) − L(x−h)) / 2h` in `f64`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{FrnError, Result};
use crate::ssm::{fused_scan, kernel_gate, BssmBlock, ScanContext, ScanDirection, ScanInputs};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-4;
/// Gate values this close to ε are excluded from masked-scan checks.
pub const MASK_MARGIN: f64 = 1e-3;

/// Inputs of a check: seed and the value range every (unconstrained) input
/// is drawn from. `shapes` optionally overrides the op's canonical shapes.
#[derive(Clone, Debug)]
pub struct InputSpec {
    pub seed: u64,
    pub lo: f64,
    pub hi: f64,
    pub shapes: Option<Vec<Vec<usize>>>,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            seed: 0,
            lo: -2.0,
            hi: 2.0,
            shapes: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    /// Max relative error for each input, over checked entries.
    pub max_rel_error: Vec<f64>,
    /// Entries skipped because they sit within [`MASK_MARGIN`] of a threshold.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
type Exclude = fn(&[Tensor<f64>]) -> Vec<Vec<bool>>;

struct OpCase {
    /// `(shape, range)`; `None` range means "use the spec's range".
    inputs: Vec<(Vec<usize>, Option<(f64, f64)>)>,
    build: Build,
    exclude: Option<Exclude>,
}

const MASKED_EPSILON: f64 = 0.3;

fn unit(g: &mut Graph<f64>, v: &[Var], f: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<Var> {
    f(g, v[0])
}

fn scan_inputs(v: &[Var]) -> ScanInputs {
    ScanInputs {
        x: v[0],
        delta: v[1],
        a: v[2],
        b: v[3],
        c: v[4],
        d_skip: v[5],
    }
}

fn scan_shapes(t: usize, d: usize, n: usize, delta_lo: f64) -> Vec<(Vec<usize>, Option<(f64, f64)>)> {
    vec![
        (vec![t, d], None),
        (vec![t, d], Some((delta_lo, 2.0))),
        (vec![d, n], Some((-2.0, -0.1))),
        (vec![t, n], None),
        (vec![t, n], None),
        (vec![d], None),
    ]
}

fn case(name: &str) -> Option<OpCase> {
    let same = |n: usize, shape: &[usize]| (0..n).map(|_| (shape.to_vec(), None)).collect::<Vec<_>>();
    let c = |inputs, build: Build| OpCase {
        inputs,
        build,
        exclude: None,
    };
    Some(match name {
        "add" => c(same(2, &[3, 4]), |g, v| g.add(v[0], v[1])),
        "sub" => c(same(2, &[3, 4]), |g, v| g.sub(v[0], v[1])),
        "mul" => c(same(2, &[3, 4]), |g, v| g.mul(v[0], v[1])),
        "scale" => c(same(1, &[5]), |g, v| g.scale(v[0], -1.7)),
        "add_scalar" => c(same(1, &[5]), |g, v| g.add_scalar(v[0], 0.3)),
        "neg" => c(same(1, &[5]), |g, v| unit(g, v, Graph::neg)),
        "exp" => c(same(1, &[8]), |g, v| unit(g, v, Graph::exp)),
        "sigmoid" => c(same(1, &[8]), |g, v| unit(g, v, Graph::sigmoid)),
        "silu" => c(same(1, &[8]), |g, v| unit(g, v, Graph::silu)),
        "softplus" => c(same(1, &[8]), |g, v| unit(g, v, Graph::softplus)),
        "abs" => c(same(1, &[8]), |g, v| unit(g, v, Graph::abs)),
        "sum" => c(same(1, &[2, 3]), |g, v| unit(g, v, Graph::sum)),
        "mean" => c(same(1, &[2, 3]), |g, v| unit(g, v, Graph::mean)),
        "matmul" => c(
            vec![(vec![3, 4], None), (vec![4, 2], None)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        "matmul_batched" => c(
            vec![(vec![2, 3, 4], None), (vec![4, 2], None)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        "transpose" => c(same(1, &[3, 5]), |g, v| unit(g, v, Graph::transpose)),
        "reshape" => c(same(1, &[2, 6]), |g, v| g.reshape(v[0], [3, 4])),
        "broadcast_to" => c(same(1, &[3, 1]), |g, v| g.broadcast_to(v[0], [2, 3, 4])),
        "concat" => c(
            vec![(vec![2, 3], None), (vec![1, 3], None)],
            |g, v| g.concat(&[v[0], v[1]]),
        ),
        "slice" => c(same(1, &[4, 3]), |g, v| g.slice(v[0], 1, 2)),
        "conv2d" => c(
            vec![(vec![2, 5, 5], None), (vec![3, 2, 3, 3], None), (vec![3], None)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        "conv2d_strided" => c(
            vec![(vec![2, 4, 6], None), (vec![3, 2, 2, 2], None), (vec![3], None)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 0),
        ),
        "conv2d_pointwise" => c(
            vec![(vec![3, 2, 3], None), (vec![2, 3, 1, 1], None)],
            |g, v| g.conv2d(v[0], v[1], None, 1, 0),
        ),
        "dwconv2d" => c(
            vec![(vec![2, 5, 4], None), (vec![2, 3, 3], None), (vec![2], None)],
            |g, v| g.dwconv2d(v[0], v[1], Some(v[2]), 1),
        ),
        "upsample2x" => c(same(1, &[2, 2, 3]), |g, v| unit(g, v, Graph::upsample2x)),
        "layer_norm" => c(
            vec![(vec![4, 3, 2], None), (vec![4], None), (vec![4], None)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        "channel_mean" => c(same(1, &[3, 2, 2]), |g, v| unit(g, v, Graph::channel_mean)),
        "selective_scan" => c(scan_shapes(6, 3, 4, 0.1), |g, v| {
            let t = g.shape(v[0])[0];
            fused_scan(g, scan_inputs(v), &[ScanDirection::identity(t, None)])
        }),
        "cross_scan" => c(scan_shapes(6, 2, 3, 0.1), |g, v| {
            let dirs: Vec<ScanDirection> = crate::ssm::scan_orders(2, 3)
                .into_iter()
                .map(|o| ScanDirection {
                    order: Arc::from(o),
                    epsilon: None,
                })
                .collect();
            fused_scan(g, scan_inputs(v), &dirs)
        }),
        "masked_scan" => OpCase {
            inputs: scan_shapes(8, 3, 4, 0.05),
            build: |g, v| {
                let t = g.shape(v[0])[0];
                fused_scan(
                    g,
                    scan_inputs(v),
                    &[ScanDirection::identity(t, Some(MASKED_EPSILON))],
                )
            },
            exclude: Some(|inputs| {
                let gate = kernel_gate(&inputs[1], &inputs[2]);
                let near: Vec<bool> = gate
                    .data()
                    .iter()
                    .map(|g| (g - MASKED_EPSILON).abs() < MASK_MARGIN)
                    .collect();
                let mut out: Vec<Vec<bool>> = inputs.iter().map(|t| vec![false; t.numel()]).collect();
                // Only Δ moves the gate directly; A moves every gate in its row.
                out[1] = near.clone();
                let d = inputs[2].dim(0);
                let n = inputs[2].dim(1);
                for (i, &flag) in near.iter().enumerate() {
                    if flag {
                        let row = i % d;
                        out[2][row * n..(row + 1) * n].iter_mut().for_each(|e| *e = true);
                    }
                }
                out
            }),
        },
        "bssm_block" => c(vec![(vec![4, 2, 3], None)], |g, v| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let block = BssmBlock::new(&mut store, "b", 4, 3, &mut rng);
            // Perturb the deterministic init so LN affine terms are generic.
            for (i, t) in store.tensors_mut().iter_mut().enumerate() {
                for (j, x) in t.data_mut().iter_mut().enumerate() {
                    *x += 0.05 * (((i * 31 + j * 7) % 11) as f64 - 5.0) / 5.0;
                }
            }
            let p = store.bind(g);
            let mut ctx = ScanContext::new(crate::ssm::EpsilonPolicy::Fixed(0.0), 0)?;
            block.forward(g, &p, v[0], &mut ctx)
        }),
        _ => return None,
    })
}

/// Every name accepted by [`grad_check`].
pub const REGISTERED_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "exp",
    "sigmoid",
    "silu",
    "softplus",
    "abs",
    "sum",
    "mean",
    "matmul",
    "matmul_batched",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "slice",
    "conv2d",
    "conv2d_strided",
    "conv2d_pointwise",
    "dwconv2d",
    "upsample2x",
    "layer_norm",
    "channel_mean",
    "selective_scan",
    "cross_scan",
    "masked_scan",
    "bssm_block",
];

fn loss_of(build: Build, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(Graph<f64>, Vec<Var>, Var, Tensor<f64>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            Tensor::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng)
        }
    };
    let wv = g.input(w.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss, w))
}

/// Compares analytic and central-difference gradients of a registered op.
pub fn grad_check(op_name: &str, spec: &InputSpec, tolerance: f64) -> Result<GradCheckReport> {
    let case = case(op_name).ok_or_else(|| FrnError::UnknownOp(op_name.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<Vec<usize>> = match &spec.shapes {
        Some(s) if s.len() == case.inputs.len() => s.clone(),
        Some(s) => {
            return Err(FrnError::contract(format!(
                "{op_name} takes {} inputs, spec gives {} shapes",
                case.inputs.len(),
                s.len()
            )))
        }
        None => case.inputs.iter().map(|(s, _)| s.clone()).collect(),
    };
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(&case.inputs)
        .map(|(shape, (_, range))| {
            let (lo, hi) = range.unwrap_or((spec.lo, spec.hi));
            Tensor::uniform(shape.clone(), lo, hi, &mut rng)
        })
        .collect();
    let (g, vars, loss, weights) = loss_of(case.build, &inputs, None)?;
    let grads = g.backward(loss)?;
    let excluded_mask = case.exclude.map(|f| f(&inputs));
    let mut report = GradCheckReport {
        op: op_name.to_string(),
        max_rel_error: Vec::with_capacity(inputs.len()),
        excluded: 0,
        tolerance,
    };
    let eval = |pert: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, l, _) = loss_of(case.build, pert, Some(&weights))?;
        Ok(g.value(l).data()[0])
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            if excluded_mask.as_ref().is_some_and(|m| m[i][j]) {
                report.excluded += 1;
                continue;
            }
            let mut pert = inputs.clone();
            let x0 = inputs[i].data()[j];
            pert[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&pert)?;
            pert[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&pert)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        report.max_rel_error.push(worst);
    }
    Ok(report)
}
