use std::cell::RefCell;

use frn_core::fractal::{build_plan, reconstruct, AtomicModel, Conditioning, Interval, RecursionPlan};
use frn_core::ssm::ScanContext;
use frn_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Emits `mean(reference planes) + 0.1·k` for output `k`, ignoring RGB, and
/// records every conditioning shape it is handed.
struct MeanStub {
    n: usize,
    refs: usize,
    seen: RefCell<Vec<Vec<usize>>>,
}

impl AtomicModel<f64> for MeanStub {
    fn out_channels(&self) -> usize {
        self.n
    }

    fn invoke(&self, g: &mut Graph<f64>, cond: Var, _slot: usize, _ctx: &mut ScanContext) -> Result<Var> {
        self.seen.borrow_mut().push(g.shape(cond).to_vec());
        let refs = g.slice(cond, 0, self.refs)?;
        let mean = g.channel_mean(refs)?;
        let outs = (0..self.n)
            .map(|k| g.add_scalar(mean, 0.1 * k as f64))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&outs)
    }
}

/// Replays the schedule on plain vectors. Siblings are visited in reverse
/// to show the result does not depend on their order.
fn replay(plan: &RecursionPlan, rgb: &Tensor<f64>, refs: usize) -> Vec<Vec<f64>> {
    let p = rgb.dim(1) * rgb.dim(2);
    let d = rgb.data();
    let mean: Vec<f64> = (0..p).map(|i| (d[i] + d[p + i] + d[2 * p + i]) / 3.0).collect();
    let mut prev: Vec<(Interval, Vec<f64>)> = Vec::new();
    for spec in &plan.level_specs {
        let mut next: Vec<Option<(Interval, Vec<f64>)>> = vec![None; spec.intervals.len()];
        for inv in spec.invocations.iter().rev() {
            let target = inv.parent.lo + inv.parent.hi;
            let mut order: Vec<usize> = (0..prev.len()).collect();
            order.sort_by_key(|&i| {
                let c = prev[i].0.lo + prev[i].0.hi;
                (c.abs_diff(target), c)
            });
            let mut planes: Vec<&Vec<f64>> = order.iter().take(refs).map(|&i| &prev[i].1).collect();
            while planes.len() < refs {
                planes.push(&mean);
            }
            let avg: Vec<f64> = (0..p).map(|i| planes.iter().map(|pl| pl[i]).sum::<f64>() / refs as f64).collect();
            for (k, (&slot, child)) in inv.output_slots.iter().zip(&inv.children).enumerate() {
                next[slot] = Some((*child, avg.iter().map(|v| v + 0.1 * k as f64).collect()));
            }
        }
        prev = next.into_iter().map(Option::unwrap).collect();
        prev.sort_by_key(|(iv, _)| iv.lo);
    }
    prev.into_iter().map(|(_, v)| v).collect()
}

fn plans() -> impl Strategy<Value = (usize, usize)> {
    prop::sample::select(vec![(2, 2), (4, 2), (8, 2), (16, 2), (32, 2), (9, 3), (27, 3), (16, 4), (5, 5)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruct_matches_schedule_replay(
        (k, n) in plans(),
        refs in 1usize..6,
        h in 1usize..4,
        w in 1usize..4,
        seed in any::<u64>(),
    ) {
        let plan = build_plan(k, n).unwrap();
        let rgb = Tensor::<f64>::uniform([3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let stubs: Vec<MeanStub> = (0..plan.levels)
            .map(|_| MeanStub { n, refs, seen: RefCell::new(Vec::new()) })
            .collect();
        let mut g = Graph::new();
        let x = g.input(rgb.clone());
        let cond = Conditioning { references: refs, use_rgb: true };
        let out = reconstruct(&mut g, x, &plan, &stubs, cond, &mut ScanContext::unmasked()).unwrap();

        prop_assert_eq!(g.shape(out.cube), &[k, h, w][..]);
        let want = replay(&plan, &rgb, refs);
        let got = g.value(out.cube).data();
        for (band, plane) in want.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                prop_assert!((got[band * h * w + i] - v).abs() < 1e-12);
            }
        }

        // Level arithmetic and truncated conditioning.
        for (l, (level, stub)) in out.levels.iter().zip(&stubs).enumerate() {
            prop_assert_eq!(g.shape(*level)[0], n.pow(l as u32 + 1));
            let seen = stub.seen.borrow();
            prop_assert_eq!(seen.len(), n.pow(l as u32));
            prop_assert!(seen.iter().all(|s| s == &[refs + 3, h, w]));
        }
    }

    #[test]
    fn every_level_partitions_the_band_range(k in 1usize..=256, n in 2usize..=16) {
        match build_plan(k, n) {
            Err(_) => prop_assert!(!(1..=8).any(|m| n.checked_pow(m) == Some(k))),
            Ok(plan) => {
                prop_assert_eq!(plan.branch.pow(plan.levels as u32), k);
                for spec in &plan.level_specs {
                    let mut cursor = 0;
                    for iv in &spec.intervals {
                        prop_assert_eq!(iv.lo, cursor);
                        prop_assert!(iv.hi > iv.lo);
                        cursor = iv.hi;
                    }
                    prop_assert_eq!(cursor, k);
                    prop_assert_eq!(spec.intervals.len(), n.pow(spec.level as u32));
                }
            }
        }
    }
}

#[test]
fn default_plan_emits_thirty_two_bands() {
    let plan = build_plan(32, 2).unwrap();
    let stubs: Vec<MeanStub> = (0..5)
        .map(|_| MeanStub {
            n: 2,
            refs: 4,
            seen: RefCell::new(Vec::new()),
        })
        .collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::full([3, 2, 2], 0.5));
    let out = reconstruct(&mut g, x, &plan, &stubs, Conditioning::default(), &mut ScanContext::unmasked()).unwrap();
    assert_eq!(g.shape(out.cube), [32, 2, 2]);
    assert_eq!(stubs.iter().map(|s| s.seen.borrow().len()).sum::<usize>(), 31);
}

#[test]
fn wrong_generator_count_is_a_contract_error() {
    let plan = build_plan(8, 2).unwrap();
    let stubs = vec![MeanStub {
        n: 2,
        refs: 2,
        seen: RefCell::new(Vec::new()),
    }];
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros([3, 1, 1]));
    let cond = Conditioning {
        references: 2,
        use_rgb: true,
    };
    assert!(reconstruct(&mut g, x, &plan, &stubs, cond, &mut ScanContext::unmasked()).is_err());
}
