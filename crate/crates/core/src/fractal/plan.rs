use serde::{Deserialize, Serialize};

use crate::error::{FrnError, Result};

/// Half-open range of final channel indices `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn new(lo: usize, hi: usize) -> Self {
        debug_assert!(lo < hi);
        Interval { lo, hi }
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo
    }

    /// Twice the center, which keeps centers integral.
    pub fn center2(&self) -> usize {
        self.lo + self.hi
    }

    pub fn center(&self) -> f64 {
        self.center2() as f64 / 2.0
    }

    /// Splits into `n` equal parts.
    pub fn split(&self, n: usize) -> Vec<Interval> {
        let w = self.width() / n;
        (0..n).map(|i| Interval::new(self.lo + i * w, self.lo + (i + 1) * w)).collect()
    }
}

/// One atomic call: refines `parent` into `children`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub parent: Interval,
    /// Index of `parent` in the previous level's intervals; `None` at level 1.
    pub parent_slot: Option<usize>,
    pub children: Vec<Interval>,
    /// Indices of `children` in this level's intervals.
    pub output_slots: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    /// 1-based.
    pub level: usize,
    pub invocations: Vec<Invocation>,
    /// The partition this level produces, ordered by channel index.
    pub intervals: Vec<Interval>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecursionPlan {
    pub k_bands: usize,
    pub branch: usize,
    pub levels: usize,
    pub level_specs: Vec<LevelSpec>,
}

impl RecursionPlan {
    pub fn invocation_counts(&self) -> Vec<usize> {
        self.level_specs.iter().map(|l| l.invocations.len()).collect()
    }

    pub fn total_invocations(&self) -> usize {
        self.level_specs.iter().map(|l| l.invocations.len()).sum()
    }

    /// Slots of the previous level's intervals read by an invocation that
    /// conditions on `references` neighbors.
    pub fn reference_slots(&self, level: usize, invocation: usize, references: usize) -> Vec<usize> {
        if level <= 1 {
            return Vec::new();
        }
        let prev = &self.level_specs[level - 2].intervals;
        let target = self.level_specs[level - 1].invocations[invocation].parent;
        nearest_intervals(prev, target, references)
    }
}

/// Exact integer `log_n k`, if it exists.
fn exact_log(k: usize, n: usize) -> Option<usize> {
    let (mut p, mut m) = (1usize, 0);
    while p < k {
        p = p.checked_mul(n)?;
        m += 1;
    }
    (p == k).then_some(m)
}

fn nearest_power(k: usize, n: usize) -> usize {
    let mut below = n;
    while let Some(next) = below.checked_mul(n) {
        if next > k {
            break;
        }
        below = next;
    }
    match below.checked_mul(n) {
        Some(above) if above - k < k.saturating_sub(below) => above,
        _ => below,
    }
}

/// The `n`-adic interval tree over `[0, K)`.
pub fn build_plan(k_bands: usize, branch: usize) -> Result<RecursionPlan> {
    if branch < 2 {
        return Err(FrnError::Contract(format!("branch factor must be at least 2, got {branch}")));
    }
    let levels = match exact_log(k_bands, branch) {
        Some(m) if m >= 1 => m,
        _ => {
            return Err(FrnError::Contract(format!(
                "K={k_bands} is not a positive power of n={branch}; nearest valid K is {}",
                nearest_power(k_bands.max(1), branch)
            )))
        }
    };
    let mut level_specs = Vec::with_capacity(levels);
    let mut prev = vec![Interval::new(0, k_bands)];
    for level in 1..=levels {
        let (invocations, intervals) = if level == 1 {
            let children = prev[0].split(branch);
            let inv = Invocation {
                parent: prev[0],
                parent_slot: None,
                children: children.clone(),
                output_slots: (0..branch).collect(),
            };
            (vec![inv], children)
        } else {
            let mut invs = Vec::with_capacity(prev.len());
            let mut all = Vec::with_capacity(prev.len() * branch);
            for (slot, parent) in prev.iter().enumerate() {
                let children = parent.split(branch);
                invs.push(Invocation {
                    parent: *parent,
                    parent_slot: Some(slot),
                    children: children.clone(),
                    output_slots: (all.len()..all.len() + branch).collect(),
                });
                all.extend(children);
            }
            (invs, all)
        };
        prev = intervals.clone();
        level_specs.push(LevelSpec {
            level,
            invocations,
            intervals,
        });
    }
    Ok(RecursionPlan {
        k_bands,
        branch,
        levels,
        level_specs,
    })
}

/// Indices of the (up to) `count` intervals whose centers are nearest to
/// `target`'s, ties going to the lower center, returned in center order.
pub fn nearest_intervals(intervals: &[Interval], target: Interval, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..intervals.len()).collect();
    let t = target.center2();
    idx.sort_by_key(|&i| (intervals[i].center2().abs_diff(t), intervals[i].center2()));
    idx.truncate(count);
    idx.sort_by_key(|&i| (intervals[i].center2(), i));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_two_by_two() {
        let p = build_plan(32, 2).unwrap();
        assert_eq!(p.levels, 5);
        assert_eq!(p.invocation_counts(), vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn twenty_seven_by_three() {
        let p = build_plan(27, 3).unwrap();
        assert_eq!(p.invocation_counts(), vec![1, 3, 9]);
        assert_eq!(
            p.level_specs[0].intervals,
            vec![Interval::new(0, 9), Interval::new(9, 18), Interval::new(18, 27)]
        );
    }

    #[test]
    fn single_level() {
        let p = build_plan(5, 5).unwrap();
        assert_eq!(p.levels, 1);
        assert_eq!(p.level_specs[0].invocations[0].children.len(), 5);
    }

    #[test]
    fn suggests_nearest_valid_k() {
        let e = build_plan(31, 2).unwrap_err().to_string();
        assert!(e.contains("nearest valid K is 32"), "{e}");
        let e = build_plan(20, 3).unwrap_err().to_string();
        assert!(e.contains("nearest valid K is 27"), "{e}");
        assert!(build_plan(1, 2).is_err());
        assert!(build_plan(8, 1).is_err());
    }

    #[test]
    fn nearest_centers_with_ties() {
        let iv: Vec<Interval> = (0..8).map(|i| Interval::new(4 * i, 4 * i + 4)).collect();
        // Target center 13.
        let pick = nearest_intervals(&iv, Interval::new(12, 14), 4);
        let centers: Vec<f64> = pick.iter().map(|&i| iv[i].center()).collect();
        assert_eq!(centers, vec![6.0, 10.0, 14.0, 18.0]);
        // Center 12 sits between 10 and 14; equal distance picks the lower one.
        let pick = nearest_intervals(&iv, Interval::new(11, 13), 1);
        assert_eq!(iv[pick[0]].center(), 10.0);
    }
}
