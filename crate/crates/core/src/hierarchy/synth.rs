//! Synthetic census-like hierarchies.
//!
//! Leaf counts come from a configurable distribution and internal counts are
//! sums of their children, so every generated hierarchy is exactly consistent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{HierNode, Hierarchy, HierarchyError};

/// Number of children per node at one level, drawn uniformly from `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fanout {
    pub min: usize,
    pub max: usize,
}

impl Fanout {
    pub fn fixed(n: usize) -> Self {
        Self { min: n, max: n }
    }

    pub fn range(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LeafDistribution {
    /// `exp(Normal(mu, sigma))`, optionally rounded to the nearest integer.
    LogNormal { mu: f64, sigma: f64, round: bool },
}

impl Default for LeafDistribution {
    fn default() -> Self {
        LeafDistribution::LogNormal {
            mu: 3.0,
            sigma: 1.2,
            round: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// `fanouts[l]` is the child count rule for nodes at level `l + 1`;
    /// the hierarchy has `fanouts.len() + 1` levels.
    pub fanouts: Vec<Fanout>,
    pub leaf: LeafDistribution,
    pub seed: u64,
}

impl SynthSpec {
    /// One state, 128 tracts, 100..=228 blocks per tract (about 21k blocks).
    pub fn wyoming_like(seed: u64) -> Self {
        Self {
            fanouts: vec![Fanout::fixed(128), Fanout::range(100, 228)],
            leaf: LeafDistribution::default(),
            seed,
        }
    }

    fn validate(&self) -> Result<(), HierarchyError> {
        for (l, f) in self.fanouts.iter().enumerate() {
            if f.min == 0 || f.min > f.max {
                return Err(HierarchyError::InvalidSpec(format!(
                    "fanout at level {} must satisfy 1 <= min <= max, got {}..={}",
                    l + 1,
                    f.min,
                    f.max
                )));
            }
        }
        let LeafDistribution::LogNormal { mu, sigma, .. } = self.leaf;
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(HierarchyError::InvalidSpec(format!(
                "log-normal parameters must be finite with sigma >= 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(())
    }
}

pub fn synth_hierarchy(spec: &SynthSpec) -> Result<Hierarchy, HierarchyError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Shape first, level by level in id order.
    let mut ids: Vec<Vec<String>> = vec![vec!["s".to_owned()]];
    let mut parents: Vec<Vec<usize>> = vec![vec![]];
    for fanout in &spec.fanouts {
        let width = fanout.max.to_string().len();
        let prev = ids.last().expect("root level present");
        let mut level_ids = Vec::new();
        let mut level_parents = Vec::new();
        for (p, pid) in prev.iter().enumerate() {
            let k = rng.random_range(fanout.min..=fanout.max);
            for c in 0..k {
                level_ids.push(format!("{pid}.{c:0width$}"));
                level_parents.push(p);
            }
        }
        ids.push(level_ids);
        parents.push(level_parents);
    }

    let LeafDistribution::LogNormal { mu, sigma, round } = spec.leaf;
    let dist = LogNormal::new(mu, sigma).map_err(|e| HierarchyError::InvalidSpec(e.to_string()))?;
    let depth = ids.len();
    let mut counts: Vec<Vec<f64>> = ids.iter().map(|l| vec![0.0; l.len()]).collect();
    for c in counts[depth - 1].iter_mut() {
        let x: f64 = dist.sample(&mut rng);
        *c = if round { x.round() } else { x };
    }
    for l in (1..depth).rev() {
        let (upper, lower) = counts.split_at_mut(l);
        for (i, &c) in lower[0].iter().enumerate() {
            upper[l - 1][parents[l][i]] += c;
        }
    }

    let mut nodes = Vec::with_capacity(ids.iter().map(Vec::len).sum());
    for l in 0..depth {
        for (i, id) in ids[l].iter().enumerate() {
            let parent_id = (l > 0).then(|| ids[l - 1][parents[l][i]].as_str());
            nodes.push(HierNode::new(id.clone(), parent_id, l + 1, counts[l][i]));
        }
    }
    Hierarchy::from_nodes(nodes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::hierarchy::{check_consistency, level_stats};

    #[test]
    fn single_level() {
        let spec = SynthSpec {
            fanouts: vec![],
            leaf: LeafDistribution::default(),
            seed: 3,
        };
        let h = synth_hierarchy(&spec).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h.total() >= 0.0 && h.total().fract() == 0.0);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::wyoming_like(11);
        assert_eq!(
            synth_hierarchy(&spec).unwrap(),
            synth_hierarchy(&spec).unwrap()
        );
    }

    #[test]
    fn wyoming_shape() {
        let h = synth_hierarchy(&SynthSpec::wyoming_like(0)).unwrap();
        assert_eq!(h.depth(), 3);
        assert_eq!(h.level_range(1).len(), 1);
        assert_eq!(h.level_range(2).len(), 128);
        let blocks = h.level_range(3).len();
        assert!((19_000..23_000).contains(&blocks), "{blocks} blocks");
    }

    #[test]
    fn invalid_spec() {
        let mut spec = SynthSpec::wyoming_like(0);
        spec.fanouts[0] = Fanout::range(0, 3);
        assert!(matches!(
            synth_hierarchy(&spec),
            Err(HierarchyError::InvalidSpec(_))
        ));
        let mut spec = SynthSpec::wyoming_like(0);
        spec.leaf = LeafDistribution::LogNormal {
            mu: 0.0,
            sigma: -1.0,
            round: true,
        };
        assert!(matches!(
            synth_hierarchy(&spec),
            Err(HierarchyError::InvalidSpec(_))
        ));
    }

    proptest! {
        #[test]
        fn synthetic_is_consistent(seed in any::<u64>(), f in proptest::collection::vec((1usize..4, 0usize..3), 0..3)) {
            let spec = SynthSpec {
                fanouts: f.iter().map(|&(lo, extra)| Fanout::range(lo, lo + extra)).collect(),
                leaf: LeafDistribution::default(),
                seed,
            };
            let h = synth_hierarchy(&spec).unwrap();
            prop_assert!(check_consistency(&h, 0.0).is_consistent());
            let totals = level_stats(&h).level_totals();
            prop_assert!(totals.iter().all(|&t| t == totals[0]));
        }
    }
}
