//! Evaluation reports, the factorization TV verifier, and PCA plots.

mod viz;

pub use viz::{convex_hull, kmeans, pca_policy_viz, point_in_polygon, Pca, VizOutput};

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::envs::{Env, JointPolicy};
use crate::error::{Error, Result};
use crate::policy::{evaluate_policy, ActorSet};

/// `100 * (s - s_random) / (s_expert - s_random)`.
pub fn normalized_score(s: f64, s_random: f64, s_expert: f64) -> Result<f64> {
    if s_expert == s_random {
        return Err(Error::config(format!("normalization references are equal ({s_random})")));
    }
    Ok(100.0 * (s - s_random) / (s_expert - s_random))
}

/// Total variation between the two-corner joint and the product of its
/// uniform marginals, in closed form.
pub fn tv_factorized_analytic(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::domain("factorization TV needs n >= 1"));
    }
    Ok(1.0 - 2f64.powi(1 - n as i32))
}

pub const MAX_ENUMERATION_AGENTS: usize = 20;

/// Same quantity by summing over all `2^n` corners.
pub fn tv_factorized_enumerate(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::domain("factorization TV needs n >= 1"));
    }
    if n > MAX_ENUMERATION_AGENTS {
        return Err(Error::Resource(format!(
            "enumerating 2^{n} corners exceeds the 2^{MAX_ENUMERATION_AGENTS} bound; use tv_factorized_analytic"
        )));
    }
    let product = 0.5f64.powi(n as i32);
    let all = (1u64 << n) - 1;
    let terms: Vec<f64> = (0..=all)
        .map(|mask| {
            let joint = if mask == 0 || mask == all { 0.5 } else { 0.0 };
            (joint - product).abs()
        })
        .collect();
    Ok(0.5 * crate::diffusion::pairwise_sum(&terms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    /// Bit `i` set when agent `i` sits in the upper half of its range.
    pub corner: u64,
    pub joint: f64,
    pub product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub n_agents: usize,
    pub analytic_tv: f64,
    pub enumerated_tv: Option<f64>,
    pub empirical_tv: f64,
    /// Bins per agent actually used (may be below the request).
    pub bins: usize,
    /// Per-agent histogram probabilities.
    pub marginals: Vec<Vec<f64>>,
    pub modes: Vec<ModeEntry>,
}

pub const MAX_EMPIRICAL_AGENTS: usize = 12;

fn bin_of(a: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let u = ((a - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((u * bins as f64) as usize).min(bins - 1)
}

/// Histogram estimate of the TV between the dataset's joint action
/// distribution and the product of its per-agent marginals.
pub fn tv_factorized_empirical(dataset: &Dataset, bins: usize) -> Result<FactorizationReport> {
    let Env::ModeBandit(env) = dataset.env() else {
        return Err(Error::config("empirical factorization TV expects a mode-bandit dataset"));
    };
    let n = env.n_agents;
    if n > MAX_EMPIRICAL_AGENTS {
        return Err(Error::Resource(format!("empirical TV grid is limited to {MAX_EMPIRICAL_AGENTS} agents, got {n}")));
    }
    if bins == 0 {
        return Err(Error::config("need >= 1 bin per agent"));
    }
    let (lo, hi) = dataset.env().action_box();
    let actions = dataset.actions();
    let total = dataset.len() as f64;

    let mut bins = bins;
    let marginal_counts = loop {
        let mut counts = vec![vec![0usize; bins]; n];
        for row in actions.rows() {
            for (i, &a) in row.iter().enumerate() {
                counts[i][bin_of(a, lo, hi, bins)] += 1;
            }
        }
        if bins == 1 || counts.iter().flatten().all(|&c| c > 0) {
            break counts;
        }
        log::warn!("empty marginal bins at resolution {bins}; halving");
        bins /= 2;
    };
    let marginals: Vec<Vec<f64>> = marginal_counts
        .iter()
        .map(|c| c.iter().map(|&k| k as f64 / total).collect())
        .collect();

    let mut joint: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut corners: HashMap<u64, usize> = HashMap::new();
    for row in actions.rows() {
        let cell: Vec<usize> = row.iter().map(|&a| bin_of(a, lo, hi, bins)).collect();
        *joint.entry(cell).or_default() += 1;
        let mid = 0.5 * (lo + hi);
        let mask = row.iter().enumerate().fold(0u64, |m, (i, &a)| if a >= mid { m | (1 << i) } else { m });
        *corners.entry(mask).or_default() += 1;
    }
    let product_of = |cell: &[usize]| cell.iter().enumerate().map(|(i, &b)| marginals[i][b]).product::<f64>();
    let mut cells: Vec<(&Vec<usize>, &usize)> = joint.iter().collect();
    cells.sort();
    let mut abs_terms = Vec::with_capacity(cells.len());
    let mut covered = Vec::with_capacity(cells.len());
    for (cell, &count) in cells {
        let p = product_of(cell);
        abs_terms.push((count as f64 / total - p).abs());
        covered.push(p);
    }
    let uncovered = (1.0 - crate::diffusion::pairwise_sum(&covered)).max(0.0);
    let empirical_tv = 0.5 * (crate::diffusion::pairwise_sum(&abs_terms) + uncovered);

    let mid = 0.5 * (lo + hi);
    let upper: Vec<f64> = (0..n)
        .map(|i| actions.column(i).iter().filter(|&&a| a >= mid).count() as f64 / total)
        .collect();
    let modes = (0..1u64 << n)
        .map(|corner| ModeEntry {
            corner,
            joint: corners.get(&corner).copied().unwrap_or(0) as f64 / total,
            product: (0..n)
                .map(|i| if corner >> i & 1 == 1 { upper[i] } else { 1.0 - upper[i] })
                .product(),
        })
        .collect();

    Ok(FactorizationReport {
        n_agents: n,
        analytic_tv: tv_factorized_analytic(n)?,
        enumerated_tv: Some(tv_factorized_enumerate(n)?),
        empirical_tv,
        bins,
        marginals,
        modes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_seed: Vec<SeedResult>,
    pub pooled_mean: f64,
    /// Population std of the per-seed means.
    pub pooled_std: f64,
    pub s_random: Option<f64>,
    pub s_expert: Option<f64>,
    pub normalized: Option<f64>,
}

impl ScoreReport {
    pub fn from_seeds(per_seed: Vec<SeedResult>, references: Option<(f64, f64)>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::config("score report needs >= 1 seed"));
        }
        let (pooled_mean, pooled_std) = pooled(&per_seed);
        let normalized = references.map(|(r, e)| normalized_score(pooled_mean, r, e)).transpose()?;
        Ok(Self {
            per_seed,
            pooled_mean,
            pooled_std,
            s_random: references.map(|r| r.0),
            s_expert: references.map(|r| r.1),
            normalized,
        })
    }

    /// True when the pooled fields equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        let (m, s) = pooled(&self.per_seed);
        m == self.pooled_mean && s == self.pooled_std
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,mean,std\n");
        for r in &self.per_seed {
            let _ = writeln!(out, "{},{},{}", r.seed, r.mean, r.std);
        }
        let _ = writeln!(out, "pooled,{},{}", self.pooled_mean, self.pooled_std);
        if let Some(n) = self.normalized {
            let _ = writeln!(out, "normalized,{n},");
        }
        out
    }
}

fn pooled(per_seed: &[SeedResult]) -> (f64, f64) {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().map(|r| r.mean).sum::<f64>() / n;
    let var = per_seed.iter().map(|r| (r.mean - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Decentralized evaluation: one entry per `(seed, actors)` pair.
pub fn evaluate_actors(
    runs: &[(u64, &ActorSet)],
    env: &Env,
    n_episodes: usize,
    references: Option<(f64, f64)>,
) -> Result<ScoreReport> {
    let per_seed = runs
        .iter()
        .map(|&(seed, actors)| {
            if actors.joint_dim() != env.joint_action_dim() || actors.state_dim() != env.state_dim() {
                return Err(Error::config(format!(
                    "actors map {} state dims to {} action dims but {} needs {} to {}",
                    actors.state_dim(),
                    actors.joint_dim(),
                    env.id(),
                    env.state_dim(),
                    env.joint_action_dim()
                )));
            }
            let mut policy = actors.clone();
            evaluate_one(&mut policy, env, n_episodes, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreReport::from_seeds(per_seed, references)
}

/// Evaluates any joint policy for one seed.
pub fn evaluate_one(policy: &mut dyn JointPolicy, env: &Env, n_episodes: usize, seed: u64) -> Result<SeedResult> {
    let (mean, std) = evaluate_policy(policy, env, n_episodes, crate::rng::derive_seed(seed, "final-eval"))?;
    Ok(SeedResult { seed, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_mode_bandit_dataset;
    use crate::envs::ConstantPolicy;
    use proptest::prelude::*;

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_score(5.0, 1.0, 5.0).unwrap(), 100.0);
        assert_eq!(normalized_score(1.0, 1.0, 5.0).unwrap(), 0.0);
        assert!((normalized_score(338.3, 159.8, 516.8).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(normalized_score(1.0, 2.0, 2.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn normalized_affine_invariant(s in -10.0..10.0f64, r in -10.0..0.0f64, e in 1.0..10.0f64, a in 0.1..10.0f64, b in -5.0..5.0f64) {
            let x = normalized_score(s, r, e).unwrap();
            let y = normalized_score(a * s + b, a * r + b, a * e + b).unwrap();
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(tv_factorized_analytic(1).unwrap(), 0.0);
        assert_eq!(tv_factorized_analytic(2).unwrap(), 0.5);
        assert_eq!(tv_factorized_analytic(10).unwrap(), 0.998046875);
        assert!(matches!(tv_factorized_analytic(0), Err(Error::Domain(_))));
    }

    #[test]
    fn enumeration_matches_analytic() {
        for n in 1..=16 {
            let e = tv_factorized_enumerate(n).unwrap();
            assert!((e - tv_factorized_analytic(n).unwrap()).abs() <= 1e-12, "n={n}");
        }
        assert!((tv_factorized_enumerate(2).unwrap() - 0.5).abs() <= 1e-15);
        assert!(matches!(tv_factorized_enumerate(21), Err(Error::Resource(_))));
    }

    #[test]
    fn empirical_two_agents() {
        let ds = gen_mode_bandit_dataset(2, 100_000, 0.0, 4).unwrap();
        let r = tv_factorized_empirical(&ds, 2).unwrap();
        assert!((r.empirical_tv - 0.5).abs() <= 0.01, "{}", r.empirical_tv);
        let total: f64 = r.modes.iter().map(|m| m.joint).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert!((r.modes.iter().map(|m| m.product).sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn empirical_single_agent_is_near_zero() {
        let ds = gen_mode_bandit_dataset(1, 100_000, 0.1, 5).unwrap();
        assert!(tv_factorized_empirical(&ds, 8).unwrap().empirical_tv <= 0.01);
    }

    #[test]
    fn empty_bins_reduce_resolution() {
        let ds = gen_mode_bandit_dataset(2, 1000, 0.0, 6).unwrap();
        let r = tv_factorized_empirical(&ds, 16).unwrap();
        assert_eq!(r.bins, 2);
        assert!(r.empirical_tv.is_finite());
    }

    #[test]
    fn report_pooled_recomputes() {
        let per_seed = vec![
            SeedResult { seed: 0, mean: 1.0, std: 0.0 },
            SeedResult { seed: 1, mean: -1.0, std: 0.0 },
        ];
        let r = ScoreReport::from_seeds(per_seed, Some((-1.0, 1.0))).unwrap();
        assert!(r.is_consistent());
        assert_eq!((r.pooled_mean, r.pooled_std, r.normalized), (0.0, 1.0, Some(50.0)));
    }

    #[test]
    fn constant_optimal_policy_scores_one() {
        let env = Env::bandit();
        let mut p = ConstantPolicy(vec![1.0, 1.0]);
        let r = evaluate_one(&mut p, &env, 5, 0).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-9 && r.std < 1e-12);
    }
}
