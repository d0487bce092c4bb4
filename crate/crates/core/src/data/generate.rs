use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Columns, Dataset};
use crate::envs::{rollout, BanditEnv, Env, SpreadLiteEnv, SpreadTier};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Isotropic Gaussian mixture over joint actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// Two equal-weight components at `(0.8, 0.8)` and `(-0.8, -0.8)`, std 0.3.
    pub fn bandit() -> Self {
        Self {
            means: vec![vec![0.8, 0.8], vec![-0.8, -0.8]],
            std: 0.3,
            weights: vec![0.5, 0.5],
        }
    }

    pub fn single(mean: Vec<f64>, std: f64) -> Self {
        Self {
            means: vec![mean],
            std,
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::config(format!("mixture std must be > 0, got {}", self.std)));
        }
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(Error::config("mixture needs one weight per component"));
        }
        if self.means.iter().any(|m| m.len() != self.dim()) {
            return Err(Error::config("mixture means have inconsistent dims"));
        }
        if self.weights.iter().any(|&w| w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("mixture weights must be >= 0 and sum to 1"));
        }
        Ok(())
    }

    /// Unclamped mixture log-density.
    pub fn log_density(&self, a: &[f64]) -> f64 {
        let s2 = self.std * self.std;
        let d = a.len() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln();
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = a.iter().zip(m).map(|(x, y)| (x - y) * (x - y)).sum();
                w.ln() + norm - d2 / (2.0 * s2)
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
    }

    /// Score of the mixture after VP noising, `grad log p_t(x)` where
    /// `x = alpha * a + sigma * eps`. At `alpha = 1, sigma = 0` this is the
    /// score of the unclamped mixture itself.
    pub fn noised_score(&self, x: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let var = alpha * alpha * self.std * self.std + sigma * sigma;
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - alpha * mi).powi(2)).sum();
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = ws.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (m, w) in self.means.iter().zip(&ws) {
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(m)) {
                *o += w / total * (alpha * mi - xi) / var;
            }
        }
        out
    }
}

/// `n` joint actions drawn from `spec`, clamped to the bandit box.
pub fn gen_bandit_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.dim() != 2 {
        return Err(Error::config(format!("bandit mixture must be 2-dimensional, got {}", spec.dim())));
    }
    if n == 0 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    let env = BanditEnv::default();
    let mut rng = rng_from(seed, "bandit-data");
    let mut actions = Array2::zeros((n, 2));
    let mut rewards = Vec::with_capacity(n);
    for mut row in actions.rows_mut() {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = spec.weights[0];
        while u >= acc && k + 1 < spec.weights.len() {
            k += 1;
            acc += spec.weights[k];
        }
        for (c, a) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a = (spec.means[k][c] + spec.std * z).clamp(-1.0, 1.0);
        }
        rewards.push(env.reward(row.as_slice().unwrap())?);
    }
    Dataset::new(
        Env::Bandit(env),
        "mixture",
        seed,
        Columns {
            states: Array2::zeros((n, 1)),
            actions,
            rewards,
            next_states: Array2::zeros((n, 1)),
            dones: vec![1; n],
        },
    )
}

/// Samples split between the all-ones and all-zeros corners with probability
/// one half each, jittered by `mode_std` and clamped to `[0, 1]`.
pub fn gen_mode_bandit_dataset(n_agents: usize, n: usize, mode_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::config("mode bandit dataset needs >= 2 samples"));
    }
    if n_agents == 0 {
        return Err(Error::config("mode bandit needs >= 1 agent"));
    }
    if !(mode_std >= 0.0) || !mode_std.is_finite() {
        return Err(Error::config(format!("mode std must be >= 0, got {mode_std}")));
    }
    let env = Env::mode_bandit(n_agents);
    let Env::ModeBandit(inner) = &env else { unreachable!() };
    let mut rng = rng_from(seed, "mode-data");
    let mut actions = Array2::zeros((n, n_agents));
    let mut rewards = Vec::with_capacity(n);
    for mut row in actions.rows_mut() {
        let corner = if rng.random::<bool>() { 1.0 } else { 0.0 };
        for a in row.iter_mut() {
            let jitter = if mode_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mode_std * z
            } else {
                0.0
            };
            *a = (corner + jitter).clamp(0.0, 1.0);
        }
        rewards.push(inner.reward(row.as_slice().unwrap())?);
    }
    Dataset::new(
        env,
        "modes",
        seed,
        Columns {
            states: Array2::zeros((n, 1)),
            actions,
            rewards,
            next_states: Array2::zeros((n, 1)),
            dones: vec![1; n],
        },
    )
}

/// Rolls out the scripted controller of `tier` for `n_episodes` episodes.
pub fn gen_spread_dataset(env: &SpreadLiteEnv, tier: SpreadTier, n_episodes: usize, seed: u64) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::config("need >= 1 episode"));
    }
    let full = Env::Spread(env.clone());
    let (sd, jd) = (full.state_dim(), full.joint_action_dim());
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut next_states = Vec::new();
    let mut dones = Vec::new();
    for k in 0..n_episodes {
        let mut policy = tier.policy(env);
        let traj = rollout(policy.as_mut(), &full, derive_seed(seed, &format!("episode{k}")))?;
        for t in traj.transitions {
            states.extend(t.state);
            actions.extend(t.action);
            rewards.push(t.reward);
            next_states.extend(t.next_state);
            dones.push(u8::from(t.done));
        }
    }
    let n = rewards.len();
    let shape_err = |e: ndarray::ShapeError| Error::shape(e.to_string());
    Dataset::new(
        full,
        tier.name(),
        seed,
        Columns {
            states: Array2::from_shape_vec((n, sd), states).map_err(shape_err)?,
            actions: Array2::from_shape_vec((n, jd), actions).map_err(shape_err)?,
            rewards,
            next_states: Array2::from_shape_vec((n, sd), next_states).map_err(shape_err)?,
            dones,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_mixture_rejected() {
        let spec = MixtureSpec::single(vec![0.0, 0.0], 0.0);
        assert!(matches!(gen_bandit_dataset(&spec, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn point_mass_mixture() {
        let spec = MixtureSpec::single(vec![0.0, 0.0], 1e-9);
        let ds = gen_bandit_dataset(&spec, 100, 1).unwrap();
        let r0 = BanditEnv::default().reward(&[0.0, 0.0]).unwrap();
        assert!(ds.actions().iter().all(|a| a.abs() < 1e-7));
        assert!(ds.rewards().iter().all(|r| (r - r0).abs() < 1e-9));
    }

    #[test]
    fn mode_bandit_exact_corners() {
        let n = 10_000;
        let ds = gen_mode_bandit_dataset(3, n, 0.0, 2).unwrap();
        let mut ones = 0;
        for row in ds.actions().rows() {
            let all_one = row.iter().all(|&a| a == 1.0);
            let all_zero = row.iter().all(|&a| a == 0.0);
            assert!(all_one || all_zero);
            ones += usize::from(all_one);
        }
        assert!((ones as f64 / n as f64 - 0.5).abs() <= 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn noised_score_of_single_gaussian() {
        let spec = MixtureSpec::single(vec![0.5, 0.5], 0.2);
        let s = spec.noised_score(&[0.1, 0.9], 1.0, 0.0);
        assert!((s[0] - 0.4 / 0.04).abs() < 1e-12);
        assert!((s[1] + 0.4 / 0.04).abs() < 1e-12);
    }

    #[test]
    fn log_density_gradient_matches_score() {
        let spec = MixtureSpec::bandit();
        let a = [0.3, -0.1];
        let h = 1e-6;
        let s = spec.noised_score(&a, 1.0, 0.0);
        for i in 0..2 {
            let mut p = a;
            let mut m = a;
            p[i] += h;
            m[i] -= h;
            let fd = (spec.log_density(&p) - spec.log_density(&m)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-5);
        }
    }
}
