#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use omsd_core::data::MixtureSpec;
use omsd_core::diffusion::{ScoreModel, VpSchedule};
use omsd_core::envs::BanditEnv;
use omsd_core::error::Result;
use omsd_core::nn::{Mlp, MlpSpec, OutputActivation};
use omsd_core::policy::{BehaviorScore, QGradient};

/// Worst per-coordinate relative error between analytic and central-difference
/// gradients of `L = u . f(x)`, over parameters and inputs. Returns `None` when
/// a ReLU kink sits inside the difference stencil.
pub fn fd_case(spec: &MlpSpec, seed: u64, rng: &mut impl rand::Rng) -> Option<f64> {
    let mut net = Mlp::new(spec.clone(), seed).unwrap();
    let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let u: Vec<f64> = (0..spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (gp, gx) = net.grad_single(&x, &u).unwrap();
    let h = 1e-5;
    let loss = |net: &Mlp, x: &[f64]| -> f64 { net.forward(x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum() };
    let rel = |g: f64, plus: f64, mid: f64, minus: f64| -> Option<f64> {
        let fwd = (plus - mid) / h;
        let bwd = (mid - minus) / h;
        if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs()) {
            return None;
        }
        let fd = (plus - minus) / (2.0 * h);
        Some((g - fd).abs() / g.abs().max(fd.abs()).max(1e-5))
    };
    let base = loss(&net, &x);
    let mut worst = 0.0f64;
    for i in 0..gp.len() {
        let p0 = net.params()[i];
        net.params_mut()[i] = p0 + h;
        let plus = loss(&net, &x);
        net.params_mut()[i] = p0 - h;
        let minus = loss(&net, &x);
        net.params_mut()[i] = p0;
        worst = worst.max(rel(gp[i], plus, base, minus)?);
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        worst = worst.max(rel(gx[i], loss(&net, &xp), base, loss(&net, &xm))?);
    }
    Some(worst)
}

pub fn fd_shapes() -> Vec<MlpSpec> {
    vec![
        MlpSpec::new(3, &[], 2),
        MlpSpec::new(3, &[8], 2),
        MlpSpec::new(5, &[16, 16], 3).with_output(OutputActivation::Tanh),
        MlpSpec::new(4, &[12, 10, 6], 1),
        MlpSpec::new(2, &[8], 4).with_output(OutputActivation::Relu),
    ]
}

/// Analytic bandit reward gradient over the joint action.
pub struct BanditQ(pub BanditEnv);

impl QGradient for BanditQ {
    fn q_grad(&self, cols: &[usize], _s: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let w2 = self.0.kernel_width * self.0.kernel_width;
        Ok(Array2::from_shape_fn((joint.nrows(), cols.len()), |(r, j)| {
            let a = [joint[[r, 0]], joint[[r, 1]]];
            let term = |c: &[f64; 2], sign: f64| {
                let d2 = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
                -sign * (-d2 / (2.0 * w2)).exp() * (a[cols[j]] - c[cols[j]]) / w2
            };
            BanditEnv::MODES.iter().map(|c| term(c, 1.0)).sum::<f64>()
                + BanditEnv::ANTI_MODES.iter().map(|c| term(c, -1.0)).sum::<f64>()
        }))
    }
}

/// Exact VP-noised score of a Gaussian mixture, marginalized onto the
/// requested columns. Ignores prefixes, so it is a marginal score.
pub struct MixtureScore(pub MixtureSpec);

impl BehaviorScore for MixtureScore {
    fn score(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let marginal = MixtureSpec {
            means: self.0.means.iter().map(|m| cols.iter().map(|&c| m[c]).collect()).collect(),
            std: self.0.std,
            weights: self.0.weights.clone(),
        };
        let (alpha, sigma) = VpSchedule::default().alpha_sigma(t)?;
        let mut out = Array2::zeros((states.nrows(), cols.len()));
        for r in 0..joint.nrows() {
            let a: Vec<f64> = cols.iter().map(|&c| joint[[r, c]] * alpha).collect();
            for (j, v) in marginal.noised_score(&a, alpha, sigma).into_iter().enumerate() {
                out[[r, j]] = v;
            }
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity and relative L2 error of a model's score against the
/// analytic noised score of `spec`, on a 21x21 grid over `[lo, hi]^2`.
pub fn score_grid_errors(model: &ScoreModel, spec: &MixtureSpec, lo: f64, hi: f64, t: f64) -> (f64, f64) {
    let pts: Vec<f64> = (0..21)
        .flat_map(|i| (0..21).flat_map(move |j| [lo + (hi - lo) * i as f64 / 20.0, lo + (hi - lo) * j as f64 / 20.0]))
        .collect();
    let a = Array2::from_shape_vec((441, 2), pts).unwrap();
    let states = Array2::zeros((441, 1));
    let prefix = Array2::zeros((441, 0));
    let got = model.score_at(states.view(), prefix.view(), a.view(), t).unwrap();
    let (alpha, sigma) = VpSchedule::default().alpha_sigma(t).unwrap();
    let want: Vec<f64> = a
        .rows()
        .into_iter()
        .flat_map(|r| spec.noised_score(&[alpha * r[0], alpha * r[1]], alpha, sigma))
        .collect();
    let got = got.into_raw_vec_and_offset().0;
    let diff: f64 = got.iter().zip(&want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    (cosine(&got, &want), diff / norm)
}

/// Quadrant masses `[++, +-, -+, --]` of 2-d samples.
pub fn quadrant_masses(a: ArrayView2<'_, f64>) -> [f64; 4] {
    let mut m = [0.0; 4];
    for r in a.rows() {
        let k = 2 * usize::from(r[0] < 0.0) + usize::from(r[1] < 0.0);
        m[k] += 1.0;
    }
    m.map(|x| x / a.nrows() as f64)
}
