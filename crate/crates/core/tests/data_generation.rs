use omsd_core::data::{episode_returns, gen_bandit_dataset, gen_mode_bandit_dataset, gen_spread_dataset, MixtureSpec};
use omsd_core::envs::{rollout, Env, SpreadExpert, SpreadLiteEnv, SpreadTier};
use omsd_core::rng::derive_seed;

/// Mean and variance of `clamp(N(m, s^2), -1, 1)` by Simpson integration.
fn censored_moments(m: f64, s: f64) -> (f64, f64) {
    let pdf = |x: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let lo_mass = simpson(&pdf, m - 12.0 * s, -1.0);
    let hi_mass = simpson(&pdf, 1.0, m + 12.0 * s);
    let mean = simpson(&|x| x * pdf(x), -1.0, 1.0) - lo_mass + hi_mass;
    let second = simpson(&|x| x * x * pdf(x), -1.0, 1.0) + lo_mass + hi_mass;
    (mean, second - mean * mean)
}

#[test]
fn bandit_halves_match_censored_gaussian_moments() {
    let spec = MixtureSpec::bandit();
    let ds = gen_bandit_dataset(&spec, 1_000_000, 3).unwrap();
    let acts = ds.actions();
    let mut halves: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
    for row in acts.rows() {
        let a = [row[0], row[1]];
        let d = |m: &[f64]| (a[0] - m[0]).powi(2) + (a[1] - m[1]).powi(2);
        let k = usize::from(d(&spec.means[1]) < d(&spec.means[0]));
        halves[k].push(a);
    }
    let frac = halves[0].len() as f64 / acts.nrows() as f64;
    assert!((frac - 0.5).abs() <= 0.005, "fraction nearer the first mean {frac}");
    for (k, half) in halves.iter().enumerate() {
        let n = half.len() as f64;
        let (m_exp, v_exp) = censored_moments(spec.means[k][0], spec.std);
        let mean = [0, 1].map(|c| half.iter().map(|a| a[c]).sum::<f64>() / n);
        let cov = |i: usize, j: usize| half.iter().map(|a| (a[i] - mean[i]) * (a[j] - mean[j])).sum::<f64>() / (n - 1.0);
        for c in 0..2 {
            assert!((mean[c] - m_exp).abs() <= 0.01, "half {k} coord {c}: mean {} vs {m_exp}", mean[c]);
            assert!((cov(c, c) - v_exp).abs() <= 0.01, "half {k} coord {c}: var {} vs {v_exp}", cov(c, c));
        }
        assert!(cov(0, 1).abs() <= 0.01, "half {k}: covariance {}", cov(0, 1));
    }
}

#[test]
fn censored_oracle_reduces_to_plain_moments_far_from_the_walls() {
    let (m, v) = censored_moments(0.0, 0.1);
    assert!(m.abs() < 1e-12);
    assert!((v - 0.01).abs() < 1e-9);
}

#[test]
fn generation_is_a_pure_function_of_spec_and_seed() {
    let spec = MixtureSpec::bandit();
    let a = gen_bandit_dataset(&spec, 5000, 9).unwrap().to_bytes().unwrap();
    let b = gen_bandit_dataset(&spec, 5000, 9).unwrap().to_bytes().unwrap();
    let c = gen_bandit_dataset(&spec, 5000, 10).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let env = SpreadLiteEnv::default();
    let s1 = gen_spread_dataset(&env, SpreadTier::Medium, 20, 4).unwrap().to_bytes().unwrap();
    let s2 = gen_spread_dataset(&env, SpreadTier::Medium, 20, 4).unwrap().to_bytes().unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn stored_return_metadata_matches_recomputation() {
    let env = SpreadLiteEnv::default();
    for tier in [SpreadTier::Expert, SpreadTier::Medium, SpreadTier::Random] {
        let ds = gen_spread_dataset(&env, tier, 40, 1).unwrap();
        let r = ds.recomputed_returns();
        assert_eq!(r.mean, ds.meta().return_mean, "{tier:?}");
        assert_eq!(r.max, ds.meta().return_max, "{tier:?}");
        assert_eq!(r.n_episodes, 40);
    }
}

#[test]
fn mode_bandit_marginals_are_balanced() {
    let ds = gen_mode_bandit_dataset(4, 100_000, 0.1, 2).unwrap();
    let means = ds.actions().mean_axis(ndarray::Axis(0)).unwrap();
    for m in means {
        assert!((m - 0.5).abs() <= 0.01, "marginal mean {m}");
    }
}

#[test]
fn random_tier_actions_are_centred() {
    let ds = gen_spread_dataset(&SpreadLiteEnv::default(), SpreadTier::Random, 4000, 6).unwrap();
    assert_eq!(ds.len(), 100_000);
    for m in ds.actions().mean_axis(ndarray::Axis(0)).unwrap() {
        assert!(m.abs() <= 0.02, "action mean {m}");
    }
}

#[test]
fn tiers_are_ordered_by_return() {
    let env = SpreadLiteEnv::default();
    let stats = |tier| {
        let ds = gen_spread_dataset(&env, tier, 400, 8).unwrap();
        let r = episode_returns(ds.rewards(), ds.dones());
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (e, se) = stats(SpreadTier::Expert);
    let (m, sm) = stats(SpreadTier::Medium);
    let (r, sr) = stats(SpreadTier::Random);
    assert!(e - m > 3.0 * (se + sm).sqrt(), "expert {e} medium {m}");
    assert!(m - r > 3.0 * (sm + sr).sqrt(), "medium {m} random {r}");
}

#[test]
fn expert_rollouts_regenerate_the_stored_returns() {
    let env = SpreadLiteEnv::default();
    let ds = gen_spread_dataset(&env, SpreadTier::Expert, 100, 12).unwrap();
    let full = Env::Spread(env.clone());
    let mut total = 0.0;
    for k in 0..100 {
        let mut expert = SpreadExpert::new(env.clone());
        total += rollout(&mut expert, &full, derive_seed(12, &format!("episode{k}"))).unwrap().episode_return();
    }
    let mean = total / 100.0;
    let stored = ds.meta().return_mean;
    assert!((mean - stored).abs() <= 0.05 * stored.abs(), "{mean} vs {stored}");
}

fn kmeans_nd(points: &[Vec<f64>], k: usize, iters: usize) -> Vec<usize> {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centres = vec![points[0].clone()];
    while centres.len() < k {
        let far = points
            .iter()
            .max_by(|a, b| {
                let da = centres.iter().map(|c| d2(a, c)).fold(f64::INFINITY, f64::min);
                let db = centres.iter().map(|c| d2(b, c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centres.push(far.clone());
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..iters {
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            *l = (0..k).min_by(|&i, &j| d2(p, &centres[i]).total_cmp(&d2(p, &centres[j]))).unwrap();
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (j, v) in centre.iter_mut().enumerate() {
                    *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    labels
}

#[test]
fn expert_first_steps_hold_several_assignment_clusters() {
    let h = 3f64.sqrt() / 2.0;
    let env = SpreadLiteEnv {
        fixed_start: Some(vec![0.0, 0.1, -0.1 * h, -0.05, 0.1 * h, -0.05, 0.0, 0.8, -0.8 * h, -0.4, 0.8 * h, -0.4]),
        ..SpreadLiteEnv::default()
    };
    let ds = gen_spread_dataset(&env, SpreadTier::Expert, 300, 21).unwrap();
    let first: Vec<Vec<f64>> = ds.actions().rows().into_iter().step_by(env.episode_length).map(|r| r.to_vec()).collect();
    assert_eq!(first.len(), 300);
    let labels = kmeans_nd(&first, 6, 20);
    let big = (0..6)
        .filter(|&c| labels.iter().filter(|&&l| l == c).count() as f64 >= 0.1 * first.len() as f64)
        .count();
    assert!(big >= 2, "only {big} clusters hold 10% of the mass");
}

#[test]
fn generated_datasets_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.omsd");
    let env = SpreadLiteEnv::default();
    for ds in [
        gen_bandit_dataset(&MixtureSpec::bandit(), 2000, 3).unwrap(),
        gen_spread_dataset(&env, SpreadTier::Medium, 30, 2).unwrap(),
    ] {
        ds.save(&path).unwrap();
        let back = omsd_core::data::Dataset::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
    }
}
