mod common;

use common::{cosine, quadrant_masses, score_grid_errors};
use ndarray::{concatenate, Array2, Axis};
use omsd_core::data::{gen_bandit_dataset, MixtureSpec};
use omsd_core::diffusion::{train_score_model, Conditioning, DiffusionConfig, ScoreModel};
use omsd_core::rng::rng_seeded;

fn small(steps: usize) -> DiffusionConfig {
    DiffusionConfig {
        hidden: vec![64, 64],
        steps,
        batch_size: 256,
        ..DiffusionConfig::default()
    }
}

#[test]
fn gaussian_model_tracks_the_noised_score_across_times() {
    let spec = MixtureSpec::single(vec![0.5, 0.5], 0.2);
    let ds = gen_bandit_dataset(&spec, 200_000, 1).unwrap();
    let model = train_score_model(&ds, Conditioning::Joint, vec![0, 1], vec![], &small(15_000), 2).unwrap();
    for t in [0.02, 0.1, 0.3] {
        let (cos, rel) = score_grid_errors(&model, &spec, 0.0, 1.0, t);
        assert!(cos >= 0.95 && rel <= 0.15, "t = {t}: cosine {cos}, relative L2 {rel}");
    }
}

fn bandit_pair(ds: &omsd_core::data::Dataset, steps: usize) -> (ScoreModel, ScoreModel) {
    let first = train_score_model(ds, Conditioning::Sequential { agent: 0 }, vec![0], vec![], &small(steps), 3).unwrap();
    let second = train_score_model(ds, Conditioning::Sequential { agent: 1 }, vec![1], vec![0], &small(steps), 4).unwrap();
    (first, second)
}

#[test]
fn sequential_chain_reproduces_the_bandit_corners() {
    let spec = MixtureSpec::bandit();
    let ds = gen_bandit_dataset(&spec, 200_000, 5).unwrap();
    let (first, second) = bandit_pair(&ds, 10_000);
    let n = 4000;
    let states = Array2::zeros((n, 1));
    let mut rng = rng_seeded(6);
    let a1 = first.ancestral_sample(states.view(), Array2::zeros((n, 0)).view(), 20, &mut rng).unwrap();
    let a2 = second.ancestral_sample(states.view(), a1.view(), 20, &mut rng).unwrap();
    let got = quadrant_masses(concatenate(Axis(1), &[a1.view(), a2.view()]).unwrap().view());
    let want = quadrant_masses(ds.actions().view());
    for k in 0..4 {
        assert!((got[k] - want[k]).abs() <= 0.05, "quadrant {k}: {} vs {}", got[k], want[k]);
    }

    let prefix = Array2::from_elem((n, 1), 0.8);
    let cond = second.ancestral_sample(states.view(), prefix.view(), 20, &mut rng).unwrap();
    let below = cond.iter().filter(|&&v| v < 0.0).count() as f64 / n as f64;
    assert!(below < 0.05, "mass below zero given +0.8: {below}");
}

#[test]
fn independent_data_makes_conditional_score_match_marginal() {
    let c = 0.8;
    let spec = MixtureSpec {
        means: vec![vec![c, c], vec![c, -c], vec![-c, c], vec![-c, -c]],
        std: 0.3,
        weights: vec![0.25; 4],
    };
    let ds = gen_bandit_dataset(&spec, 200_000, 7).unwrap();
    let cfg = small(10_000);
    let cond = train_score_model(&ds, Conditioning::Sequential { agent: 1 }, vec![1], vec![0], &cfg, 8).unwrap();
    let marg = train_score_model(&ds, Conditioning::Independent { agent: 1 }, vec![1], vec![], &cfg, 9).unwrap();
    let grid: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let n = grid.len() * grid.len();
    let prefix = Array2::from_shape_fn((n, 1), |(r, _)| grid[r / grid.len()]);
    let own = Array2::from_shape_fn((n, 1), |(r, _)| grid[r % grid.len()]);
    let states = Array2::zeros((n, 1));
    let sc = cond.score_at(states.view(), prefix.view(), own.view(), 0.02).unwrap();
    let sm = marg.score_at(states.view(), Array2::zeros((n, 0)).view(), own.view(), 0.02).unwrap();
    let cos = cosine(sc.as_slice().unwrap(), sm.as_slice().unwrap());
    assert!(cos >= 0.9, "conditional vs marginal cosine {cos}");
}
