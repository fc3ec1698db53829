mod common;

use common::*;
use covfilt::autodiff::Tape;
use covfilt::epistemic::{self, EpistemicEstimate};
use covfilt::linalg;
use covfilt::losses;
use covfilt::model::{self, GaussianPrediction, ModelConfig, ModelParams};
use covfilt::rng::Rng;
use covfilt::simulator::{self, TrackConfig};
use covfilt::training::{self, MleConfig, MleMode};
use covfilt::Matrix;
use proptest::prelude::*;

#[test]
fn random_logits_always_yield_pd_after_jitter() {
    let mut rng = Rng::new(5);
    for k in [2, 3, 6] {
        let m = linalg::offdiag_len(k);
        let mut loaded = 0;
        for _ in 0..10_000 {
            let s: Vec<f64> = (0..k).map(|_| rng.normal() * 3.0).collect();
            let r: Vec<f64> = (0..m).map(|_| rng.normal() * 3.0).collect();
            let sigma = model::assemble_covariance_plain(&s, &r, 0.99).unwrap();
            let (stable, lambda) = linalg::stabilize(&sigma).unwrap();
            assert!(linalg::cholesky(&stable).is_ok());
            loaded += usize::from(lambda > 0.0);
        }
        if k == 2 {
            assert_eq!(loaded, 0, "2 × 2 covariances are PD without a load");
        }
    }
}

#[test]
fn nll_minimizer_is_the_sample_covariance() {
    let mut rng = Rng::new(9);
    let truth = Matrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 1.0]);
    let l = linalg::cholesky(&truth).unwrap();
    let n = 2000;
    let x = Matrix::from_fn(n, 1, |_, _| rng.uniform());
    let noise = Matrix::from_fn(n, 2, |_, _| rng.normal());
    let y = noise * l.transpose();
    let cfg = ModelConfig { hidden: vec![8], dropout_rate: 0.0, ..ModelConfig::new(1, 2) };
    let mut p = ModelParams::new(cfg, 1).unwrap();
    p.fit_normalization(&x, &y);
    let tcfg = MleConfig { epochs: 60, batch_size: 100, mode: MleMode::Joint, ..MleConfig::default() };
    training::train_mle(&mut p, &x, &y, &tcfg).unwrap();
    let preds = p.predict(&x).unwrap();
    let mut sample = Matrix::zeros(2, 2);
    let mut predicted = Matrix::zeros(2, 2);
    for (i, q) in preds.iter().enumerate() {
        let r = Matrix::from_fn(2, 1, |j, _| y[(i, j)] - q.mean[j]);
        sample += &r * r.transpose();
        predicted += &q.covariance;
    }
    sample /= n as f64;
    predicted /= n as f64;
    let rel = (&predicted - &sample).norm() / sample.norm();
    assert!(rel < 0.1, "head {predicted} vs sample {sample}: {rel}");
}

#[test]
fn loss_falls_over_first_epochs_and_is_reproducible() {
    let cfg = TrackConfig { seed: 4, ..TrackConfig::default() };
    let data = simulator::generate_tracks(&cfg, 60).unwrap();
    let (x, y) = data.regression_pairs();
    let run = || {
        let mcfg = ModelConfig { hidden: vec![16, 16], ..ModelConfig::new(simulator::INPUT_DIM, 3) };
        let mut p = ModelParams::new(mcfg, 2).unwrap();
        p.fit_normalization(&x, &y);
        let tcfg = MleConfig { epochs: 10, seed: 8, ..MleConfig::default() };
        training::train_mle(&mut p, &x, &y, &tcfg).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.grad_norms, b.grad_norms);
    assert!(a.loss_curve[9] <= a.loss_curve[0], "{:?}", a.loss_curve);
}

/// Median relative Frobenius error of `draws` independent `n`-sample
/// estimates against one reference.
fn median_epistemic_error(p: &ModelParams, x: &Matrix, reference: &Matrix, n: usize, draws: u64) -> f64 {
    let mut errs: Vec<f64> = (0..draws)
        .map(|s| {
            let e = &epistemic::predict_with_epistemic(p, x, n, 100 + s).unwrap()[0].epistemic;
            (e - reference).norm() / reference.norm()
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    errs[errs.len() / 2]
}

fn dropout_model(outputs: usize) -> ModelParams {
    let cfg = ModelConfig { hidden: vec![64, 64], dropout_rate: 0.2, ..ModelConfig::new(2, outputs) };
    let mut p = ModelParams::new(cfg, 3).unwrap();
    let (r, c) = p.mean.output.weight.shape();
    p.mean.output.weight = random_matrix(&mut Rng::new(4), r, c);
    p
}

#[test]
fn epistemic_term_converges_with_samples() {
    let x = Matrix::from_row_slice(1, 2, &[0.4, -0.7]);
    // Even for Gaussian outputs a k × k sample covariance from N draws has
    // relative Frobenius error near √((k+1)/N), so 5% at 10³ samples is a
    // bound on the typical draw of a scalar output.
    let p = dropout_model(1);
    let large = epistemic::predict_with_epistemic(&p, &x, 100_000, 2).unwrap()[0].epistemic.clone();
    assert!(large.norm() > 0.0);
    let e3 = median_epistemic_error(&p, &x, &large, 1_000, 21);
    assert!(e3 < 0.05, "median relative difference at 10³ samples: {e3}");

    let p = dropout_model(2);
    let large = epistemic::predict_with_epistemic(&p, &x, 100_000, 2).unwrap()[0].epistemic.clone();
    let e3 = median_epistemic_error(&p, &x, &large, 1_000, 21);
    let e4 = median_epistemic_error(&p, &x, &large, 10_000, 9);
    let ratio = e3 / e4;
    assert!((1.5..6.0).contains(&ratio), "error ratio 10³/10⁴ samples {ratio}, expected about √10");
}

fn sample_set(seed: u64, n: usize, k: usize) -> Vec<GaussianPrediction> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| GaussianPrediction {
            mean: (0..k).map(|_| rng.normal() * 5.0).collect(),
            covariance: random_spd(&mut rng, k, 0.1),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn two_by_two_covariance_is_pd(s0 in -20.0..20.0f64, s1 in -20.0..20.0f64, r in -50.0..50.0f64) {
        let sigma = model::assemble_covariance_plain(&[s0, s1], &[r], 0.99).unwrap();
        prop_assert!(linalg::cholesky(&sigma).is_ok());
        prop_assert!(linalg::asymmetry(&sigma) < 1e-15);
    }

    #[test]
    fn variance_is_monotone_in_s(seed in any::<u64>(), i in 0usize..3, delta in 0.01..3.0f64) {
        let mut rng = Rng::new(seed);
        let s: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let r: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let a = model::assemble_covariance_plain(&s, &r, 0.99).unwrap();
        let mut s2 = s.clone();
        s2[i] += delta;
        let b = model::assemble_covariance_plain(&s2, &r, 0.99).unwrap();
        prop_assert!(b[(i, i)] > a[(i, i)]);
        for j in (0..3).filter(|&j| j != i) {
            prop_assert_eq!(a[(j, j)], b[(j, j)]);
        }
    }

    #[test]
    fn forward_without_dropout_is_pure(seed in any::<u64>()) {
        let cfg = ModelConfig { hidden: vec![6, 6], ..ModelConfig::new(3, 3) };
        let p = ModelParams::new(cfg, seed).unwrap();
        let x = random_matrix(&mut Rng::new(seed ^ 1), 4, 3);
        prop_assert_eq!(p.predict(&x).unwrap(), p.predict(&x).unwrap());
        prop_assert_eq!(p.clone().predict(&x).unwrap(), p.predict(&x).unwrap());
    }

    #[test]
    fn nll_invariant_under_coordinate_permutation(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (mean, sigma, y) = nll_instance(&mut rng);
        let k = sigma.nrows();
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let pm = Matrix::from_fn(1, k, |_, j| mean[(0, perm[j])]);
        let py = Matrix::from_fn(1, k, |_, j| y[(0, perm[j])]);
        let ps = Matrix::from_fn(k, k, |i, j| sigma[(perm[i], perm[j])]);
        let nll = |m: &Matrix, s: &Matrix, y: &Matrix| {
            let mut t = Tape::new();
            let (m, s) = (t.constant(m.clone()).unwrap(), t.constant(s.clone()).unwrap());
            losses::gaussian_nll(&mut t, m, s, y).unwrap().report.total
        };
        let (a, b) = (nll(&mean, &sigma, &y), nll(&pm, &ps, &py));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn jitter_changes_loss_continuously_and_is_reported(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 3;
        let v = random_matrix(&mut rng, k, 1);
        // Rank-one plus a tiny negative eigenvalue: needs a load.
        let sigma = &v * v.transpose() - Matrix::identity(k, k) * 1e-12 * v.norm_squared();
        let y = random_matrix(&mut rng, 1, k);
        let mut t = Tape::new();
        let m = t.constant(Matrix::zeros(1, k)).unwrap();
        let s = t.constant(sigma.clone()).unwrap();
        let loss = losses::gaussian_nll(&mut t, m, s, &y).unwrap();
        prop_assert!(loss.report.jitter_applied > 0.0);
        prop_assert_eq!(loss.report.jittered, 1);
        prop_assert!(loss.report.total.is_finite());
    }

    #[test]
    fn cholesky_reconstructs_spd(seed in any::<u64>(), k in 1usize..7) {
        let a = random_spd(&mut Rng::new(seed), k, 0.5);
        let l = linalg::cholesky(&a).unwrap();
        prop_assert!((&l * l.transpose() - &a).norm() / a.norm() < 1e-10);
    }

    #[test]
    fn epistemic_is_permutation_invariant(seed in any::<u64>(), n in 1usize..12, k in 1usize..4) {
        let samples = sample_set(seed, n, k);
        let mut shuffled = samples.clone();
        Rng::new(seed ^ 7).shuffle(&mut shuffled);
        let a: EpistemicEstimate = epistemic::combine(&samples).unwrap();
        prop_assert_eq!(&a, &epistemic::combine(&shuffled).unwrap());
        let d = a.diagonal();
        prop_assert_eq!(d.predictive.diagonal(), a.predictive.diagonal());
        prop_assert_eq!(&d.predictive, &Matrix::from_diagonal(&a.predictive.diagonal()));
    }

    #[test]
    fn generated_tracks_are_exact_and_valid(seed in any::<u64>()) {
        let cfg = TrackConfig { seed, duration: 12, ..TrackConfig::default() };
        let a = simulator::generate_tracks(&cfg, 3).unwrap();
        prop_assert_eq!(&a, &simulator::generate_tracks(&cfg, 3).unwrap());
        for track in &a.tracks {
            for w in track.steps.windows(2) {
                for i in 0..3 {
                    let predicted = w[0].z[i] + cfg.dt * w[0].z[3 + i];
                    prop_assert!((w[1].z[i] - predicted).abs() < 1e-9);
                    prop_assert_eq!(w[1].z[3 + i], w[0].z[3 + i]);
                }
            }
            for s in &track.steps {
                prop_assert!(linalg::cholesky(&s.sigma_true).is_ok());
            }
        }
    }
}
