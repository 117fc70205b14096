use proptest::prelude::*;

use diffpo_core::data::{generate, split, Dataset, DgpKind, DgpSpec};
use diffpo_core::denoiser::DenoiserConfig;
use diffpo_core::diffusion::ScheduleConfig;
use diffpo_core::evaluation::*;
use diffpo_core::numcore::{seeded_rng, RngExt};
use diffpo_core::training::{train, TrainConfig};

fn samples(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, len)
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric((a, b, c) in (1usize..40).prop_flat_map(|n| (samples(n), samples(n), samples(n)))) {
        let ab = wasserstein_1d(&a, &b, 1.0).unwrap();
        let ba = wasserstein_1d(&b, &a, 1.0).unwrap();
        let ac = wasserstein_1d(&a, &c, 1.0).unwrap();
        let cb = wasserstein_1d(&c, &b, 1.0).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab <= ac + cb + 1e-9);
        prop_assert_eq!(wasserstein_1d(&a, &a, 1.0).unwrap(), 0.0);
        let mut rev = a.clone();
        rev.reverse();
        prop_assert_eq!(wasserstein_1d(&a, &rev, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_is_translation_invariant((a, b) in (1usize..40).prop_flat_map(|n| (samples(n), samples(n))), shift in -50.0..50.0f64) {
        let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let base = wasserstein_1d(&a, &b, 1.0).unwrap();
        prop_assert!((wasserstein_1d(&sa, &sb, 1.0).unwrap() - base).abs() < 1e-9);
        // Shifting one side by c moves the distance by at most |c|.
        prop_assert!((wasserstein_1d(&sa, &b, 1.0).unwrap() - base).abs() <= shift.abs() + 1e-9);
    }

    #[test]
    fn intervals_widen_as_alpha_shrinks(v in samples(50), a1 in 0.01..0.99f64, a2 in 0.01..0.99f64) {
        let (small, large) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let (lo_s, hi_s) = predictive_interval(&v, small).unwrap();
        let (lo_l, hi_l) = predictive_interval(&v, large).unwrap();
        prop_assert!(lo_s <= lo_l && hi_l <= hi_s);
    }

    #[test]
    fn pehe_vanishes_only_on_equality(tau in samples(20), k in 0usize..20, delta in 0.001..10.0f64) {
        prop_assert_eq!(pehe(&tau, &tau).unwrap(), 0.0);
        let mut off = tau.clone();
        off[k] += delta;
        prop_assert!(pehe(&off, &tau).unwrap() > 0.0);
    }
}

#[test]
fn shifted_gaussians_are_half_apart() {
    let mut rng = seeded_rng(1);
    let a: Vec<f64> = rng.normals(10_000);
    let b: Vec<f64> = rng.normals(10_000).into_iter().map(|v| v + 0.5).collect();
    let w = wasserstein_1d(&a, &b, 1.0).unwrap();
    assert!((w - 0.5).abs() < 0.03, "{w}");
}

fn constant_data(n: usize) -> Dataset {
    let mut spec = DgpSpec::new(DgpKind::ConstantOracle, n, 2);
    spec.d = Some(3);
    generate(&spec).unwrap()
}

fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed);
    let d = 3;
    let x: Vec<f64> = rng.normals(n * d);
    let a: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = (0..n).map(|i| 2.0 * x[i * d] + a[i]).collect();
    Dataset::new(x, d, a, y).unwrap()
}

fn linear_truth(data: &Dataset, arm: f64) -> Vec<f64> {
    (0..data.n()).map(|i| 2.0 * data.x_row(i)[0] + arm).collect()
}

#[test]
fn learners_recover_constant_outcome() {
    let data = constant_data(1000);
    let fitted = fit_st_learners(&data, &RegressorConfig::default(), 3).unwrap();
    for learner in [&fitted.s_learner, fitted.t_learner.as_ref().unwrap()] {
        let [p0, p1] = learner.predict(&data).unwrap();
        for v in p0.iter().chain(&p1) {
            assert!((v - 3.0).abs() < 0.05, "{v}");
        }
    }
}

#[test]
fn learners_fit_linear_outcome() {
    let (train_set, test_set) = split(&linear_data(5000, 4), 0.8, 5).unwrap();
    let fitted = fit_st_learners(&train_set, &RegressorConfig::default(), 6).unwrap();
    let t = fitted.t_learner.as_ref().unwrap().predict(&test_set).unwrap();
    let s = fitted.s_learner.predict(&test_set).unwrap();
    for arm in 0..2 {
        let truth = linear_truth(&test_set, arm as f64);
        let t_rmse = po_rmse(&t[arm], &truth).unwrap();
        let s_rmse = po_rmse(&s[arm], &truth).unwrap();
        assert!(t_rmse < 0.1, "arm {arm}: T {t_rmse}");
        assert!((t_rmse - s_rmse).abs() < 0.1, "arm {arm}: T {t_rmse} S {s_rmse}");
        assert!(po_rmse(&t[arm], &s[arm]).unwrap() < 0.1);
    }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        seed,
        schedule: ScheduleConfig {
            steps: 50,
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            hidden: 64,
            embedding_dim: 64,
            n_blocks: 2,
        },
        ..Default::default()
    }
}

#[test]
fn trained_cate_beats_constant_predictor() {
    let mut spec = DgpSpec::new(DgpKind::SyntheticD1, 2500, 7);
    spec.selection_strength = 0.0;
    let (train_set, test_set) = split(&generate(&spec).unwrap(), 0.8, 8).unwrap();
    let model = train(&train_set, &small_train(9)).unwrap();
    let draws = PosteriorSamples::draw(&model, &test_set, 50, 10).unwrap();
    let tau = &test_set.oracle().unwrap().true_cate;
    let (_, model_pehe) = cate_and_pehe(&draws, tau).unwrap();
    let mean_tau = tau.iter().sum::<f64>() / tau.len() as f64;
    let constant_pehe = pehe(&vec![mean_tau; tau.len()], tau).unwrap();
    assert!(
        model_pehe < constant_pehe,
        "model {model_pehe} vs constant {constant_pehe}"
    );
}

#[test]
fn orthogonality_table_has_one_row_per_cell() {
    let spec = DgpSpec::new(DgpKind::SyntheticD1, 0, 11);
    let cfg = OrthogonalityConfig {
        sizes: vec![100, 200],
        seeds: vec![0, 1, 2],
        test_units: 50,
        m: 10,
    };
    let mut train_cfg = small_train(12);
    train_cfg.epochs = 3;
    train_cfg.denoiser = DenoiserConfig {
        hidden: 16,
        embedding_dim: 16,
        n_blocks: 1,
    };
    train_cfg.propensity.max_epochs = 5;
    let mut streamed = 0;
    let rows = run_orthogonality_experiment(&spec, &cfg, &train_cfg, |_| {
        streamed += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(streamed, 6);
    assert!(rows.iter().all(|r| r.pehe.is_finite() && r.pehe >= 0.0));
    let header = ORTHOGONALITY_COLUMNS.join(",");
    assert_eq!(header, "n,seed,pehe");
    for r in &rows {
        let line = r.csv_line();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0].parse::<usize>().unwrap(), r.n);
        assert_eq!(fields[1].parse::<u64>().unwrap(), r.seed);
        assert_eq!(fields[2].parse::<f64>().unwrap(), r.pehe);
    }
}
