use lmc::inference::Dataset;
use lmc::synthdata::{generate, DataGenConfig};
use lmc::training::{fit, init_from_svd, Checkpoint, LmcModel, TrainConfig, Variant};
use lmc::verify::normal_matrix;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data(seed: u64) -> Dataset<f64> {
    let config = DataGenConfig {
        n_tasks: 5,
        n_points: 25,
        n_test: 10,
        mu_noise: 0.2,
        seed,
        ..Default::default()
    };
    generate::<f64>(&config).unwrap().train
}

fn short(max_iters: usize) -> TrainConfig {
    TrainConfig { max_iters, ..Default::default() }
}

#[test]
fn default_protocol() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_max, 1e-2);
    assert_eq!(c.lr_min, 1e-3);
    assert_eq!(c.plateau_delta, 1e-4);
    assert_eq!(c.max_iters, 5000);
    assert_eq!(c.learning_rate(0), 1e-2);
    assert!((c.learning_rate(5000) - 1e-3).abs() < 1e-15);
    assert!(c.learning_rate(2500) < 1e-2 && c.learning_rate(2500) > 1e-3);
}

#[test]
fn infinite_plateau_threshold_stops_after_patience() {
    let data = small_data(1);
    let mut model = LmcModel::initialize(Variant::DiagProj, &data, 2, 0).unwrap();
    let config = TrainConfig {
        plateau_delta: f64::INFINITY,
        patience: 17,
        ..Default::default()
    };
    let report = fit(&mut model, &data, &config).unwrap();
    assert_eq!(report.n_iters, 17);
    assert_eq!(report.loss_trace.len(), 17);
    assert!(report.stopped_early);
}

#[test]
fn iteration_budget_is_respected() {
    let data = small_data(2);
    let mut model = LmcModel::initialize(Variant::Bdn, &data, 2, 0).unwrap();
    let report = fit(&mut model, &data, &short(40)).unwrap();
    assert_eq!(report.n_iters, 40);
    assert!(!report.stopped_early);
}

#[test]
fn structure_is_preserved_and_loss_never_increases() {
    let data = small_data(3);
    let np = (data.n_points() * data.n_tasks()) as f64;
    for variant in Variant::ALL {
        let mut model = LmcModel::initialize(variant, &data, 2, 0).unwrap();
        let report = fit(&mut model, &data, &short(150)).unwrap();
        assert!(report.final_loss <= report.initial_loss, "{variant}");
        assert!(report.final_loss < report.initial_loss, "{variant} made no progress");
        let ll = model.log_likelihood(&data).unwrap();
        assert!((-ll / np - report.final_loss).abs() < 1e-10, "{variant}");
        let Some(params) = model.noise_parametrization().unwrap() else {
            assert_eq!(variant, Variant::Exact);
            continue;
        };
        let flags = variant.flags().unwrap();
        assert_eq!(params.flags(), flags);
        if flags.bdn || flags.oilmm {
            assert!(params.m().iter().all(|&v| v == 0.0), "{variant}: M moved");
        }
        let l = params.l();
        if flags.diag_b {
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    if i != j {
                        assert_eq!(l[(i, j)], 0.0, "{variant}: L off-diagonal moved");
                    }
                }
            }
        }
        if flags.oilmm {
            let r = params.mixing().r();
            assert!(r[(0, 1)] == 0.0 && r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
            let d = l.diagonal();
            assert!(d.iter().all(|&v| v == d[0]));
        }
    }
}

#[test]
fn fitting_is_deterministic() {
    let data = small_data(4);
    let run = || {
        let mut model = LmcModel::initialize(Variant::Proj, &data, 2, 9).unwrap();
        let report = fit(&mut model, &data, &short(60)).unwrap();
        (report.loss_trace, model.theta().clone())
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn svd_init_recovers_span_of_noiseless_low_rank_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h: DMatrix<f64> = normal_matrix(&mut rng, 6, 2);
    let u: DMatrix<f64> = normal_matrix(&mut rng, 2, 30);
    let x = DMatrix::from_fn(1, 30, |_, j| j as f64 / 29.0);
    let data = Dataset::new(x, &h * u).unwrap();
    let init = init_from_svd(&data, 2, 0).unwrap();
    assert!(!init.padded);
    // principal angles: singular values of Q_hᵀ Q_init are all ~1
    let qh = h.clone().qr().q();
    let qi = init.h0.clone().qr().q();
    let cosines = (qh.transpose() * qi).singular_values();
    assert!(cosines.iter().all(|&c| (1.0 - c).abs() < 1e-10), "{cosines}");
}

#[test]
fn svd_init_pads_degenerate_data() {
    let x = DMatrix::from_fn(1, 8, |_, j| j as f64);
    let data = Dataset::new(x, DMatrix::zeros(4, 8)).unwrap();
    let init = init_from_svd(&data, 2, 3).unwrap();
    assert!(init.padded);
    let gram = init.h0.transpose() * &init.h0;
    assert!((gram - DMatrix::identity(2, 2) * 1e-12).amax() < 1e-24);
    let qp = &init.q_plus;
    assert!((qp.transpose() * qp - DMatrix::identity(4, 4)).amax() < 1e-12);
}

#[test]
fn svd_init_is_best_rank_q_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: DMatrix<f64> = normal_matrix(&mut rng, 10, 40);
    let x = DMatrix::from_fn(1, 40, |_, j| j as f64);
    let data = Dataset::new(x, y.clone()).unwrap();
    let init = init_from_svd(&data, 2, 0).unwrap();
    // with H0 = U S, the coefficients V = Y' U S^-1 give H0 V' = U U' Y
    let s_inv = init.singular_values.map(|v| 1.0 / v);
    let v = y.transpose() * &init.h0 * DMatrix::from_diagonal(&s_inv.component_mul(&s_inv));
    let residual = (&y - &init.h0 * v.transpose()).norm_squared();
    let mut eig = SymmetricEigen::new(&y * y.transpose()).eigenvalues.as_slice().to_vec();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tail: f64 = eig[2..].iter().sum();
    assert!((residual - tail).abs() < 1e-9 * tail);
    assert!((init.singular_values[0].powi(2) - eig[0]).abs() < 1e-9 * eig[0]);
}

#[test]
fn lengthscale_is_recovered_from_noiseless_single_latent_data() {
    let config = DataGenConfig {
        n_tasks: 3,
        n_lat: 1,
        n_points: 60,
        mu_noise: 0.0,
        l_min: 0.3,
        l_max: 0.3,
        n_test: 10,
        seed: 2,
        ..Default::default()
    };
    let data = generate::<f64>(&config).unwrap();
    let mut model = LmcModel::initialize(Variant::DiagProj, &data.train, 1, 0).unwrap();
    fit(&mut model, &data.train, &TrainConfig::default()).unwrap();
    let ell = model.kernels().unwrap().get(0).lengthscale();
    assert!((ell - 0.3).abs() < 0.2 * 0.3, "recovered lengthscale {ell}");
}

#[test]
fn checkpoint_restores_the_model() {
    let data = small_data(5);
    let mut model = LmcModel::initialize(Variant::BdnDiag, &data, 2, 0).unwrap();
    let config = short(30);
    let report = fit(&mut model, &data, &config).unwrap();
    let dir = tempdir();
    let path = dir.join("model.json");
    Checkpoint::new(&model, &config, Some(&report)).unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.report.as_ref(), Some(&report));
    let restored: LmcModel<f64> = loaded.model().unwrap();
    assert_eq!(restored.theta(), model.theta());
    assert_eq!(restored.log_likelihood(&data).unwrap(), model.log_likelihood(&data).unwrap());

    let mut bad = loaded.clone();
    bad.version = 99;
    assert!(bad.model::<f64>().is_err());
    assert!(Checkpoint::from_json("{\"format\": 1}").is_err());
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("lmc-training-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn variant_tags() {
    for v in Variant::ALL {
        assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        assert_eq!(v.to_string(), v.tag());
    }
    assert_eq!(Variant::BdnDiag.tag(), "bdn_diag");
    assert!("var".parse::<Variant>().is_err());
}

#[test]
fn single_precision_pipeline_runs() {
    let config = DataGenConfig { n_tasks: 4, n_points: 20, n_test: 10, ..Default::default() };
    let data = generate::<f32>(&config).unwrap();
    let mut model: lmc::LmcModelF32 = LmcModel::initialize(Variant::DiagProj, &data.train, 2, 0).unwrap();
    let report = fit(&mut model, &data.train, &short(50)).unwrap();
    assert!(report.final_loss.is_finite() && report.final_loss < report.initial_loss);
    let pred = model.predict(&data.train, &data.test.x, Default::default()).unwrap();
    assert!(pred.mean.iter().all(|v| v.is_finite()));
}
