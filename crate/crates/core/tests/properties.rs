use disagg_core::baselines::{bayes_glm_map, fit_baseline, fit_poisson_glm, laplace_posterior, BaselineKind};
use disagg_core::grid::{assemble, empirical_log_intensity, load_grid, write_pixels, write_wards};
use disagg_core::kernel::{build_bundle, build_sigma00};
use disagg_core::predict::pixel_posterior;
use disagg_core::rng;
use disagg_core::sampler::{run_chain, WeightedDesign};
use disagg_core::simeval::metrics::information_criteria;
use disagg_core::simeval::simulate::{draw_counts, surface, synthetic_grid, true_log_intensity};
use disagg_core::simeval::variogram::{empirical_variogram, fit_exponential_variogram};
use disagg_core::simeval::{metrics, MetricReport, SimKind, SimSetting, Tiling};
use disagg_core::{
    ChainConfig, CovariateTransform, Hyperpriors, InitStrategy, LatentField, ModelKind, PhiGrid, Pixel,
    PixelGrid, PixelPosterior, PosteriorChain, PredictConfig, WardTable,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// `rows × cols` lattice in `br × bc` ward blocks with one random covariate.
fn lattice(rows: usize, cols: usize, br: usize, bc: usize, pops: &[u64], seed: u64) -> (PixelGrid, WardTable) {
    let mut r = rng::from_seed(seed);
    let tiling = Tiling { block_rows: br, block_cols: bc };
    let pixels = (0..rows * cols)
        .map(|j| {
            let (row, col) = (j / cols, j % cols);
            let w = tiling.ward_of(row, col, rows, cols) as i64;
            let v: f64 = StandardNormal.sample(&mut r);
            (Pixel { pixel_id: j, row: row as i64, col: col as i64, ward_id: w }, vec![v])
        })
        .collect();
    let pops: Vec<(i64, u64)> = (0..br * bc).map(|i| (i as i64, pops[i % pops.len()])).collect();
    assemble(pixels, vec!["v".into()], &pops, 1.0).unwrap()
}

fn small_grid() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<u64>, u64)> {
    (2usize..5, 2usize..5, 1usize..3, 1usize..3).prop_flat_map(|(hr, hc, br, bc)| {
        (
            Just(hr * br),
            Just(hc * bc),
            Just(br),
            Just(bc),
            prop::collection::vec(1u64..5000, br * bc),
            any::<u64>(),
        )
    })
}

fn posterior(mean: Vec<f64>, sd: Vec<f64>) -> PixelPosterior {
    PixelPosterior {
        mean,
        sd,
        meta: disagg_core::predict::PosteriorMeta { draws: 2, seed: 0, phi_grid: vec![], chain_checksum: None },
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn ward_sums_equal_size_times_mean((rows, cols, br, bc, pops, seed) in small_grid()) {
        let (grid, wards) = lattice(rows, cols, br, bc, &pops, seed);
        let xt = wards.x_tilde();
        for i in 0..wards.len() {
            let m = wards.members(i);
            for k in 0..grid.covariates().ncols() {
                let s: f64 = m.iter().map(|&j| grid.covariates()[(j, k)]).sum();
                let lhs = m.len() as f64 * xt[(i, k)];
                prop_assert!((lhs - s).abs() <= 1e-10 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn empirical_intensity_inverts((rows, cols, br, bc, pops, seed) in small_grid(), c in 0.0f64..2.0) {
        let (_, wards) = lattice(rows, cols, br, bc, &pops, seed);
        let pc = if c > 0.0 { Some(c) } else { None };
        let lik = empirical_log_intensity(&wards, pc).unwrap();
        for i in 0..wards.len() {
            let back = lik.lambda_hat[i].exp() * wards.pixel_counts()[i] as f64;
            let y = wards.populations()[i] as f64 + c;
            prop_assert!((back - y).abs() <= 1e-10 * y);
        }
    }

    #[test]
    fn files_round_trip((rows, cols, br, bc, pops, seed) in small_grid()) {
        let (grid, wards) = lattice(rows, cols, br, bc, &pops, seed);
        let dir = tempfile::tempdir().unwrap();
        let (p, w) = (dir.path().join("p.csv"), dir.path().join("w.csv"));
        write_pixels(&p, &grid).unwrap();
        write_wards(&w, &wards).unwrap();
        let (g2, w2) = load_grid(&p, &w, &CovariateTransform::default(), 1.0).unwrap();
        prop_assert_eq!(g2.covariates(), grid.covariates());
        prop_assert_eq!(w2.populations(), wards.populations());
        prop_assert_eq!(w2.x_tilde(), wards.x_tilde());
    }

    #[test]
    fn sigma00_is_symmetric_and_grows_with_phi(
        (rows, cols, br, bc, pops, seed) in small_grid(),
        phi in 0.3f64..20.0,
        ratio in 1.01f64..4.0,
    ) {
        let (grid, wards) = lattice(rows, cols, br, bc, &pops, seed);
        let lo = build_sigma00(&grid, &wards, phi);
        let hi = build_sigma00(&grid, &wards, phi * ratio);
        prop_assert_eq!(&lo, &lo.transpose());
        for i in 0..wards.len() {
            for k in 0..wards.len() {
                if i != k {
                    prop_assert!(lo[(i, k)] < hi[(i, k)]);
                }
            }
        }
    }

    #[test]
    fn phi_grid_ranges_increase(start in 0.1f64..10.0, width in 0.0f64..10.0, step in 0.05f64..2.0) {
        let g = PhiGrid::parse(&format!("{start}:{}:{step}", start + width)).unwrap();
        prop_assert!(!g.is_empty());
        prop_assert!(g.values().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.values()[0] > 0.0);
    }

    #[test]
    fn surface_mean_is_bounded(rows in 4usize..60, cols in 4usize..60, kind in prop::sample::select(vec![SimKind::S2, SimKind::S3])) {
        let (grid, _) = lattice(rows, cols, 1, 1, &[1], 0);
        let s = surface(kind.amplitude(), &grid);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        prop_assert!(mean.abs() < 2.0 / rows.min(cols) as f64);
    }

    #[test]
    fn accuracy_metrics_are_nonnegative(
        truth in prop::collection::vec(-3.0f64..3.0, 1..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        sd in prop::collection::vec(0.0f64..2.0, 40),
        exact: bool,
    ) {
        let n = truth.len();
        let est: Vec<f64> = if exact { truth.clone() } else { (0..n).map(|j| truth[j] + noise[j]).collect() };
        let (_, wards) = lattice(1, n, 1, 1, &[10], 0);
        let chain = fixed_chain(ModelKind::Laplace, &[[0.1], [0.2], [0.15]]);
        let r = metrics(&posterior(est.clone(), sd[..n].to_vec()), &truth, &chain, &wards).unwrap();
        prop_assert!(r.rmse >= 0.0 && r.mad >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.cover));
        let equal = est == truth;
        prop_assert_eq!(r.rmse == 0.0, equal);
        prop_assert_eq!(r.mad == 0.0, equal);
    }

    #[test]
    fn glm_p_values_and_se((rows, cols, br, bc, pops, seed) in small_grid()) {
        let (_, wards) = lattice(rows, cols, br, bc, &pops, seed);
        prop_assume!(wards.len() >= 3);
        if let Ok(fit) = fit_poisson_glm(&wards) {
            if fit.converged {
                prop_assert!(fit.se.iter().all(|&s| s > 0.0));
                prop_assert!(fit.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn flat_prior_map_is_the_mle(seed in any::<u64>()) {
        let mut r = rng::from_seed(seed);
        let pops: Vec<u64> = (0..9).map(|_| r.random_range(50..5000)).collect();
        let (_, wards) = lattice(6, 6, 3, 3, &pops, seed);
        let mle = fit_poisson_glm(&wards).unwrap();
        let map = bayes_glm_map(&wards, 1e8).unwrap();
        for (a, b) in mle.coef.iter().zip(&map) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn blocking_does_not_change_the_posterior(budget_kib in 1usize..64, seed in 0u64..1000) {
        let (grid, wards) = lattice(8, 8, 2, 2, &[400, 300, 500, 350], seed);
        let phi = PhiGrid::parse("2,4").unwrap();
        let bundles: Vec<_> = phi.values().iter().map(|&p| build_bundle(&grid, &wards, p, 1e-8).unwrap()).collect();
        let chain = run_chain(&wards, &bundles, &Hyperpriors::with_phi_grid(phi), &ChainConfig { burn_in: 10, samples: 30, ..ChainConfig::new(seed) }).unwrap();
        let field = LatentField::Kernel(&bundles);
        let reference = pixel_posterior(&chain, field, &grid, &wards, &PredictConfig::default()).unwrap();
        let small = PredictConfig { block_budget_bytes: budget_kib << 10 };
        match pixel_posterior(&chain, LatentField::Kernel(&bundles), &grid, &wards, &small) {
            Ok(p) => {
                prop_assert_eq!(&p.mean, &reference.mean);
                prop_assert_eq!(&p.sd, &reference.sd);
            }
            Err(e) => prop_assert!(e.to_string().contains("too small")),
        }
        prop_assert!(reference.sd.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn chains_stay_on_support(seed in 0u64..500) {
        let (grid, wards) = lattice(6, 6, 2, 3, &[50, 80, 20, 100, 60, 45], seed);
        let phi = PhiGrid::parse("1,2.5,6").unwrap();
        let bundles: Vec<_> = phi.values().iter().map(|&p| build_bundle(&grid, &wards, p, 1e-8).unwrap()).collect();
        let chain = run_chain(&wards, &bundles, &Hyperpriors::with_phi_grid(phi.clone()), &ChainConfig { burn_in: 5, samples: 40, ..ChainConfig::new(seed) }).unwrap();
        prop_assert!(chain.sigma2.iter().all(|&s| s > 0.0));
        prop_assert!(chain.phi_draws().iter().all(|p| phi.values().contains(p)));
    }

    #[test]
    fn variogram_bins_and_fit_are_admissible(seed in any::<u64>(), range in 1.0f64..10.0) {
        let mut r = rng::from_seed(seed);
        let pts: Vec<(f64, f64)> = (0..25).map(|k| ((k % 5) as f64 * 2.0, (k / 5) as f64 * 2.0)).collect();
        let z: Vec<f64> = pts.iter().map(|p| (p.0 / range).sin() + 0.3 * r.random::<f64>()).collect();
        let vg = empirical_variogram(&z, &pts, 6, 8.0).unwrap();
        prop_assert!(vg.bins.iter().all(|b| b.n_pairs >= 1));
        if let Ok(f) = fit_exponential_variogram(&vg) {
            prop_assert!(f.nugget >= 0.0 && f.sill >= 0.0 && f.range > 0.0);
            prop_assert!(f.sill > 0.0 || f.no_spatial_structure);
        }
    }
}

fn fixed_chain(model: ModelKind, lambda: &[[f64; 1]]) -> PosteriorChain {
    let flat: Vec<f64> = lambda.iter().map(|l| l[0]).collect();
    PosteriorChain {
        model,
        seed: 0,
        burn_in: 0,
        thin: 1,
        phi_grid: vec![],
        lambda_star: DMatrix::from_column_slice(flat.len(), 1, &flat),
        beta: DMatrix::from_column_slice(flat.len(), 1, &flat),
        sigma2: vec![],
        phi_index: vec![],
    }
}

#[test]
fn information_criteria_are_deterministic() {
    let (grid, wards) = lattice(6, 6, 2, 2, &[100, 150, 90, 200], 3);
    let phi = PhiGrid::single(3.0).unwrap();
    let b = build_bundle(&grid, &wards, 3.0, 1e-8).unwrap();
    let chain = run_chain(&wards, &[b], &Hyperpriors::with_phi_grid(phi), &ChainConfig { burn_in: 10, samples: 50, ..ChainConfig::new(1) }).unwrap();
    let a = information_criteria(&chain, &wards).unwrap();
    let b = information_criteria(&chain, &wards).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
}

#[test]
fn cross_covariance_peaks_in_own_ward() {
    let (grid, wards) = lattice(12, 12, 3, 3, &[10], 0);
    let b = build_bundle(&grid, &wards, 3.0, 1e-8).unwrap();
    let s = b.sigma_p0().to_dense().unwrap();
    for j in 0..grid.len() {
        let own = grid.ward_of(j);
        for i in 0..wards.len() {
            assert!(s[(j, own)] >= s[(j, i)], "pixel {j}: ward {i} beats own ward {own}");
        }
    }
}

#[test]
fn weighted_design_matches_direct_formula() {
    let (_, wards) = lattice(6, 6, 2, 3, &[40, 90, 25, 60, 75, 33], 8);
    let x = wards.x_tilde();
    let w = DMatrix::from_fn(6, 6, |i, k| 0.5f64.powi((i as i32 - k as i32).abs()) * 2.0);
    let lam = DVector::from_fn(6, |i, _| 0.1 * i as f64);
    let (m, c) = WeightedDesign::new(&x, &w).beta_moments(&lam, 0.7, 100.0).unwrap();
    let prec = x.transpose() * &w * &x / 0.7 + DMatrix::identity(2, 2) * 1e-4;
    let c_ref = prec.clone().try_inverse().unwrap();
    assert!((&c - &c_ref).norm() < 1e-10 * c_ref.norm());
    assert!((&m - &c_ref * x.transpose() * &w * &lam / 0.7).norm() < 1e-9);
}

#[test]
fn laplace_covariance_uses_count_weights() {
    let (_, wards) = lattice(6, 6, 2, 3, &[40, 90, 25, 60, 75, 33], 8);
    let (mean, cov) = laplace_posterior(&wards, 100.0, None).unwrap();
    let x = wards.x_tilde();
    let y = DVector::from_iterator(6, wards.populations().iter().map(|&v| v as f64));
    let w = DMatrix::from_diagonal(&y);
    let (m_ref, c_ref) = WeightedDesign::new(&x, &w)
        .beta_moments(&empirical_log_intensity(&wards, None).unwrap().lambda_hat, 1.0, 100.0)
        .unwrap();
    assert!((&cov - &c_ref).norm() < 1e-12 * c_ref.norm());
    assert!((&mean - &m_ref).norm() < 1e-12);
}

#[test]
fn smaller_ward_does_not_inflate_sd() {
    // the centre pixel of a 3×3 block, first as one of nine members then alone
    let pixels = |alone: bool| -> Vec<(Pixel, Vec<f64>)> {
        (0..18)
            .map(|j| {
                let (row, col) = ((j / 6) as i64, (j % 6) as i64);
                let mut w = if col < 3 { 0 } else { 1 };
                if alone && col < 3 && !(row == 1 && col == 1) {
                    w = 1;
                }
                (Pixel { pixel_id: j, row, col, ward_id: w }, vec![])
            })
            .collect()
    };
    let centre = 7;
    let mut r = rng::from_seed(4);
    let b = 400;
    let lam: Vec<f64> = (0..2 * b).map(|_| { let z: f64 = StandardNormal.sample(&mut r); 1.0 + 0.3 * z }).collect();
    let mut lambda_star = DMatrix::zeros(b, 2);
    for k in 0..b {
        lambda_star[(k, 0)] = lam[2 * k];
        lambda_star[(k, 1)] = lam[2 * k + 1];
    }
    let beta = DMatrix::from_fn(b, 1, |k, _| 1.0 + 0.05 * ((k % 7) as f64 - 3.0));
    let sd_at = |alone: bool| {
        let (grid, wards) = assemble(pixels(alone), vec![], &[(0, 100), (1, 100)], 1.0).unwrap();
        let bundle = build_bundle(&grid, &wards, 2.0, 1e-8).unwrap();
        let chain = PosteriorChain {
            model: ModelKind::Gp,
            seed: 0,
            burn_in: 0,
            thin: 1,
            phi_grid: vec![2.0],
            lambda_star: lambda_star.clone(),
            beta: beta.clone(),
            sigma2: vec![0.1; b],
            phi_index: vec![0; b],
        };
        let post = pixel_posterior(&chain, LatentField::Kernel(std::slice::from_ref(&bundle)), &grid, &wards, &PredictConfig::default()).unwrap();
        post.sd[centre]
    };
    let (nine, one) = (sd_at(false), sd_at(true));
    assert!(one <= nine, "sd rose from {nine} to {one}");
}

#[test]
fn initialisation_does_not_move_the_posterior() {
    let (grid, empty) = synthetic_grid(20, 25, Tiling { block_rows: 4, block_cols: 5 }, 9).unwrap();
    let setting = SimSetting { kind: SimKind::S1, beta_true: vec![2.0, 0.3, -0.25, 0.05], seed: 9 };
    let truth = true_log_intensity(&setting, &grid).unwrap();
    let y = draw_counts(&truth, &empty, &mut rng::from_seed(10)).unwrap();
    let wards = empty.with_populations(&y).unwrap();
    let phi = PhiGrid::single(5.0).unwrap();
    let bundle = build_bundle(&grid, &wards, 5.0, 1e-8).unwrap();
    let priors = Hyperpriors::with_phi_grid(phi);
    let run = |init, seed| {
        let cfg = ChainConfig { burn_in: 2000, samples: 8000, init, ..ChainConfig::new(seed) };
        run_chain(&wards, std::slice::from_ref(&bundle), &priors, &cfg).unwrap()
    };
    let a = run(InitStrategy::Empirical, 1);
    let b = run(InitStrategy::PriorMean, 2);
    // batch-means standard errors absorb autocorrelation
    let batch_se = |c: &PosteriorChain, k: usize| {
        let n = c.len();
        let nb = 40;
        let len = n / nb;
        let means: Vec<f64> = (0..nb).map(|q| (q * len..(q + 1) * len).map(|t| c.beta[(t, k)]).sum::<f64>() / len as f64).collect();
        let m = means.iter().sum::<f64>() / nb as f64;
        (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nb - 1) as f64 / nb as f64).sqrt()
    };
    let (ma, mb) = (a.beta_mean(), b.beta_mean());
    for k in 0..ma.len() {
        let se = (batch_se(&a, k).powi(2) + batch_se(&b, k).powi(2)).sqrt();
        assert!((ma[k] - mb[k]).abs() < 3.0 * se, "beta_{k}: {} vs {} (se {se})", ma[k], mb[k]);
    }
}

/// Wards whose pixels share their covariates, so the ward-level log-linear
/// model is exact under S1.
fn ward_constant_grid(seed: u64) -> (PixelGrid, WardTable) {
    let mut r = rng::from_seed(seed);
    let (rows, cols, br, bc) = (20usize, 25usize, 4usize, 5usize);
    let tiling = Tiling { block_rows: br, block_cols: bc };
    let ward_cov: Vec<Vec<f64>> = (0..br * bc)
        .map(|_| (0..3).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let pixels = (0..rows * cols)
        .map(|j| {
            let (row, col) = (j / cols, j % cols);
            let w = tiling.ward_of(row, col, rows, cols);
            (Pixel { pixel_id: j, row: row as i64, col: col as i64, ward_id: w as i64 }, ward_cov[w].clone())
        })
        .collect();
    let pops: Vec<(i64, u64)> = (0..br * bc).map(|i| (i as i64, 0)).collect();
    assemble(pixels, vec!["a".into(), "b".into(), "c".into()], &pops, 1.0).unwrap()
}

#[test]
fn correctly_specified_models_cover_on_s1() {
    let (grid, empty) = ward_constant_grid(21);
    let setting = SimSetting { kind: SimKind::S1, beta_true: vec![2.0, 0.3, -0.25, 0.05], seed: 0 };
    let truth = true_log_intensity(&setting, &grid).unwrap();
    for kind in [BaselineKind::BayesGlm, BaselineKind::Laplace] {
        let reports: Vec<MetricReport> = (0..20u64)
            .map(|rep| {
                let y = draw_counts(&truth, &empty, &mut rng::stream(77, &[rep])).unwrap();
                let wards = empty.with_populations(&y).unwrap();
                let cfg = ChainConfig { burn_in: 500, samples: 1500, ..ChainConfig::new(rep) };
                let chain = fit_baseline(kind, &grid, &wards, &Hyperpriors::default(), &cfg).unwrap();
                let post = pixel_posterior(&chain, LatentField::FixedEffects, &grid, &wards, &PredictConfig::default()).unwrap();
                metrics(&post, &truth, &chain, &wards).unwrap()
            })
            .collect();
        let cover = MetricReport::average(&reports).unwrap().cover;
        assert!(cover >= 0.90, "{kind:?}: coverage {cover}");
    }
}
