use super::*;
use crate::linalg::{sym_eig, DenseOperator, DEFAULT_DENSE_FALLBACK_DIM};
use crate::metrics::{forstner_distance, frobenius_distance};

const LIMIT: usize = DEFAULT_DENSE_FALLBACK_DIM;

fn random_spd(n: usize, seed: u64) -> SpdMatrix {
    let a = rng::normal_matrix(&mut rng::stream(seed, 1), n, n);
    SpdMatrix::from_symmetrized(&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2)
        .unwrap()
}

fn random_model(m: usize, n: usize, seed: u64) -> GaussianLinearModel {
    let g = rng::normal_matrix(&mut rng::stream(seed, 0), m, n);
    GaussianLinearModel::dense(g, random_spd(m, seed + 1), random_spd(n, seed + 2)).unwrap()
}

fn diagonal_model() -> GaussianLinearModel {
    GaussianLinearModel::dense(
        DMatrix::identity(3, 3),
        SpdMatrix::identity(3),
        SpdMatrix::from_diagonal(&[4.0, 1.0, 0.25]).unwrap(),
    )
    .unwrap()
}

fn full_pencil(model: &GaussianLinearModel) -> PencilDecomposition {
    PencilDecomposition::compute(model, model.n(), &EigOptions::default()).unwrap()
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn dist(model: &GaussianLinearModel, approx: &CovarianceApproximation) -> f64 {
    let post = model.exact_posterior().unwrap();
    forstner_distance(&post.gamma_pos, &approx.covariance_spd().unwrap()).unwrap()
}

#[test]
fn pencil_invariants() {
    let model = random_model(5, 7, 3);
    let p = full_pencil(&model);
    let pr = model.gamma_pr();
    let k = p.len();
    assert!((p.w_hat.tr_mul(&pr.solve_matrix(&p.w_hat)) - DMatrix::identity(k, k)).norm() < 1e-8);
    assert!(
        (p.w_tilde.tr_mul(&(pr.matrix() * &p.w_tilde)) - DMatrix::identity(k, k)).norm() < 1e-8
    );
    let post = model.exact_posterior().unwrap();
    for i in 0..k {
        let wt = p.w_tilde.column(i);
        let lhs = post.gamma_pos.matrix() * wt;
        let rhs = pr.matrix() * wt / (1.0 + p.delta_sq[i]);
        assert!((lhs - rhs).norm() < 1e-8);
        // variance ratio and relative reduction
        let vpos = (wt.transpose() * post.gamma_pos.matrix() * wt)[(0, 0)];
        let vpr = (wt.transpose() * pr.matrix() * wt)[(0, 0)];
        assert!((vpos / vpr - 1.0 / (1.0 + p.delta_sq[i])).abs() < 1e-8);
        let d2 = p.delta_sq[i];
        assert!(((vpr - vpos) / vpr - d2 / (1.0 + d2)).abs() < 1e-8);
    }
}

#[test]
fn zero_rank_is_the_prior() {
    let model = random_model(4, 5, 11);
    let p = full_pencil(&model);
    let a = optimal_covariance_update(&model, &p, 0).unwrap();
    assert_eq!(a.covariance(), symmetrize(model.gamma_pr().matrix()));
    let expected: f64 = p
        .delta_sq
        .iter()
        .map(|d| (1.0 / (1.0 + d)).ln().powi(2))
        .sum();
    assert!((dist(&model, &a).powi(2) - expected).abs() < 1e-8);
}

#[test]
fn diagonal_case_rank_one() {
    let model = diagonal_model();
    let p = full_pencil(&model);
    assert!((p.delta_sq[0] - 4.0).abs() < 1e-12);
    assert!((p.w_hat.column(0) - DVector::from_vec(vec![2.0, 0.0, 0.0])).norm() < 1e-12);
    let a = optimal_covariance_update(&model, &p, 1).unwrap();
    assert!((a.update() - diag(&[3.2, 0.0, 0.0])).norm() < 1e-12);
    assert!((a.covariance() - diag(&[0.8, 1.0, 0.25])).norm() < 1e-12);

    let u = optimal_precision_update(&p, 1).unwrap();
    assert!((u.factor() * u.factor().transpose() - diag(&[1.0, 0.0, 0.0])).norm() < 1e-12);
    let inv = SpdMatrix::from_symmetrized(u.precision(model.gamma_pr()))
        .unwrap()
        .inverse();
    assert!((inv - diag(&[0.8, 1.0, 0.25])).norm() < 1e-12);

    let proj = optimal_projector(&p, 1).unwrap();
    assert!((proj.matrix() - diag(&[1.0, 0.0, 0.0])).norm() < 1e-12);

    let sq = posterior_sqrt_approx(&p, 1).unwrap();
    assert!((sq.factor() - diag(&[2.0 / 5f64.sqrt(), 1.0, 0.5])).norm() < 1e-12);
}

#[test]
fn full_rank_update_is_exact() {
    let model = random_model(6, 6, 21);
    let p = full_pencil(&model);
    let post = model.exact_posterior().unwrap();
    let a = optimal_covariance_update(&model, &p, 6).unwrap();
    assert!(
        (a.covariance() - post.gamma_pos.matrix()).norm() < 1e-8 * post.gamma_pos.matrix().norm()
    );
}

#[test]
fn rank_errors() {
    let model = random_model(3, 4, 31);
    let p = PencilDecomposition::compute(&model, 2, &EigOptions::default()).unwrap();
    assert!(matches!(
        optimal_covariance_update(&model, &p, 3),
        Err(Error::Rank {
            requested: 3,
            available: 2
        })
    ));
    assert!(matches!(
        optimal_precision_update(&p, 3),
        Err(Error::Rank { .. })
    ));
    assert!(matches!(optimal_projector(&p, 3), Err(Error::Rank { .. })));
    let other = random_model(3, 4, 32);
    assert!(matches!(
        optimal_covariance_update(&other, &p, 1),
        Err(Error::Provenance { .. })
    ));
}

#[test]
fn precision_update_is_inverse_consistent() {
    let model = random_model(6, 8, 41);
    let p = full_pencil(&model);
    let pr = model.gamma_pr();
    for r in 0..=8 {
        let cov = optimal_covariance_update(&model, &p, r)
            .unwrap()
            .covariance();
        let prec = optimal_precision_update(&p, r).unwrap().precision(pr);
        assert!(
            (&cov * &prec - DMatrix::identity(8, 8)).norm() < 1e-8,
            "r = {r}"
        );
    }
}

#[test]
fn covariance_precision_bijection() {
    let model = random_model(5, 6, 51);
    let p = full_pencil(&model);
    let a = optimal_covariance_update(&model, &p, 3).unwrap();
    let back = a.to_precision().unwrap().to_covariance(&model).unwrap();
    let x = rng::normal_matrix(&mut rng::stream(52, 0), 6, 4);
    let lhs = a.update() * &x;
    let rhs = back.update() * &x;
    assert!((lhs - rhs).norm() < 1e-9 * x.norm() * a.update().norm().max(1.0));
}

#[test]
fn projector_properties() {
    let model = random_model(5, 7, 61);
    let p = full_pencil(&model);
    let proj = optimal_projector(&p, 3).unwrap();
    let pm = proj.matrix();
    assert!((&pm * &pm - &pm).norm() < 1e-8 * pm.norm());
    assert!((&pm - pm.transpose()).norm() > 1e-3);
    let projected = proj.projected_model(&model).unwrap();
    let post = projected.exact_posterior().unwrap();
    let opt = optimal_covariance_update(&model, &p, 3).unwrap();
    assert!((post.gamma_pos.matrix() - opt.covariance()).norm() < 1e-8 * opt.covariance().norm());

    let full = optimal_projector(&p, 7).unwrap();
    let w = p.w_hat.column(2).into_owned();
    assert!((full.apply(&w) - &w).norm() < 1e-8 * w.norm());
}

#[test]
fn square_root_reconstructs_and_samples() {
    let model = random_model(4, 5, 71);
    let p = full_pencil(&model);
    let sq0 = posterior_sqrt_approx(&p, 0).unwrap();
    assert!((sq0.factor() - model.gamma_pr().cholesky_factor()).norm() < 1e-14);
    let r = 2;
    let sq = posterior_sqrt_approx(&p, r).unwrap();
    let f = sq.factor();
    let target = optimal_covariance_update(&model, &p, r)
        .unwrap()
        .covariance();
    assert!((&f * f.transpose() - &target).norm() < 1e-8 * target.norm());

    let mean = DVector::zeros(5);
    let x = sq.sample(&mean, 100_000, 9).unwrap();
    let cov = &x * x.transpose() / x.ncols() as f64;
    let err = sym_eig(&symmetrize(&(cov - &target)))
        .unwrap()
        .values
        .iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let scale = sym_eigenvalues(&target)[0];
    assert!(err < 0.03 * scale, "{err} vs {scale}");
}

#[test]
fn approximation_lemma_in_whitened_space() {
    // G = D with distinct entries, Γobs = Γpr = I: the update is Σ dᵢ²/(1+dᵢ²) eᵢeᵢᵀ
    // and the precision update is Σ dᵢ² eᵢeᵢᵀ.
    let d = [3.0, 0.5, 2.0, 1.5];
    let model =
        GaussianLinearModel::dense(diag(&d), SpdMatrix::identity(4), SpdMatrix::identity(4))
            .unwrap();
    let p = full_pencil(&model);
    let u = optimal_precision_update(&p, 2).unwrap();
    let expected = diag(&[9.0, 0.0, 4.0, 0.0]);
    assert!((u.factor() * u.factor().transpose() - expected).norm() < 1e-12);
}

#[test]
fn loss_threshold_rule() {
    let d2 = [100.0, 10.0, 1.0, 0.1];
    let bound = forstner_loss_bound(&d2, 4, 2);
    let exact = minimum_loss(&d2, 2, crate::metrics::forstner_f);
    assert!((bound - exact).abs() < 1e-12);
    // two unknown eigenvalues, bounded by the last computed one
    let partial = forstner_loss_bound(&d2[..2], 4, 2);
    assert!(partial >= exact);
    assert_eq!(rank_for_tolerance(&d2, 4, 1e-9), Some(4));
    assert_eq!(rank_for_tolerance(&d2, 4, 10.0), Some(0));
}

#[test]
fn closed_form_loss_matches() {
    for seed in 0..5 {
        let model = random_model(6, 6, 100 + seed);
        let p = full_pencil(&model);
        let d2: Vec<f64> = p.delta_sq.iter().copied().collect();
        for r in 0..=6 {
            let a = optimal_covariance_update(&model, &p, r).unwrap();
            let measured = dist(&model, &a).powi(2);
            assert!((measured - minimum_loss(&d2, r, crate::metrics::forstner_f)).abs() < 1e-8);
        }
    }
}

#[test]
fn baselines_trivial_cases() {
    let pr = random_spd(4, 81);
    let zero = GaussianLinearModel::dense(DMatrix::zeros(3, 4), SpdMatrix::identity(3), pr.clone())
        .unwrap();
    for a in [
        hessian_based_update(&zero, 2, LIMIT).unwrap(),
        prior_based_update(&zero, 2).unwrap(),
        frobenius_based_update(&zero, 2, LIMIT).unwrap(),
    ] {
        assert!(
            (a.covariance() - pr.matrix()).norm() < 1e-12,
            "{}",
            a.provenance()
        );
    }
    let b0 = bfgs_based_update(&zero, 0, 1, LIMIT).unwrap();
    assert!((b0.covariance() - pr.matrix()).norm() < 1e-12);

    // whitened prior: Hessian-based equals optimal
    let g = rng::normal_matrix(&mut rng::stream(82, 0), 5, 4);
    let white = GaussianLinearModel::dense(g, random_spd(5, 83), SpdMatrix::identity(4)).unwrap();
    let p = full_pencil(&white);
    for r in 0..=4 {
        let h = hessian_based_update(&white, r, LIMIT).unwrap();
        let o = optimal_covariance_update(&white, &p, r).unwrap();
        assert!((h.covariance() - o.covariance()).norm() < 1e-8);
    }

    // denoising with isotropic noise: prior-based equals optimal
    let den = GaussianLinearModel::dense(
        DMatrix::identity(4, 4),
        SpdMatrix::scaled_identity(4, 0.3).unwrap(),
        SpdMatrix::from_diagonal(&[5.0, 0.2, 2.0, 1.0]).unwrap(),
    )
    .unwrap();
    let p = full_pencil(&den);
    for r in 0..=4 {
        let pb = prior_based_update(&den, r).unwrap();
        let o = optimal_covariance_update(&den, &p, r).unwrap();
        assert!((pb.covariance() - o.covariance()).norm() < 1e-8);
    }

    // scalar problem: one BFGS step is exact
    let one = GaussianLinearModel::dense(
        DMatrix::from_element(1, 1, 2.0),
        SpdMatrix::identity(1),
        SpdMatrix::identity(1),
    )
    .unwrap();
    let b = bfgs_based_update(&one, 1, 3, LIMIT).unwrap();
    let exact = one.exact_posterior().unwrap();
    assert!((b.covariance() - exact.gamma_pos.matrix()).norm() < 1e-14);
}

#[test]
fn frobenius_diagonal_case_and_blind_spot() {
    let model = diagonal_model();
    let post = model.exact_posterior().unwrap();
    let diff = model.gamma_pr().matrix() - post.gamma_pos.matrix();
    assert!((diff - diag(&[3.2, 0.5, 0.05])).norm() < 1e-12);
    let f = frobenius_based_update(&model, 1, LIMIT).unwrap();
    assert!((f.update() - diag(&[3.2, 0.0, 0.0])).norm() < 1e-12);

    // the most informative direction has tiny prior variance; a weakly
    // observed high-variance direction has the larger absolute reduction
    let model = GaussianLinearModel::dense(
        diag(&[1e-3, 1.0]),
        SpdMatrix::scaled_identity(2, 1e-6).unwrap(),
        SpdMatrix::from_diagonal(&[1.0, 1e-4]).unwrap(),
    )
    .unwrap();
    let p = full_pencil(&model);
    let opt = dist(&model, &optimal_covariance_update(&model, &p, 1).unwrap());
    let frob_approx = frobenius_based_update(&model, 1, LIMIT).unwrap();
    let frob = dist(&model, &frob_approx);
    assert!(frob > 1.1 * opt, "{frob} vs {opt}");
    // while the Frobenius baseline wins in its own norm
    let post = model.exact_posterior().unwrap();
    let fo = frobenius_distance(
        post.gamma_pos.matrix(),
        &optimal_covariance_update(&model, &p, 1)
            .unwrap()
            .covariance(),
    )
    .unwrap();
    let ff = frobenius_distance(post.gamma_pos.matrix(), &frob_approx.covariance()).unwrap();
    assert!(ff <= fo + 1e-15);
}

#[test]
fn baselines_never_beat_optimal() {
    for seed in 0..6 {
        let model = random_model(6, 6, 200 + seed);
        let p = full_pencil(&model);
        for r in 1..6 {
            let opt = dist(&model, &optimal_covariance_update(&model, &p, r).unwrap());
            let others = [
                hessian_based_update(&model, r, LIMIT).unwrap(),
                prior_based_update(&model, r).unwrap(),
                frobenius_based_update(&model, r, LIMIT).unwrap(),
                bfgs_based_update(&model, r, seed, LIMIT).unwrap(),
            ];
            for a in &others {
                assert!(dist(&model, a) >= opt - 1e-10, "{} r={r}", a.provenance());
            }
            let mut g = rng::stream(seed, 77);
            for _ in 0..20 {
                let c = random_feasible_update(&model, r, &mut g).unwrap();
                assert!(c.factor().ncols() == r);
                assert!(dist(&model, &c) >= opt - 1e-10);
            }
        }
    }
}

#[test]
fn bfgs_is_monotone_and_exact_at_full_rank() {
    let model = random_model(8, 10, 301);
    let mut prev = f64::INFINITY;
    for r in 0..=10 {
        let b = bfgs_based_update(&model, r, 5, LIMIT).unwrap();
        let d = dist(&model, &b);
        assert!(d <= prev + 1e-10, "r = {r}: {d} > {prev}");
        prev = d;
    }
    assert!(prev < 1e-6);
}

#[test]
fn guard_rejects_infeasible_updates() {
    let model = random_model(3, 3, 401);
    let s = model.gamma_pr().cholesky_factor().clone();
    assert!(matches!(
        CovarianceApproximation::from_factor(&model, s.columns(0, 1) * 1.0001, Provenance::Custom),
        Err(Error::NotPositiveDefinite { .. })
    ));
    let mut k = DMatrix::zeros(3, 3);
    k.copy_from(&s);
    assert!(CovarianceApproximation::from_factor(&model, k, Provenance::Custom).is_err());
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_model(4, 5, 501);
    let p = full_pencil(&model);
    let a = optimal_covariance_update(&model, &p, 2).unwrap();
    a.save(dir.path()).unwrap();
    let back = CovarianceApproximation::load(dir.path(), &model).unwrap();
    assert_eq!(back.provenance(), Provenance::Optimal);
    assert_eq!(back.factor(), a.factor());
    let other = random_model(4, 5, 502);
    assert!(matches!(
        CovarianceApproximation::load(dir.path(), &other),
        Err(Error::Provenance { .. })
    ));
}

#[test]
fn projector_action_matches_dense() {
    let model = random_model(4, 5, 601);
    let p = full_pencil(&model);
    let proj = optimal_projector(&p, 2).unwrap();
    let dense = DenseOperator::new(proj.matrix());
    let x = rng::normal_vector(&mut rng::stream(602, 0), 5);
    assert!((proj.apply(&x) - dense.apply(&x)).norm() < 1e-12);
    assert!((proj.apply_transpose(&x) - dense.apply_transpose(&x)).norm() < 1e-12);
}

#[test]
fn sweeps_match_single_rank_baselines() {
    let model = random_model(5, 6, 91);
    let ranks = [0, 2, 5];
    let h = hessian_based_updates(&model, &ranks, DEFAULT_DENSE_FALLBACK_DIM).unwrap();
    let p = prior_based_updates(&model, &ranks).unwrap();
    for (i, &r) in ranks.iter().enumerate() {
        let hs = hessian_based_update(&model, r, DEFAULT_DENSE_FALLBACK_DIM).unwrap();
        assert!((h[i].covariance() - hs.covariance()).norm() < 1e-14);
        let ps = prior_based_update(&model, r).unwrap();
        assert!((p[i].covariance() - ps.covariance()).norm() < 1e-14);
    }
    let it = bfgs_iterates(&model, 6, 4, DEFAULT_DENSE_FALLBACK_DIM).unwrap();
    assert_eq!(it.covariances.len(), 7);
    assert_eq!(&it.covariances[0], model.gamma_pr().matrix());
    let some = bfgs_iterates_at(&model, &[1, 3, 6], 4, DEFAULT_DENSE_FALLBACK_DIM).unwrap();
    for (i, r) in [1, 3, 6].into_iter().enumerate() {
        assert_eq!(some.covariances[i], it.covariances[r]);
    }
    for r in 0..=6 {
        let b = bfgs_based_update(&model, r, 4, DEFAULT_DENSE_FALLBACK_DIM).unwrap();
        let scale = it.covariances[r].norm();
        assert!(
            (b.covariance() - &it.covariances[r]).norm() < 1e-10 * scale,
            "r = {r}"
        );
    }
}
