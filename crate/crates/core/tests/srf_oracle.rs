//! Filter-engine contracts checked against dense covariance oracles.

mod common;

use common::*;
use rand::Rng;
use srfvio::dense;
use srfvio::mat::Mat;
use srfvio::srf::{Backend, BlockKind, BlockTag, LinearizedMeasurement, SqrtState};
use srfvio::tri::{self, UpperTri};
use srfvio::SrfError;

#[test]
fn propagate_identity_no_noise_keeps_factor() {
    let mut g = rng(1);
    let mut st = random_state(6, &mut g);
    let before = st.factor().clone();
    let mean = st.mean().to_vec();
    st.propagate(&Mat::identity(6), &Mat::zeros(0, 6), &mean, false).unwrap();
    assert!(st.factor().rel_err(&before) < 1e-13);
}

#[test]
fn propagate_unit_noise_doubles_covariance() {
    let u = UpperTri::identity(4);
    let mut st = SqrtState::new_generic(vec![0.0; 4], u);
    st.propagate(&Mat::identity(4), &Mat::identity(4), &[0.0; 4], false).unwrap();
    let expect = Mat::identity(4).scale(2.0f64.sqrt());
    assert!(st.factor().rel_err(&expect) < 1e-14);
}

#[test]
fn propagate_matches_dense_covariance_oracle() {
    let mut g = rng(2);
    for _ in 0..20 {
        let mut st = random_state(9, &mut g);
        let p0 = st.covariance();
        let phi = random_mat(9, 9, &mut g);
        let wsq = random_mat(5, 9, &mut g);
        let w = wsq.tr_mul(&wsq);
        let mean = st.mean().to_vec();
        st.propagate(&phi, &wsq, &mean, false).unwrap();
        let dense = dense::propagate_cov(&p0, &phi, &w);
        assert!(st.covariance().rel_err(&dense) < 1e-11);
        assert!(st.factor().is_upper_triangular());
    }
}

#[test]
fn deferred_propagation_blocks_update_until_triangularized() {
    let mut g = rng(3);
    let mut st = random_state(5, &mut g);
    let mean = st.mean().to_vec();
    st.propagate(&random_mat(5, 5, &mut g), &random_mat(5, 5, &mut g), &mean, true).unwrap();
    assert!(st.is_deferred());
    let meas = random_meas(3, 5, &mut g);
    assert!(matches!(st.update_llt(&meas), Err(SrfError::DeferredFactor)));
    st.triangularize();
    st.update_llt(&meas).unwrap();
}

#[test]
fn update_with_zero_jacobian_is_identity() {
    let mut g = rng(4);
    let mut st = random_state(7, &mut g);
    let before_mean = st.mean().to_vec();
    let before_cov = st.covariance();
    let meas = LinearizedMeasurement::new_dense(vec![1.0, -2.0], Mat::zeros(2, 7), 1.0);
    st.update_llt(&meas).unwrap();
    assert_eq!(st.mean(), &before_mean[..]);
    assert!(st.covariance().rel_err(&before_cov) < 1e-14);
}

#[test]
fn scalar_update_hand_oracle() {
    // n=1, m=1, U=1, H=1, R=1, r=1: K = 1/2, x += 0.5, U' = 1/sqrt(2)
    let mut st = SqrtState::new_generic(vec![0.0f64], UpperTri::identity(1));
    let meas = LinearizedMeasurement::new_dense(vec![1.0], Mat::identity(1), 1.0);
    st.update_llt(&meas).unwrap();
    assert!((st.mean()[0] - 0.5).abs() < 1e-14);
    assert!((st.factor()[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-14);
}

#[test]
fn llt_update_matches_joseph_ekf() {
    let mut g = rng(5);
    for trial in 0..40 {
        let n = 12;
        let m = 30;
        let mut st = random_state(n, &mut g);
        let p0 = st.covariance();
        let mean0 = st.mean().to_vec();
        let meas = random_meas(m, n, &mut g);
        st.update_llt(&meas).unwrap();
        let (p_ref, dx) =
            dense::joseph_update(&p0, &meas.jacobian, &meas.residual, &meas.sigmas).unwrap();
        let mean_ref: Vec<f64> = mean0.iter().zip(&dx).map(|(a, b)| a + b).collect();
        assert!(st.covariance().rel_err(&p_ref) < 1e-10, "trial {trial}");
        assert!(vec_rel(st.mean(), &mean_ref) < 1e-10, "trial {trial}");
        assert!(st.factor().is_upper_triangular());
    }
}

#[test]
fn restricted_pattern_matches_dense_pattern() {
    // sparse H touching only leading blocks: restricted-C path equals the
    // dense-pattern computation
    let mut g = rng(6);
    for _ in 0..20 {
        let n = 14;
        let k = 8;
        let m = 10;
        let st0 = random_state(n, &mut g);
        let mut h = Mat::zeros(m, n);
        for i in 0..m {
            for j in 0..k {
                h[(i, j)] = g.gen_range(-1.0..1.0);
            }
        }
        let r: Vec<f64> = (0..m).map(|_| g.gen_range(-1.0..1.0)).collect();
        let mut sparse = LinearizedMeasurement::new_dense(r.clone(), h.clone(), 1.3);
        sparse.touched = vec![0..k];
        let dense_meas = LinearizedMeasurement::new_dense(r, h, 1.3);
        let mut st_sparse = st0.clone();
        let mut st_dense = st0.clone();
        st_sparse.update_llt(&sparse).unwrap();
        st_dense.update_llt(&dense_meas).unwrap();
        assert!(st_sparse.covariance().rel_err(&st_dense.covariance()) < 1e-11);
        assert!(vec_rel(st_sparse.mean(), st_dense.mean()) < 1e-11);
    }
}

#[test]
fn all_backends_agree_with_llt() {
    let mut g = rng(7);
    for trial in 0..20 {
        let n = 10;
        let m = 20;
        let st0 = random_state(n, &mut g);
        let meas = random_meas(m, n, &mut g);
        let mut st_llt = st0.clone();
        st_llt.update_llt(&meas).unwrap();
        for b in [Backend::Pqr, Backend::Potter, Backend::Carlson, Backend::Kaminski] {
            let mut st = st0.clone();
            st.update_with(&meas, b).unwrap();
            let dcov = st.covariance().rel_err(&st_llt.covariance());
            let dmean = vec_rel(st.mean(), st_llt.mean());
            assert!(dcov < 1e-8, "trial {trial} backend {b:?} cov {dcov:.2e}");
            assert!(dmean < 1e-6, "trial {trial} backend {b:?} mean {dmean:.2e}");
            assert!(st.factor().is_upper_triangular());
        }
    }
}

#[test]
fn backend_flop_counts_track_published_laws() {
    let mut g = rng(8);
    let n = 40;
    let nf = n as f64;
    for m in [20usize, 80, 200] {
        let mf = m as f64;
        let st0 = random_state(n, &mut g);
        let meas = random_meas(m, n, &mut g);
        let predictions = [
            (Backend::Potter, 6.0 * mf * nf * nf),
            (Backend::Carlson, 3.5 * mf * nf * nf),
            (
                Backend::Kaminski,
                2.0 * mf * mf * nf + 5.0 * mf * nf * nf + 4.0 / 3.0 * nf * nf * nf,
            ),
            (Backend::Pqr, 3.0 * mf * nf * nf + nf * nf * nf / 3.0),
            (Backend::Llt, 2.0 * mf * nf * nf + 2.0 / 3.0 * nf * nf * nf),
        ];
        for (b, law) in predictions {
            let mut st = st0.clone();
            let info = st.update_with(&meas, b).unwrap();
            let ratio = info.flops as f64 / law;
            assert!(
                (0.75..=1.25).contains(&ratio),
                "{b:?} m={m}: flops {} vs law {law:.3e} (ratio {ratio:.3})",
                info.flops
            );
        }
    }
}

#[test]
fn clone_duplicates_covariance_blocks() {
    // toy pose state: quat + position with identity covariance
    let parts = [
        (BlockKind::Quat, BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
    ];
    let mean = vec![0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut st = SqrtState::from_blocks(&parts, mean, Mat::identity(15));
    st.clone_leading_pose(42);
    st.triangularize();
    let p = st.covariance();
    let oracle = dense::clone_cov(&Mat::identity(15), 0, 6, 15);
    assert!(p.rel_err(&oracle) < 1e-12);
    // clone carries the pose mean
    assert_eq!(st.mean()[16..23], [0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 3.0]);
}

#[test]
fn clone_matches_dense_augmentation_oracle() {
    let mut g = rng(9);
    let parts = [
        (BlockKind::Quat, BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
    ];
    let mut mean = vec![0.0; 16];
    mean[3] = 1.0;
    for _ in 0..10 {
        let f = random_factor(15, &mut g);
        let mut st = SqrtState::from_blocks(&parts, mean.clone(), f.clone());
        let p0 = st.covariance();
        st.clone_leading_pose(7);
        st.triangularize();
        let oracle = dense::clone_cov(&p0, 0, 6, 15);
        assert!(st.covariance().rel_err(&oracle) < 1e-12);
    }
}

#[test]
fn double_clone_cross_covariances_match() {
    let mut g = rng(10);
    let parts = [
        (BlockKind::Quat, BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
    ];
    let mut mean = vec![0.0; 16];
    mean[3] = 1.0;
    let mut st = SqrtState::from_blocks(&parts, mean, random_factor(15, &mut g));
    st.clone_leading_pose(1);
    st.clone_leading_pose(2);
    st.triangularize();
    let p = st.covariance();
    // both clone blocks carry identical cross-covariance with the nav pose
    let c1 = p.block(0, 15, 6, 6); // newest clone (id 2) columns
    let c2 = p.block(0, 21, 6, 6);
    assert!(c1.rel_err(&c2) < 1e-12);
}

#[test]
fn marginalize_trailing_block_is_pure_deletion() {
    let mut g = rng(11);
    let n = 12;
    let parts = [
        (BlockKind::Lin(6), BlockTag::Generic(0)),
        (BlockKind::Lin(3), BlockTag::Feature(1)),
        (BlockKind::Lin(3), BlockTag::Feature(2)),
    ];
    let f = random_factor(n, &mut g);
    let mean: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut st = SqrtState::from_blocks(&parts, mean, f.clone());
    let p0 = st.covariance();
    let (_, fl) = srfvio::flops::counted(|| {
        st.marginalize(&[BlockTag::Feature(2)]).unwrap();
    });
    assert_eq!(fl, 0, "trailing marginalization must do no factorization work");
    let oracle = dense::marginal_cov(&p0, &[9, 10, 11]);
    assert!(st.covariance().rel_err(&oracle) < 1e-13);
    assert_eq!(st.mean(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn marginalize_middle_block_matches_dense_deletion() {
    let mut g = rng(12);
    let parts = [
        (BlockKind::Lin(6), BlockTag::Generic(0)),
        (BlockKind::Lin(6), BlockTag::Clone(3)),
        (BlockKind::Lin(6), BlockTag::Clone(2)),
        (BlockKind::Lin(6), BlockTag::Clone(1)),
    ];
    for _ in 0..10 {
        let f = random_factor(24, &mut g);
        let mean: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let mut st = SqrtState::from_blocks(&parts, mean, f.clone());
        let p0 = st.covariance();
        st.marginalize(&[BlockTag::Clone(2)]).unwrap();
        let drop: Vec<usize> = (12..18).collect();
        let oracle = dense::marginal_cov(&p0, &drop);
        assert!(st.covariance().rel_err(&oracle) < 1e-12);
        assert!(st.factor().is_upper_triangular());
    }
}

#[test]
fn marginalize_everything_but_head_is_definitional_qr() {
    let mut g = rng(13);
    let parts = [
        (BlockKind::Lin(6), BlockTag::Generic(0)),
        (BlockKind::Lin(6), BlockTag::Clone(2)),
        (BlockKind::Lin(6), BlockTag::Clone(1)),
    ];
    let f = random_factor(18, &mut g);
    let mean = vec![0.0; 18];
    let mut st = SqrtState::from_blocks(&parts, mean, f.clone());
    st.marginalize(&[BlockTag::Clone(1), BlockTag::Clone(2)]).unwrap();
    let oracle = tri::qr_triangularize(&f.block(0, 0, 18, 6));
    assert!(st.factor().rel_err(oracle.mat()) < 1e-12);
}

#[test]
fn marginalize_unknown_block_errors() {
    let mut g = rng(14);
    let mut st = random_state(5, &mut g);
    assert!(matches!(
        st.marginalize(&[BlockTag::Feature(99)]),
        Err(SrfError::UnknownBlock(_))
    ));
}

#[test]
fn clone_then_marginalize_clone_is_identity() {
    let mut g = rng(15);
    let parts = [
        (BlockKind::Quat, BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
        (BlockKind::Lin(3), BlockTag::Nav),
    ];
    let mut mean = vec![0.0; 16];
    mean[3] = 1.0;
    let f = random_factor(15, &mut g);
    let mut st = SqrtState::from_blocks(&parts, mean, f.clone());
    let p0 = st.covariance();
    st.clone_leading_pose(11);
    st.marginalize(&[BlockTag::Clone(11)]).unwrap();
    assert!(st.covariance().rel_err(&p0) < 1e-12);
}

#[test]
fn mahalanobis_cases() {
    let mut g = rng(16);
    // r = 0 -> 0
    let st = random_state(6, &mut g);
    let mut meas = random_meas(4, 6, &mut g);
    meas.residual = vec![0.0; 4];
    assert!(st.mahalanobis(&meas).unwrap() < 1e-30);

    // scalar hand case: U=1,H=1,R=1,r=1 -> 1/(1+1) = 0.5
    let st = SqrtState::new_generic(vec![0.0f64], UpperTri::identity(1));
    let meas = LinearizedMeasurement::new_dense(vec![1.0], Mat::identity(1), 1.0);
    assert!((st.mahalanobis(&meas).unwrap() - 0.5).abs() < 1e-14);

    // random: matches dense innovation-covariance oracle
    for _ in 0..20 {
        let n = 9;
        let m = 7;
        let st = random_state(n, &mut g);
        let meas = random_meas(m, n, &mut g);
        let d = st.mahalanobis(&meas).unwrap();
        let p = st.covariance();
        let mut s = meas.jacobian.mul(&p).mul_tr(&meas.jacobian);
        for i in 0..m {
            s[(i, i)] += meas.sigmas[i] * meas.sigmas[i];
        }
        let sol = tri::solve_spd(&s, &Mat::col_vec(&meas.residual)).unwrap();
        let mut oracle = 0.0;
        for i in 0..m {
            oracle += meas.residual[i] * sol[(i, 0)];
        }
        assert!((d - oracle).abs() / oracle.abs().max(1e-12) < 1e-10);
    }
}

#[test]
fn gate_accepts_zero_residual_and_rejects_outliers() {
    let table = srfvio::chi2::Chi2Table::new(0.95);
    assert!((table.threshold(2) - 5.991).abs() < 1e-3);

    let mut g = rng(17);
    let st = random_state(6, &mut g);
    let mut meas = random_meas(2, 6, &mut g);
    meas.residual = vec![0.0, 0.0];
    assert!(st.gate(&meas, &table, 1.0).unwrap());

    // a 10-sigma residual on a tight-noise measurement must be rejected
    let h = Mat::from_fn(2, 6, |i, j| if j == i { 1.0 } else { 0.0 });
    let sigma = 1e-3;
    let mut st_tight = random_state(6, &mut g);
    // shrink covariance so innovation is noise-dominated
    let tiny = st_tight.factor().scale(1e-4);
    st_tight = SqrtState::from_blocks(
        &[(BlockKind::Lin(6), BlockTag::Generic(0))],
        st_tight.mean().to_vec(),
        tri::qr_triangularize(&tiny).into_mat(),
    );
    let out = LinearizedMeasurement {
        residual: vec![10.0 * sigma, -10.0 * sigma],
        jacobian: h,
        sigmas: vec![sigma; 2],
        touched: vec![0..6],
    };
    assert!(!st_tight.gate(&out, &table, 1.0).unwrap());
}

#[test]
fn posterior_stays_positive_semidefinite_in_both_precisions() {
    let mut g = rng(18);
    for _ in 0..10 {
        let n = 8;
        let mut st = random_state(n, &mut g);
        let meas = random_meas(12, n, &mut g);
        st.update_llt(&meas).unwrap();
        let p = st.covariance();
        let trace: f64 = (0..n).map(|i| p[(i, i)]).sum();
        let shifted = p.add(&Mat::identity(n).scale(1e-14 * trace));
        assert!(tri::cholesky_lower(&shifted).is_ok());

        // single precision run of the same system
        let f32_factor = st.factor().map(|x| x as f32);
        let st32 = SqrtState::from_blocks(
            &[(BlockKind::Lin(n), BlockTag::Generic(0))],
            st.mean().iter().map(|&x| x as f32).collect(),
            f32_factor,
        );
        let p32 = st32.covariance();
        let tr32: f32 = (0..n).map(|i| p32[(i, i)]).sum();
        let shifted32 = p32.add(&Mat::identity(n).scale(1e-6 * tr32));
        assert!(tri::cholesky_lower(&shifted32).is_ok());
    }
}
