use gsntk::linop::{DomainShape, LinOp};
use gsntk::numerics::sym_eig_desc;
use gsntk::rng::{gaussian_matrix, random_psd, seeded};
use gsntk::rnla::*;
use gsntk::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn identity_trace_is_exact_with_full_sketch() {
    let id = LinOp::identity(DomainShape::flat(100));
    let cfg = ProbeConfig::new(100, 8, 1).unwrap();
    assert!((hutchpp_trace(&id, &cfg).unwrap() - 100.0).abs() < 1e-9);
    let small = ProbeConfig::default();
    assert!(rel(hutchpp_trace(&id, &small).unwrap(), 100.0) < 0.01);
}

#[test]
fn low_rank_trace_is_exact() {
    let v = gaussian_matrix(&mut seeded(3), 40, 3);
    let op = LinOp::dense_psd(&v * v.transpose()).unwrap();
    let cfg = ProbeConfig::new(8, 4, 9).unwrap();
    let frob2 = v.norm_squared();
    assert!(rel(hutchpp_trace(&op, &cfg).unwrap(), frob2) < 1e-10);
}

#[test]
fn trace_of_random_psd_within_two_percent() {
    let m = random_psd(&mut seeded(4), 500, 500);
    let exact = m.trace();
    let op = LinOp::dense_psd(m).unwrap();
    let hits = (0..20)
        .filter(|&s| {
            let cfg = ProbeConfig::new(32, 32, s).unwrap();
            rel(hutchpp_trace(&op, &cfg).unwrap(), exact) < 0.02
        })
        .count();
    assert!(hits >= 18, "{hits}/20 within 2%");
}

#[test]
fn trace_requires_square() {
    let op = LinOp::dense(DMatrix::zeros(2, 3)).unwrap();
    assert!(matches!(
        hutchpp_trace(&op, &ProbeConfig::default()),
        Err(Error::NotSquare { .. })
    ));
}

#[test]
fn estimates_are_bit_identical_for_a_seed() {
    let m = random_psd(&mut seeded(5), 200, 200);
    let op = LinOp::dense_psd(m).unwrap();
    let cfg = ProbeConfig::new(8, 8, 17).unwrap();
    let a = hutchpp_trace(&op, &cfg).unwrap();
    let b = hutchpp_trace(&op, &cfg).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn frobenius_norms() {
    let cfg = ProbeConfig::default();
    let m = LinOp::dense(DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0])).unwrap();
    assert!((frobenius_norm(&m, &cfg).unwrap() - 5.0).abs() < 1e-12);
    let id = LinOp::identity(DomainShape::flat(9));
    assert!((frobenius_norm(&id, &cfg).unwrap() - 3.0).abs() < 1e-12);
    let a = gaussian_matrix(&mut seeded(6), 50, 50);
    let est = frobenius_norm(&LinOp::dense(a.clone()).unwrap(), &cfg).unwrap();
    assert!(rel(est, a.norm()) < 0.02);
}

#[test]
fn cosine_examples() {
    let cfg = ProbeConfig::default();
    let a = LinOp::dense(gaussian_matrix(&mut seeded(7), 30, 30)).unwrap();
    assert_eq!(op_cosine(&a, &a, &cfg).unwrap(), 1.0);

    let id = LinOp::identity(DomainShape::flat(2));
    let flip = LinOp::dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
    assert!(op_cosine(&id, &flip, &cfg).unwrap().abs() < 1e-12);

    let mut rng = seeded(8);
    let pa = random_psd(&mut rng, 20, 20);
    let pb = random_psd(&mut rng, 20, 20);
    let exact = (&pa * pb.transpose()).trace() / (pa.norm() * pb.norm());
    let oa = LinOp::dense_psd(pa).unwrap();
    let ob = LinOp::dense_psd(pb).unwrap();
    let est = op_cosine(&oa, &ob, &cfg).unwrap();
    assert!(rel(est, exact) < 0.02);
    assert_eq!(est, op_cosine(&ob, &oa, &cfg).unwrap());
}

#[test]
fn cosine_of_zero_operator_errors() {
    let z = LinOp::dense(DMatrix::zeros(3, 3)).unwrap();
    let id = LinOp::identity(DomainShape::flat(3));
    assert!(matches!(
        op_cosine(&z, &id, &ProbeConfig::default()),
        Err(Error::ZeroNorm)
    ));
}

#[test]
fn cosine_is_invariant_under_kronecker_with_identity() {
    let cfg = ProbeConfig::default();
    let mut rng = seeded(10);
    let a = gaussian_matrix(&mut rng, 4, 4);
    let b = gaussian_matrix(&mut rng, 4, 4);
    let oa = LinOp::dense(a).unwrap();
    let ob = LinOp::dense(b).unwrap();
    let id = LinOp::identity(DomainShape::flat(3));
    let plain = op_cosine(&oa, &ob, &cfg).unwrap();
    let lifted = op_cosine(&oa.tensor_product(&id), &ob.tensor_product(&id), &cfg).unwrap();
    assert!((plain - lifted).abs() < 1e-10);
}

#[test]
fn diagonal_topk() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 4.0, 3.0, 2.0, 1.0]));
    let res = topk_eigs(&LinOp::dense_psd(d).unwrap(), 2, &ProbeConfig::default()).unwrap();
    assert!((res.summary.eigenvalues[0] - 5.0).abs() < 1e-10);
    assert!((res.summary.eigenvalues[1] - 4.0).abs() < 1e-10);
    assert!((res.vectors[(0, 0)].abs() - 1.0).abs() < 1e-8);
    assert!((res.vectors[(1, 1)].abs() - 1.0).abs() < 1e-8);
}

#[test]
fn low_rank_topk_matches_singular_values() {
    let v = gaussian_matrix(&mut seeded(11), 10, 3);
    let op = LinOp::dense_psd(&v * v.transpose()).unwrap();
    let res = topk_eigs(&op, 4, &ProbeConfig::default()).unwrap();
    let mut sv: Vec<f64> = v.singular_values().iter().map(|s| s * s).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let l = &res.summary.eigenvalues;
    for i in 0..3 {
        assert!(rel(l[i], sv[i]) < 1e-8);
    }
    assert!(l[3].abs() <= 1e-8 * l[0]);
}

#[test]
fn topk_converges_on_large_operator() {
    let m = random_psd(&mut seeded(12), 300, 40);
    let (dense, _) = sym_eig_desc(&m);
    let op = LinOp::dense_psd(m).unwrap();
    let res = topk_eigs(&op, 6, &ProbeConfig::default()).unwrap();
    for i in 0..6 {
        assert!(rel(res.summary.eigenvalues[i], dense[i]) < 1e-6);
    }
    let x = &res.vectors;
    let gram = x.transpose() * x;
    assert!((gram - DMatrix::identity(6, 6)).amax() < 1e-8);
    let l1 = res.summary.eigenvalues[0];
    for i in 0..6 {
        let av = DMatrix::from_column_slice(300, 1, &op.apply(x.column(i).as_slice()));
        let r = av - x.column(i) * res.summary.eigenvalues[i];
        assert!(r.norm() <= 1e-6 * l1);
    }
}

#[test]
fn topk_rejects_indefinite() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0, 0.5]));
    let res = topk_eigs(&LinOp::dense(d).unwrap(), 1, &ProbeConfig::default());
    assert!(matches!(res, Err(Error::NotPsd { .. })));
}

#[test]
fn effective_rank_examples() {
    let flat = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    assert!((effective_rank(&flat, RankMethod::ParticipationRatio) - 4.0).abs() < 1e-12);
    assert_eq!(effective_rank(&flat, RankMethod::Variance95), 4.0);
    assert_eq!(effective_rank(&[1.0, 0.0, 0.0], RankMethod::ParticipationRatio), 1.0);
    assert!((effective_rank(&[4.0, 1.0], RankMethod::ParticipationRatio) - 25.0 / 17.0).abs() < 1e-12);
    assert_eq!(effective_rank(&[0.0, 0.0], RankMethod::ParticipationRatio), 0.0);
    assert_eq!(effective_rank(&[0.0, 0.0], RankMethod::Variance95), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn summary_invariants(vals in proptest::collection::vec(0.0f64..10.0, 1..20)) {
        let mut v = vals;
        v.sort_by(|a, b| b.total_cmp(a));
        let s = SpectrumSummary::from_eigenvalues(v.clone());
        let total: f64 = v.iter().sum();
        for w in s.cumulative_variance.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-15);
        }
        if total > 0.0 {
            prop_assert_eq!(*s.cumulative_variance.last().unwrap(), 1.0);
            prop_assert!(s.effective_rank_pr >= 1.0 - 1e-12);
            prop_assert!(s.effective_rank_pr <= v.len() as f64 + 1e-9);
            prop_assert!(s.effective_rank_95 >= 1 && s.effective_rank_95 <= v.len());
        }
    }

    #[test]
    fn low_rank_exactness(seed in 0u64..500, r in 1usize..8) {
        let v = gaussian_matrix(&mut seeded(seed), 30, r);
        let op = LinOp::dense_psd(&v * v.transpose()).unwrap();
        let cfg = ProbeConfig::new(8, 2, seed).unwrap();
        prop_assert!(rel(hutchpp_trace(&op, &cfg).unwrap(), v.norm_squared()) < 1e-9);
    }

    #[test]
    fn topk_matches_dense(seed in 0u64..500) {
        let m = random_psd(&mut seeded(seed), 25, 25);
        let (dense, _) = sym_eig_desc(&m);
        let res = topk_eigs(&LinOp::dense_psd(m).unwrap(), 3, &ProbeConfig::default()).unwrap();
        for i in 0..3 {
            prop_assert!(rel(res.summary.eigenvalues[i], dense[i]) < 1e-6);
        }
    }
}
