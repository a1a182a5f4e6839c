use nalgebra::DMatrix;

use gsntk::linop::*;
use gsntk::Error;
use gsntk::numerics::{dot, rel_err_mat};
use gsntk::rng::{gaussian_matrix, gaussian_vec, random_psd, seeded};

fn adjoint_gap(op: &LinOp, seed: u64, pairs: usize) -> f64 {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let u = gaussian_vec(&mut rng, op.domain().dim());
        let v = gaussian_vec(&mut rng, op.codomain().dim());
        let lhs = dot(&op.apply(&u), &v);
        let rhs = dot(&u, &op.apply_adjoint(&v));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    worst
}

/// Kronecker product by an explicit double loop.
fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(a.nrows() * b.nrows(), a.ncols() * b.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            for p in 0..b.nrows() {
                for q in 0..b.ncols() {
                    k[(i * b.nrows() + p, j * b.ncols() + q)] = a[(i, j)] * b[(p, q)];
                }
            }
        }
    }
    k
}

#[test]
fn identity_behaves() {
    let id = LinOp::identity(DomainShape::flat(3));
    assert_eq!(id.apply(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    let big = LinOp::identity(DomainShape::flat(100)).materialize().unwrap();
    assert_eq!(big.trace(), 100.0);
    assert!(id.psd_hint());
    assert_eq!(
        LinOp::identity(DomainShape::flat(4)).materialize().unwrap(),
        DMatrix::identity(4, 4)
    );
}

#[test]
fn identity_is_neutral_under_composition() {
    let a = gaussian_matrix(&mut seeded(1), 4, 4);
    let op = LinOp::dense(a.clone()).unwrap();
    let id = LinOp::identity(DomainShape::flat(4));
    assert_eq!(id.compose(&op).unwrap().materialize().unwrap(), a);
    assert_eq!(op.compose(&id).unwrap().materialize().unwrap(), a);
}

#[test]
fn dense_wrap_round_trip_and_permutation() {
    let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let op = LinOp::dense(m.clone()).unwrap();
    assert_eq!(op.apply(&[1.0, 0.0]), vec![0.0, 1.0]);
    assert_eq!(op.materialize().unwrap(), m);
}

#[test]
fn dense_wrap_rejects_non_finite() {
    let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
    assert!(matches!(LinOp::dense(m), Err(Error::NonFinite { index: 1 })));
}

#[test]
fn psd_dense_has_nonnegative_quadratic_form() {
    let mut rng = seeded(2);
    let m = random_psd(&mut rng, 6, 3);
    let op = LinOp::dense_psd(m).unwrap();
    assert!(op.psd_hint());
    for _ in 0..100 {
        let u = gaussian_vec(&mut rng, 6);
        let q = dot(&u, &op.apply(&u));
        assert!(q >= -1e-10 * dot(&u, &u));
    }
}

#[test]
fn compose_matches_matrix_product() {
    let mut rng = seeded(3);
    let a = gaussian_matrix(&mut rng, 5, 5);
    let b = gaussian_matrix(&mut rng, 5, 5);
    let ab = LinOp::dense(a.clone())
        .unwrap()
        .compose(&LinOp::dense(b.clone()).unwrap())
        .unwrap();
    assert!(rel_err_mat(&ab.materialize().unwrap(), &(&a * &b)) < 1e-14);
    assert!(adjoint_gap(&ab, 4, 10) < 1e-10);
}

#[test]
fn compose_shape_mismatch_names_both_shapes() {
    let a = LinOp::identity(DomainShape::state(2, 3, 4));
    let b = LinOp::identity(DomainShape::state(3, 2, 4));
    let msg = a.compose(&b).unwrap_err().to_string();
    assert!(msg.contains("[batch 3, time 2, feature 4]"), "{msg}");
    assert!(msg.contains("[batch 2, time 3, feature 4]"), "{msg}");
}

#[test]
fn adjoint_is_transpose_and_involution() {
    let a = gaussian_matrix(&mut seeded(5), 3, 4);
    let op = LinOp::dense(a.clone()).unwrap();
    assert_eq!(op.adjoint().materialize().unwrap(), a.transpose());
    assert_eq!(op.adjoint().adjoint().materialize().unwrap(), a);
    let id = LinOp::identity(DomainShape::flat(3));
    assert_eq!(
        id.adjoint().materialize().unwrap(),
        DMatrix::<f64>::identity(3, 3)
    );
}

#[test]
fn scalar_tensor_identity() {
    let two = LinOp::dense(DMatrix::from_element(1, 1, 2.0)).unwrap();
    let op = two.tensor_product(&LinOp::identity(DomainShape::flat(3)));
    assert_eq!(op.materialize().unwrap(), DMatrix::identity(3, 3) * 2.0);
}

#[test]
fn tensor_product_matches_explicit_kronecker() {
    let mut rng = seeded(6);
    let a = gaussian_matrix(&mut rng, 3, 3);
    let b = gaussian_matrix(&mut rng, 2, 2);
    let op = LinOp::dense(a.clone())
        .unwrap()
        .tensor_product(&LinOp::dense(b.clone()).unwrap());
    assert!(rel_err_mat(&op.materialize().unwrap(), &kron(&a, &b)) < 1e-14);
    assert!(adjoint_gap(&op, 7, 10) < 1e-10);

    // rectangular factors as well
    let c = gaussian_matrix(&mut rng, 2, 3);
    let d = gaussian_matrix(&mut rng, 4, 2);
    let op = LinOp::dense(c.clone())
        .unwrap()
        .tensor_product(&LinOp::dense(d.clone()).unwrap());
    assert!(rel_err_mat(&op.materialize().unwrap(), &kron(&c, &d)) < 1e-14);
}

#[test]
fn tensor_product_factorizes_rank_one_inputs() {
    let mut rng = seeded(8);
    let a = gaussian_matrix(&mut rng, 3, 3);
    let b = gaussian_matrix(&mut rng, 2, 2);
    let u = gaussian_vec(&mut rng, 3);
    let v = gaussian_vec(&mut rng, 2);
    let uv: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
    let op = LinOp::dense(a.clone())
        .unwrap()
        .tensor_product(&LinOp::dense(b.clone()).unwrap());
    let au = &a * nalgebra::DVector::from_vec(u);
    let bv = &b * nalgebra::DVector::from_vec(v);
    let expected: Vec<f64> = au.iter().flat_map(|x| bv.iter().map(move |y| x * y)).collect();
    assert!(gsntk::numerics::rel_err(&op.apply(&uv), &expected) < 1e-12);
}

#[test]
fn tensor_product_like_checks_layout() {
    let k = LinOp::identity(DomainShape::state(2, 3, 4));
    let vv = LinOp::dense(DMatrix::identity(6, 6)).unwrap();
    let core = vv
        .tensor_product_like(&LinOp::identity(DomainShape::flat(4)), &k)
        .unwrap();
    assert_eq!(core.domain(), k.domain());
    assert!(vv
        .tensor_product_like(&LinOp::identity(DomainShape::flat(3)), &k)
        .is_err());
}

#[test]
fn partial_average_of_kronecker() {
    let mut rng = seeded(9);
    let a = gaussian_matrix(&mut rng, 3, 3);
    let b = gaussian_matrix(&mut rng, 4, 4);
    let op = LinOp::dense(a.clone())
        .unwrap()
        .tensor_product(&LinOp::dense(b.clone()).unwrap());
    let reduced = op.partial_average(&[1]).unwrap().materialize().unwrap();
    let expected = &a * (b.trace() / 4.0);
    assert!(rel_err_mat(&reduced, &expected) < 1e-14);
}

#[test]
fn partial_average_of_identity() {
    let id = LinOp::identity(DomainShape::state(2, 3, 4));
    let r = id.partial_average(&[2]).unwrap();
    assert_eq!(r.domain(), &DomainShape::batch_time(2, 3));
    assert_eq!(r.materialize().unwrap(), DMatrix::identity(6, 6));
}

/// Partial trace of the materialized matrix, computed from the 6-tensor view.
fn dense_partial_trace(m: &DMatrix<f64>, extents: &[usize], traced: &[usize]) -> DMatrix<f64> {
    let dim: usize = extents.iter().product();
    let kept: Vec<usize> = (0..extents.len()).filter(|a| !traced.contains(a)).collect();
    let rdim: usize = kept.iter().map(|&a| extents[a]).product();
    let coords = |mut flat: usize| {
        let mut c = vec![0; extents.len()];
        for ax in (0..extents.len()).rev() {
            c[ax] = flat % extents[ax];
            flat /= extents[ax];
        }
        c
    };
    let reduce = |c: &[usize], axes: &[usize]| axes.iter().fold(0, |acc, &a| acc * extents[a] + c[a]);
    let mut out = DMatrix::zeros(rdim, rdim);
    for row in 0..dim {
        let cr = coords(row);
        for col in 0..dim {
            let cc = coords(col);
            if traced.iter().all(|&a| cr[a] == cc[a]) {
                out[(reduce(&cr, &kept), reduce(&cc, &kept))] += m[(row, col)];
            }
        }
    }
    out
}

#[test]
fn partial_average_matches_materialized_partial_trace() {
    let mut rng = seeded(10);
    let shape = DomainShape::state(2, 3, 2);
    let m = random_psd(&mut rng, 12, 12);
    let op = LinOp::dense_shaped(m.clone(), shape.clone(), shape, true).unwrap();
    for traced in [vec![2], vec![0, 1], vec![1], vec![0, 2]] {
        let extent: usize = traced.iter().map(|&a| [2, 3, 2][a]).product();
        let expected = dense_partial_trace(&m, &[2, 3, 2], &traced) / extent as f64;
        let got = op.partial_average(&traced).unwrap().materialize().unwrap();
        assert!(rel_err_mat(&got, &expected) < 1e-10, "traced {traced:?}");
        let (eigs, _) = gsntk::numerics::sym_eig_desc(&got);
        assert!(*eigs.last().unwrap() >= -1e-10);
    }
}

#[test]
fn partial_average_over_everything_is_normalized_trace() {
    let mut rng = seeded(11);
    let shape = DomainShape::state(2, 2, 3);
    let m = gaussian_matrix(&mut rng, 12, 12);
    let op = LinOp::dense_shaped(m.clone(), shape.clone(), shape, false).unwrap();
    let r = op.partial_average(&[0, 1, 2]).unwrap().materialize().unwrap();
    assert_eq!(r.shape(), (1, 1));
    assert!((r[(0, 0)] - m.trace() / 12.0).abs() < 1e-12);
}

#[test]
fn partial_average_rejects_non_square() {
    let op = LinOp::dense(DMatrix::zeros(2, 3)).unwrap();
    assert!(matches!(op.partial_average(&[0]), Err(Error::NotSquare { .. })));
}

#[test]
fn materialize_cap_is_enforced() {
    let id = LinOp::identity(DomainShape::flat(5000));
    match id.materialize() {
        Err(Error::MaterializeCap { cap, .. }) => assert_eq!(cap, DEFAULT_MATERIALIZE_CAP),
        other => panic!("expected cap error, got {other:?}"),
    }
    assert!(id.materialize_with_cap(10).is_err());
}

#[test]
fn sum_scale_and_direct_sum_materialize_homomorphically() {
    let mut rng = seeded(12);
    let a = gaussian_matrix(&mut rng, 3, 3);
    let b = gaussian_matrix(&mut rng, 3, 3);
    let c = gaussian_matrix(&mut rng, 2, 2);
    let oa = LinOp::dense(a.clone()).unwrap();
    let ob = LinOp::dense(b.clone()).unwrap();
    let s = LinOp::sum(&[oa.clone(), ob.scale(2.0)]).unwrap();
    assert!(rel_err_mat(&s.materialize().unwrap(), &(&a + &b * 2.0)) < 1e-14);
    let ds = LinOp::direct_sum(&[oa, LinOp::dense(c.clone()).unwrap()]).unwrap();
    let m = ds.materialize().unwrap();
    assert_eq!(m.view((0, 0), (3, 3)), a.view((0, 0), (3, 3)));
    assert_eq!(m.view((3, 3), (2, 2)), c.view((0, 0), (2, 2)));
    assert_eq!(m[(0, 4)], 0.0);
    assert!(adjoint_gap(&ds, 13, 10) < 1e-10);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn constructed_operators_pair_with_their_adjoints(seed in 0u64..1000, n in 1usize..5, m in 1usize..5) {
            let mut rng = seeded(seed);
            let a = LinOp::dense(gaussian_matrix(&mut rng, n, m)).unwrap();
            let b = LinOp::dense(gaussian_matrix(&mut rng, m, n)).unwrap();
            let c = LinOp::dense(gaussian_matrix(&mut rng, 2, 3)).unwrap();
            let ops = [
                a.compose(&b).unwrap(),
                a.adjoint(),
                a.tensor_product(&c),
                LinOp::sum(&[a.compose(&b).unwrap(), LinOp::identity(DomainShape::flat(n))]).unwrap(),
            ];
            for op in &ops {
                prop_assert!(adjoint_gap(op, seed + 1, 10) < 1e-10);
            }
        }

        #[test]
        fn materialize_is_a_homomorphism(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let a = gaussian_matrix(&mut rng, 3, 3);
            let b = gaussian_matrix(&mut rng, 3, 3);
            let oa = LinOp::dense(a.clone()).unwrap();
            let ob = LinOp::dense(b.clone()).unwrap();
            prop_assert!(rel_err_mat(&oa.compose(&ob).unwrap().materialize().unwrap(), &(&a * &b)) < 1e-13);
            prop_assert_eq!(oa.adjoint().materialize().unwrap(), a.transpose());
            prop_assert!(rel_err_mat(&oa.tensor_product(&ob).materialize().unwrap(), &kron(&a, &b)) < 1e-13);
            prop_assert!(rel_err_mat(&LinOp::sum(&[oa, ob]).unwrap().materialize().unwrap(), &(&a + &b)) < 1e-14);
        }
    }
}
