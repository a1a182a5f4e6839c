use gsntk::io::*;
use gsntk::models::*;
use gsntk::rng::{gaussian_matrix, seeded};
use gsntk::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn round_trip(arrays: &[(String, DMatrix<f64>)]) -> Vec<(String, DMatrix<f64>)> {
    let mut buf = Vec::new();
    write_arrays(&mut buf, arrays).unwrap();
    read_arrays(buf.as_slice()).unwrap()
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn special_values_survive() {
    let m = DMatrix::from_row_slice(2, 3, &[0.1, -0.0, f64::MIN_POSITIVE / 4.0, f64::INFINITY, f64::NEG_INFINITY, 1e308]);
    let back = round_trip(&[("odd".into(), m.clone()), ("empty".into(), DMatrix::zeros(0, 4))]);
    assert_eq!(back[0].0, "odd");
    assert_eq!(bits(&back[0].1), bits(&m));
    assert_eq!(back[1].1.shape(), (0, 4));
    let nan = round_trip(&[("nan".into(), DMatrix::from_element(1, 1, f64::NAN))]);
    assert!(nan[0].1[(0, 0)].is_nan());
}

#[test]
fn model_parameters_round_trip_through_a_file() {
    let gru = Gru::xavier(&mut seeded(3), 3, 7, 2, 1.4);
    let dir = std::env::temp_dir().join(format!("gsntk-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("gru.txt");
    save_params(&path, &gru.params()).unwrap();
    let p = load_params(&path).unwrap();
    let mut restored = Gru::xavier(&mut seeded(99), 3, 7, 2, 1.0);
    restored.set_params(&p);
    assert_eq!(restored, gru);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn malformed_input_reports_the_line() {
    let cases = [
        ("nope\n", 1),
        ("gsntk-arrays 1\narray a 1 2\n1.0\n", 3),
        ("gsntk-arrays 1\narray a 1 1\nx\n", 3),
        ("gsntk-arrays 1\nmatrix a 1 1\n", 2),
        ("gsntk-arrays 1\narray a 2 1\n1\n", 4),
    ];
    for (text, line) in cases {
        match read_arrays(text.as_bytes()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(params_from_arrays(vec![("bogus".into(), DMatrix::zeros(1, 1))]).is_err());
    assert!(write_arrays(&mut Vec::new(), &[("a b".into(), DMatrix::zeros(1, 1))]).is_err());
}

proptest! {
    #[test]
    fn arrays_round_trip_bit_exactly(seed in any::<u64>(), rows in 0usize..5, cols in 1usize..5, scale in -300i32..300) {
        let m = gaussian_matrix(&mut seeded(seed), rows, cols) * 10f64.powi(scale);
        let back = round_trip(&[("m".into(), m.clone())]);
        prop_assert_eq!(bits(&back[0].1), bits(&m));
    }
}
