mod common;

use common::random;
use digitwin_autodiff::{Graph, Tensor};
use proptest::prelude::*;

fn eval<F: Fn(&mut Graph<f64>) -> digitwin_autodiff::Var>(f: F) -> Vec<f64> {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).to_vec()
}

#[test]
fn matmul_examples() {
    let out = eval(|g| {
        let a = g.constant([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    let out = eval(|g| {
        let a = g.constant([1, 2], vec![1.0, 0.0]).unwrap();
        let b = g.constant([2, 1], vec![2.0, 3.0]).unwrap();
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out, vec![2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant([2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant([2, 2], vec![0.0; 4]).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let sm = |x: Vec<f64>| {
        eval(|g| {
            let v = g.constant([x.len()], x.clone()).unwrap();
            g.softmax(v)
        })
    };
    assert_eq!(sm(vec![0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(sm(vec![1000.0, 1000.0]), vec![0.5, 0.5]);
    // Oracle: e^k / (e + e² + e³) evaluated in extended form.
    let e = std::f64::consts::E;
    let z = e + e * e + e * e * e;
    let expected = [e / z, e * e / z, e * e * e / z];
    for (a, b) in sm(vec![1.0, 2.0, 3.0]).iter().zip(expected) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn layer_norm_examples() {
    let ln = |x: Vec<f64>, gain: f64, bias: f64| {
        eval(|g| {
            let v = g.constant([1, x.len()], x.clone()).unwrap();
            let gn = g.constant([x.len()], vec![gain; x.len()]).unwrap();
            let bs = g.constant([x.len()], vec![bias; x.len()]).unwrap();
            g.layer_norm(v, gn, bs, 1e-5).unwrap()
        })
    };
    assert_eq!(ln(vec![5.0; 4], 1.0, 0.0), vec![0.0; 4]);
    assert_eq!(ln(vec![1.0, -2.0, 0.5, 3.0], 0.0, 0.7), vec![0.7; 4]);
    let row = random(&[1, 16], 3).into_data();
    let out = ln(row, 1.0, 0.0);
    let mean = out.iter().sum::<f64>() / 16.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn conv2d_examples() {
    let x = random(&[1, 1, 3, 3], 1);
    let out = eval(|g| {
        let xv = g.leaf(&x);
        let k = g.constant([1, 1, 1, 1], vec![1.0]).unwrap();
        g.conv2d(xv, k, None, 1, 0).unwrap()
    });
    assert_eq!(out, x.data());

    let mut g = Graph::<f64>::new();
    let xv = g.constant([1, 3, 8, 8], vec![0.0; 192]).unwrap();
    let k = g.leaf(&random(&[4, 3, 3, 3], 2));
    let y = g.conv2d(xv, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    assert!(g.value(y).iter().all(|&v| v == 0.0));
    assert!(g.conv2d(xv, k, None, 0, 1).is_err());
    let big = g.leaf(&random(&[1, 3, 11, 11], 3));
    assert!(g.conv2d(xv, big, None, 1, 1).is_err());
}

#[test]
fn repeated_construction_is_bit_identical() {
    let run = || {
        eval(|g| {
            let a = g.leaf(&random(&[7, 9], 4));
            let b = g.leaf(&random(&[9, 5], 5));
            let c = g.matmul(a, b).unwrap();
            let c = g.gelu(c);
            g.softmax(c)
        })
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn f32_and_f64_agree_on_matmul() {
    let a = random(&[6, 5], 6);
    let b = random(&[5, 4], 7);
    let mut g64 = Graph::<f64>::new();
    let (x, y) = (g64.leaf(&a), g64.leaf(&b));
    let c64 = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, y) = (g32.leaf(&a.cast()), g32.leaf(&b.cast()));
    let c32 = g32.matmul(x, y).unwrap();
    for (p, q) in g64.value(c64).iter().zip(g32.value(c32)) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let base = eval(|g| { let v = g.constant([n], row.clone()).unwrap(); g.softmax(v) });
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let moved = eval(|g| { let v = g.constant([n], shifted.clone()).unwrap(); g.softmax(v) });
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(base.iter().all(|&p| p >= 0.0));
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_shape_matches_data(shape in prop::collection::vec(1usize..5, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f32>::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(shape, vec![0.0; n + extra]).is_err());
    }
}
