use digitwin_autodiff::gradcheck::{max_rel_err, numeric_grad};
use digitwin_autodiff::{Graph, Tensor};
use digitwin_models::{cltt_loss, window_groups, EmbeddingBatch, ModelError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct double-precision evaluation: for every row with a same-window
/// partner, −log(Σ_pos exp(cos/τ) / Σ_{k≠i} exp(cos/τ)), averaged.
fn brute_force(z: &[f64], rows: usize, dim: usize, groups: &[usize], tau: f64) -> f64 {
    let row = |i: usize| &z[i * dim..(i + 1) * dim];
    let cos = |i: usize, j: usize| {
        let (a, b) = (row(i), row(j));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..rows {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut has_pos = false;
        for k in 0..rows {
            if k == i {
                continue;
            }
            let e = (cos(i, k) / tau).exp();
            den += e;
            if groups[k] == groups[i] {
                num += e;
                has_pos = true;
            }
        }
        if has_pos {
            total += -(num / den).ln();
            anchors += 1;
        }
    }
    total / anchors as f64
}

fn loss_of(z: &[f64], rows: usize, dim: usize, groups: Vec<usize>, tau: f64) -> Result<f64, ModelError> {
    let mut g = Graph::<f64>::new();
    let zv = g.constant(vec![rows, dim], z.to_vec())?;
    let l = cltt_loss(&mut g, &EmbeddingBatch { z: zv, groups }, tau)?;
    Ok(g.scalar_value(l))
}

#[test]
fn matches_brute_force_on_1000_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..1000 {
        let window = 2 + trial % 2;
        let n_windows = rng.gen_range(1..=8);
        let dim = rng.gen_range(2..=16);
        let rows = n_windows * window;
        let z: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let groups = window_groups(n_windows, window);
        let got = loss_of(&z, rows, dim, groups.clone(), 0.5).unwrap();
        let want = brute_force(&z, rows, dim, &groups, 0.5);
        assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn all_identical_pool_of_four() {
    let z = [0.3, -1.2, 0.5].repeat(4);
    let l = loss_of(&z, 4, 3, vec![0, 0, 0, 1], 0.5).unwrap();
    assert!((l - 1.5f64.ln()).abs() < 1e-9, "{l}");
}

#[test]
fn one_positive_against_an_opposite_negative() {
    let z = [1.0, 2.0, 1.0, 2.0, -1.0, -2.0];
    let l = loss_of(&z, 3, 2, vec![0, 0, 1], 0.5).unwrap();
    let expect = -(2.0f64.exp() / (2.0f64.exp() + (-2.0f64).exp())).ln();
    assert!((l - expect).abs() < 1e-12);
    assert!((l - 0.0181).abs() < 5e-5);
}

#[test]
fn invalid_batches_are_rejected() {
    assert!(matches!(loss_of(&[1.0, 0.0], 1, 2, vec![0], 0.5), Err(ModelError::Contract(_))));
    assert!(matches!(loss_of(&[1.0, 0.0, 0.0, 1.0], 2, 2, vec![0, 1], 0.5), Err(ModelError::Contract(_))));
    assert!(matches!(loss_of(&[1.0, 0.0, 0.0, 1.0], 2, 2, vec![0, 0], 0.0), Err(ModelError::Config(_))));
    assert!(matches!(loss_of(&[1.0, 0.0, 0.0, 1.0], 2, 2, vec![0, 0, 1], 0.5), Err(ModelError::Contract(_))));
}

#[test]
fn window_groups_partition_rows() {
    assert_eq!(window_groups(3, 2), vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(window_groups(2, 3), vec![0, 0, 0, 1, 1, 1]);
}

fn batch_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..6, 2usize..=3, 2usize..8).prop_flat_map(|(n, w, d)| {
        (Just(n), Just(w), Just(d), prop::collection::vec(-3.0f64..3.0, n * w * d))
    })
}

proptest! {
    #[test]
    fn invariant_to_window_order((n, w, d, z) in batch_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let per = w * d;
        let permuted: Vec<f64> = order.iter().flat_map(|&k| z[k * per..(k + 1) * per].to_vec()).collect();
        let a = loss_of(&z, n * w, d, window_groups(n, w), 0.5).unwrap();
        let b = loss_of(&permuted, n * w, d, window_groups(n, w), 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn invariant_to_positive_scaling((n, w, d, z) in batch_strategy(), row in 0usize..100, c in 0.01f64..100.0) {
        let r = row % (n * w);
        let mut scaled = z.clone();
        scaled[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= c);
        let a = loss_of(&z, n * w, d, window_groups(n, w), 0.5).unwrap();
        let b = loss_of(&scaled, n * w, d, window_groups(n, w), 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn nonnegative((n, w, d, z) in batch_strategy(), tau in 0.05f64..2.0) {
        prop_assert!(loss_of(&z, n * w, d, window_groups(n, w), tau).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences((n, w, d, z) in batch_strategy()) {
        let rows = n * w;
        // l2 normalization is not differentiable at the origin.
        prop_assume!(z.chunks(d).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.01));
        let groups = window_groups(n, w);
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(vec![rows, d], z.clone()).unwrap().with_requires_grad(true);
        let zv = g.leaf(&x);
        let l = cltt_loss(&mut g, &EmbeddingBatch { z: zv, groups: groups.clone() }, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(zv).unwrap().to_vec();
        let numeric = numeric_grad(|t| loss_of(t.data(), rows, d, groups.clone(), 0.5).unwrap(), &x, 1e-5);
        // Tiny entries are dominated by finite-difference round-off; bound them absolutely.
        prop_assert!(max_rel_err(&analytic, &numeric, 1e-4) < 1e-6);
        prop_assert!(analytic.iter().zip(&numeric).all(|(a, n)| (a - n).abs() < 1e-7));
    }
}
