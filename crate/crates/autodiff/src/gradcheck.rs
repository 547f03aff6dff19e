//! Central finite differences, used as the reference for reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|)`, or 0 when both are below `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest elementwise relative error, skipping entries where `|analytic| <= floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > floor)
        .map(|(&a, &n)| rel_err(a, n, 0.0))
        .fold(0.0, f64::max)
}

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes agree")
}

/// Scalarizes `out` with fixed pseudo-random weights so every output
/// coordinate contributes to the checked gradient.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Var {
    if g.shape(out).is_empty() {
        return out;
    }
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wv = g.constant(g.shape(out).to_vec(), w).expect("shape of an existing node");
    let prod = g.mul(out, wv).expect("same shape");
    g.sum(prod)
}

/// Worst relative error between reverse-mode gradients of every input and
/// central differences (h = 1e-4).
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars);
        let loss = scalarize(&mut g, out);
        g.scalar_value(loss)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars);
    let loss = scalarize(&mut g, out);
    let grads = g.backward(loss).expect("scalar loss");
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[k].len()]);
        let numeric = numeric_grad(
            |x| {
                let mut ts = inputs.to_vec();
                ts[k] = x.clone();
                eval(&ts)
            },
            &inputs[k],
            1e-4,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-8));
    }
    worst
}

/// Finite-difference check of every differentiable operation of the graph,
/// in double precision. Returns `(operation, worst relative error)`.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let r = random_tensor;
    let x = r(&[2, 3, 4], 12);
    let m = r(&[4, 5], 17);
    let pair = [r(&[2, 3], 5), r(&[2, 3], 6)];
    let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
    let mut out = vec![
        ("matmul", grad_check(&[r(&[3, 4], 1), r(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add", grad_check(&pair, |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", grad_check(&pair, |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", grad_check(&pair, |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", grad_check(&pair[..1], |g, v| g.scale(v[0], -2.5))),
        ("gelu", grad_check(&pair[..1], |g, v| g.gelu(v[0]))),
        (
            "relu",
            grad_check(&[Tensor::new([4], vec![-0.7, -0.2, 0.3, 0.9]).expect("4 values")], |g, v| g.relu(v[0])),
        ),
        (
            "add_broadcast",
            grad_check(&[pair[0].clone(), r(&[3], 7)], |g, v| g.add_broadcast(v[0], v[1]).unwrap()),
        ),
        ("softmax", grad_check(&[r(&[3, 5], 8)], |g, v| g.softmax(v[0]))),
        (
            "layer_norm",
            grad_check(&[r(&[4, 6], 9), r(&[6], 10), r(&[6], 11)], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
            }),
        ),
        ("reshape", grad_check(&[x.clone()], |g, v| g.reshape(v[0], [6, 4]).unwrap())),
        ("transpose", grad_check(&[m.clone()], |g, v| g.transpose(v[0]).unwrap())),
        ("permute", grad_check(&[x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())),
        ("narrow", grad_check(&[x.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap())),
        ("gather_rows", grad_check(&[x.clone()], |g, v| g.gather_rows(v[0], &[1, 0, 1]).unwrap())),
        (
            "concat",
            grad_check(&[x.clone(), r(&[2, 1, 4], 13)], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        ),
        ("sum_axis", grad_check(&[x.clone()], |g, v| g.sum_axis(v[0], 1).unwrap())),
        ("mean_axis", grad_check(&[x.clone()], |g, v| g.mean_axis(v[0], 2).unwrap())),
        ("mean", grad_check(&[x.clone()], |g, v| g.mean(v[0]))),
        ("sum", grad_check(&[x], |g, v| g.sum(v[0]))),
        (
            "conv2d",
            grad_check(&[r(&[1, 3, 8, 8], 14), r(&[4, 3, 3, 3], 15), r(&[4], 16)], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
            }),
        ),
        ("l2_normalize", grad_check(&[m.clone()], |g, v| g.l2_normalize(v[0], 1e-12))),
        (
            "masked_logsumexp",
            grad_check(&[m.clone()], |g, v| g.masked_logsumexp(v[0], mask.clone()).unwrap()),
        ),
        (
            "cross_entropy",
            grad_check(&[m.clone()], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 1]).unwrap()),
        ),
        (
            "bce_with_logits",
            grad_check(&[r(&[5], 18)], |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()),
        ),
        ("mse", grad_check(&[m.clone(), r(&[4, 5], 19)], |g, v| g.mse(v[0], v[1]).unwrap())),
        (
            "cosine_similarity",
            grad_check(&[m, r(&[4, 5], 20)], |g, v| g.cosine_similarity(v[0], v[1], 1e-12).unwrap()),
        ),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { r(&[2, 4, 3], 3) } else { r(&[2, 3, 4], 3) };
        let b = if tb { r(&[2, 5, 4], 4) } else { r(&[2, 4, 5], 4) };
        out.push(("bmm", grad_check(&[a, b], |g, v| g.bmm(v[0], v[1], ta, tb).unwrap())));
    }
    out
}
