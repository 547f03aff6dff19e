use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{EvalError, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation / √n); 0 for n < 2.
pub fn std_err(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: u32,
}

/// One-degree-of-freedom goodness-of-fit test of `successes` out of
/// `trials` against success probability `null_p`.
pub fn chi_square_test(successes: u64, trials: u64, null_p: f64) -> Result<ChiSquare> {
    if trials == 0 {
        return Err(EvalError::Contract("chi-square test needs at least one trial".into()));
    }
    if successes > trials {
        return Err(EvalError::Contract(format!("{successes} successes out of {trials} trials")));
    }
    if !(null_p > 0.0 && null_p < 1.0) {
        return Err(EvalError::Contract(format!("null probability {null_p} outside (0, 1)")));
    }
    let n = trials as f64;
    let cells = [
        (successes as f64, n * null_p),
        ((trials - successes) as f64, n * (1.0 - null_p)),
    ];
    let statistic = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum::<f64>();
    let dist = ChiSquared::new(1.0).expect("one degree of freedom is valid");
    Ok(ChiSquare {
        statistic,
        p_value: dist.sf(statistic),
        dof: 1,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns 0 when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}
