//! Linear read-out of object identity from frozen features, cross-validated
//! over viewpoint ranges.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::stats::{mean, std_err};

pub const NUM_VIEWPOINTS: u8 = 12;

/// Principal directions with variance below this fraction of the largest are
/// dropped before whitening.
const WHITEN_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Train on 11 viewpoint ranges, test on the held-out one.
    Train11,
    /// Train on a single viewpoint range, test on the other 11.
    Train1,
}

impl ProbeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::Train11 => "train11",
            ProbeMode::Train1 => "train1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// The viewpoint range this fold is keyed by (held out or trained on).
    pub key: u8,
    pub train: Vec<u8>,
    pub test: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSplit {
    pub mode: ProbeMode,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl ProbeSplit {
    /// One fold per viewpoint range; the seed shuffles the fold order and
    /// the viewpoint lists within each fold.
    pub fn new(mode: ProbeMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<u8> = (0..NUM_VIEWPOINTS).collect();
        keys.shuffle(&mut rng);
        let folds = keys
            .into_iter()
            .map(|key| {
                let mut rest: Vec<u8> = (0..NUM_VIEWPOINTS).filter(|&v| v != key).collect();
                rest.shuffle(&mut rng);
                match mode {
                    ProbeMode::Train11 => Fold {
                        key,
                        train: rest,
                        test: vec![key],
                    },
                    ProbeMode::Train1 => Fold {
                        key,
                        train: vec![key],
                        test: rest,
                    },
                }
            })
            .collect();
        Self { mode, seed, folds }
    }

    /// Sample indices of each fold's train and test sets.
    pub fn assign(&self, viewpoints: &[u8]) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.folds
            .iter()
            .map(|f| {
                let pick = |set: &[u8]| {
                    (0..viewpoints.len())
                        .filter(|&i| set.contains(&viewpoints[i]))
                        .collect::<Vec<_>>()
                };
                (pick(&f.train), pick(&f.test))
            })
            .collect()
    }

    /// Errors if any fold's train and test samples share a viewpoint range,
    /// if the folds do not partition the ranges, or if a sample is used twice.
    pub fn audit(&self, viewpoints: &[u8]) -> Result<()> {
        let mut keys: Vec<u8> = self.folds.iter().map(|f| f.key).collect();
        keys.sort_unstable();
        if keys != (0..NUM_VIEWPOINTS).collect::<Vec<_>>() {
            return Err(EvalError::Leakage("folds do not cover each viewpoint range once".into()));
        }
        for (k, (f, (train, test))) in self.folds.iter().zip(self.assign(viewpoints)).enumerate() {
            let mut all: Vec<u8> = f.train.iter().chain(&f.test).copied().collect();
            all.sort_unstable();
            if all != (0..NUM_VIEWPOINTS).collect::<Vec<_>>() {
                return Err(EvalError::Leakage(format!("fold {k} does not partition the viewpoint ranges")));
            }
            let train_vps: std::collections::BTreeSet<u8> = train.iter().map(|&i| viewpoints[i]).collect();
            if let Some(&i) = test.iter().find(|&&i| train_vps.contains(&viewpoints[i])) {
                return Err(EvalError::Leakage(format!(
                    "fold {k}: test sample {i} shares viewpoint {} with training data",
                    viewpoints[i]
                )));
            }
            if train.iter().any(|i| test.contains(i)) {
                return Err(EvalError::Leakage(format!("fold {k}: a sample is in both sets")));
            }
        }
        Ok(())
    }
}

/// Row-major features with binary object labels and viewpoint ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub viewpoints: Vec<u8>,
}

impl ProbeData {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<u8>, viewpoints: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        if dim == 0 || features.len() != n * dim || viewpoints.len() != n {
            return Err(EvalError::Config(format!(
                "{} feature values, {n} labels and {} viewpoints do not match width {dim}",
                features.len(),
                viewpoints.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) || viewpoints.iter().any(|&v| v >= NUM_VIEWPOINTS) {
            return Err(EvalError::Config("labels must be 0/1 and viewpoints 0..12".into()));
        }
        Ok(Self {
            dim,
            features,
            labels,
            viewpoints,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Stop once the relative drop in training loss over one step is below this.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-7,
            l2: 1e-4,
        }
    }
}

/// Logistic-regression weights over standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl LinearProbe {
    /// Full-batch gradient descent on mean binary cross-entropy (+ L2).
    pub fn fit(data: &ProbeData, rows: &[usize], cfg: &ProbeConfig) -> Result<Self> {
        let d = data.dim;
        let n = rows.len();
        let positives = rows.iter().filter(|&&i| data.labels[i] == 1).count();
        if positives == 0 || positives == n {
            return Err(EvalError::Config("probe training set contains a single class".into()));
        }
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, &x) in mean.iter_mut().zip(data.row(i)) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for &i in rows {
            for ((v, &x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x as f64 - m).powi(2);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect();
        let x: Vec<f64> = rows
            .iter()
            .flat_map(|&i| {
                data.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((&v, m), s)| (v as f64 - m) * s)
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|&i| data.labels[i] as f64).collect();

        // Gradient descent runs on PCA-whitened coordinates, where the data
        // covariance is the identity and the logistic curvature is at most 1/4.
        let (proj, k) = whitening(&x, n, d);
        let xw: Vec<f64> = x
            .chunks(d)
            .flat_map(|xr| {
                (0..k).map(|c| xr.iter().enumerate().map(|(j, a)| a * proj[j * k + c]).sum::<f64>())
            })
            .collect();
        let lr = 1.0 / (0.25 + cfg.l2);

        let mut u = vec![0.0; k];
        let mut b = 0.0;
        let mut prev = f64::INFINITY;
        let mut iterations = 0;
        let mut grad = vec![0.0; k];
        for it in 0..cfg.max_iters {
            iterations = it + 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            let mut loss = 0.0;
            for (r, xr) in xw.chunks(k.max(1)).take(n).enumerate() {
                let z = b + xr.iter().zip(&u).map(|(a, c)| a * c).sum::<f64>();
                loss += softplus(z) - y[r] * z;
                let e = sigmoid(z) - y[r];
                gb += e;
                for (g, &a) in grad.iter_mut().zip(xr) {
                    *g += e * a;
                }
            }
            loss = loss / n as f64 + 0.5 * cfg.l2 * u.iter().map(|v| v * v).sum::<f64>();
            for (ui, g) in u.iter_mut().zip(&grad) {
                *ui -= lr * (g / n as f64 + cfg.l2 * *ui);
            }
            b -= lr * gb / n as f64;
            if (prev - loss).abs() <= cfg.tolerance * prev.abs().max(1e-12) {
                break;
            }
            prev = loss;
        }
        let w: Vec<f64> = (0..d)
            .map(|j| (0..k).map(|c| proj[j * k + c] * u[c]).sum())
            .collect();
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
            iterations,
        })
    }

    pub fn logit(&self, features: &[f32]) -> f64 {
        self.bias
            + features
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((&v, m), s), w)| (v as f64 - m) * s * w)
                .sum::<f64>()
    }

    pub fn accuracy(&self, data: &ProbeData, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let correct = rows
            .iter()
            .filter(|&&i| (self.logit(data.row(i)) > 0.0) == (data.labels[i] == 1))
            .count();
        correct as f64 / rows.len() as f64
    }
}

/// Row-major `[d, k]` map from standardised features onto the `k`
/// principal directions of `xᵀx / n` above a relative floor, each scaled to
/// unit variance.
fn whitening(x: &[f64], n: usize, d: usize) -> (Vec<f64>, usize) {
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for xr in x.chunks(d.max(1)).take(n) {
        let v = DVector::from_column_slice(xr);
        cov.syger(1.0 / n as f64, &v, &v, 1.0);
    }
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..d)
        .filter(|&i| eig.eigenvalues[i] > WHITEN_FLOOR * top && eig.eigenvalues[i] > 0.0)
        .collect();
    let k = keep.len();
    let mut proj = vec![0.0; d * k];
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt().recip();
        for j in 0..d {
            proj[j * k + c] = eig.eigenvectors[(j, i)] * s;
        }
    }
    (proj, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub seed: u64,
    /// Viewpoint key of each fold, in the order of `fold_accuracies`.
    pub fold_keys: Vec<u8>,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    pub chance: f64,
}

/// Trains one probe per fold on that fold's training viewpoints and scores
/// it on the held-out viewpoints. Folds run in parallel; results are kept in
/// fold order.
pub fn train_linear_probe(data: &ProbeData, split: &ProbeSplit, cfg: &ProbeConfig) -> Result<ProbeReport> {
    split.audit(&data.viewpoints)?;
    let assignments = split.assign(&data.viewpoints);
    let accs = assignments
        .par_iter()
        .map(|(train, test)| {
            if test.is_empty() {
                return Err(EvalError::Config("a fold has no test samples".into()));
            }
            Ok(LinearProbe::fit(data, train, cfg)?.accuracy(data, test))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ProbeReport {
        mode: split.mode,
        seed: split.seed,
        fold_keys: split.folds.iter().map(|f| f.key).collect(),
        mean: mean(&accs),
        std_err: std_err(&accs),
        fold_accuracies: accs,
        chance: 0.5,
    })
}
