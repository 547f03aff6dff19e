//! Contrastive learning through time.
//!
//! Embeddings from the same temporal window are positives for each other.
//! For an anchor `i` with positives `P(i)`:
//!
//! ```text
//! loss_i = -log( Σ_{p ∈ P(i)} exp(sim(z_i, z_p)/τ) / Σ_{k ≠ i} exp(sim(z_i, z_k)/τ) )
//! ```
//!
//! where `sim` is cosine similarity and the denominator runs over every
//! other embedding in the batch. The loss is the mean over anchors; rows
//! without any positive are negatives only.

use digitwin_autodiff::{Float, Graph, Var};

use crate::error::{ModelError, Result};
use crate::nn::NORM_EPS;

/// Projected embeddings `z: [R, D]` with a window id per row.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub z: Var,
    pub groups: Vec<usize>,
}

impl EmbeddingBatch {
    /// Rows laid out window by window: rows `k·window .. (k+1)·window` form window `k`.
    pub fn windows(z: Var, n_windows: usize, window: usize) -> Self {
        Self {
            z,
            groups: window_groups(n_windows, window),
        }
    }
}

pub fn window_groups(n_windows: usize, window: usize) -> Vec<usize> {
    (0..n_windows * window).map(|r| r / window.max(1)).collect()
}

pub fn cltt_loss<T: Float>(g: &mut Graph<T>, batch: &EmbeddingBatch, tau: f64) -> Result<Var> {
    let shape = g.shape(batch.z).to_vec();
    if shape.len() != 2 || shape[0] != batch.groups.len() {
        return Err(ModelError::Contract(format!(
            "embedding shape {shape:?} does not match {} group ids",
            batch.groups.len()
        )));
    }
    let r = shape[0];
    if r < 2 {
        return Err(ModelError::Contract(format!("pool of {r} embeddings; need at least 2")));
    }
    if !(tau > 0.0) {
        return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
    }
    let groups = &batch.groups;
    let anchors: Vec<usize> = (0..r)
        .filter(|&i| (0..r).any(|j| j != i && groups[j] == groups[i]))
        .collect();
    if anchors.is_empty() {
        return Err(ModelError::Contract("no row has a positive partner".into()));
    }

    let zn = g.l2_normalize(batch.z, T::from_f64(NORM_EPS));
    let zt = g.transpose(zn)?;
    let sim = g.matmul(zn, zt)?;
    let logits = g.scale(sim, T::from_f64(1.0 / tau));
    let rows = g.gather_rows(logits, &anchors)?;

    let mut others = Vec::with_capacity(anchors.len() * r);
    let mut positives = Vec::with_capacity(anchors.len() * r);
    for &i in &anchors {
        for j in 0..r {
            others.push(j != i);
            positives.push(j != i && groups[j] == groups[i]);
        }
    }
    let denom = g.masked_logsumexp(rows, others)?;
    let numer = g.masked_logsumexp(rows, positives)?;
    let per_anchor = g.sub(denom, numer)?;
    Ok(g.mean(per_anchor))
}
