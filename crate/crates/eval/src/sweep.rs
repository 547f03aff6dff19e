//! Probe accuracy as a function of the number of rearing frames.

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::probe::ProbeReport;
use crate::stats::spearman;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    pub accuracy: f64,
    pub std_err: f64,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between training-set size and probe accuracy.
    pub spearman: f64,
}

impl SweepReport {
    pub fn first(&self) -> &SweepRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &SweepRow {
        &self.rows[self.rows.len() - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frames,accuracy,std_err\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.frames, r.accuracy, r.std_err));
        }
        out
    }
}

/// Runs one train + probe cycle per size. `train` receives the frame count
/// (0 means the untrained initialisation) and `probe` scores the result;
/// callers keep the probe split and seeds fixed across sizes.
pub fn data_size_sweep<M, T, P>(sizes: &[usize], mut train: T, mut probe: P) -> Result<SweepReport>
where
    T: FnMut(usize) -> Result<M>,
    P: FnMut(&M) -> Result<ProbeReport>,
{
    if sizes.first() != Some(&0) {
        return Err(EvalError::Config("sweep sizes must start with 0 (untrained)".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::Config("sweep sizes must be strictly ascending".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &frames in sizes {
        let model = train(frames)?;
        let report = probe(&model)?;
        rows.push(SweepRow {
            frames,
            accuracy: report.mean,
            std_err: report.std_err,
            report,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    Ok(SweepReport {
        spearman: spearman(&xs, &ys),
        rows,
    })
}
