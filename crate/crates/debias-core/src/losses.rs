//! Loss functions and their logits-gradients.
//!
//! Every loss returns both the mean scalar and the gradient with respect to
//! the logits in one call, so the gradient identities (GCE as a
//! per-sample reweighting of cross entropy, the prior-adjusted softmax) are
//! first-class and directly testable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{softmax_row, LogitsBatch, ProbBatch};

/// Floor applied inside logarithms so that a vanishing probability yields a
/// large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-bias-class target frequencies `p(y=j | b)` with their raw counts.
///
/// `counts[j][b]` is the number of training samples of target class `j`
/// carrying bias class `b`; `probs[j][b] = (counts[j][b] + alpha) /
/// (sum_i counts[i][b] + k*alpha)`, so each bias-class column sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub num_classes: usize,
    pub num_bias_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub probs: Vec<Vec<f64>>,
    pub smoothing_alpha: f64,
}

impl PriorTable {
    /// Builds the table from raw `counts[j][b]` with Laplace smoothing.
    pub fn from_counts(counts: Vec<Vec<u64>>, smoothing_alpha: f64) -> Result<Self> {
        let num_classes = counts.len();
        if num_classes < 2 {
            return Err(Error::Config("prior table needs at least two classes".into()));
        }
        let num_bias_classes = counts[0].len();
        if num_bias_classes == 0 || counts.iter().any(|row| row.len() != num_bias_classes) {
            return Err(Error::Config("prior counts must be rectangular and non-empty".into()));
        }
        if smoothing_alpha < 0.0 {
            return Err(Error::Config("smoothing alpha must be >= 0".into()));
        }
        let mut probs = vec![vec![0.0; num_bias_classes]; num_classes];
        for b in 0..num_bias_classes {
            let column_total: u64 = counts.iter().map(|row| row[b]).sum();
            let denom = column_total as f64 + num_classes as f64 * smoothing_alpha;
            if denom == 0.0 {
                return Err(Error::Degenerate(format!(
                    "bias class {b} has no samples and no smoothing"
                )));
            }
            for (j, row) in counts.iter().enumerate() {
                probs[j][b] = (row[b] as f64 + smoothing_alpha) / denom;
            }
        }
        Ok(PriorTable {
            num_classes,
            num_bias_classes,
            counts,
            probs,
            smoothing_alpha,
        })
    }

    /// Log-ratio adjustment per bias class: `ln(p(j|b) / max_i p(i|b))`.
    ///
    /// Adding these to the logits is equivalent to adding `ln p(j|b)` (the
    /// softmax is shift-invariant per row), and a uniform column maps to an
    /// exactly-zero adjustment, so uniform priors reduce the balanced
    /// softmax to the plain one bit-for-bit.
    fn log_adjustments(&self) -> Result<Vec<Vec<f64>>> {
        let mut adj = vec![vec![0.0; self.num_classes]; self.num_bias_classes];
        for b in 0..self.num_bias_classes {
            let col_max = (0..self.num_classes)
                .map(|j| self.probs[j][b])
                .fold(f64::NEG_INFINITY, f64::max);
            for j in 0..self.num_classes {
                let p = self.probs[j][b];
                if p <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "zero prior p(y={j}|b={b}) without smoothing"
                    )));
                }
                adj[b][j] = (p / col_max).ln();
            }
        }
        Ok(adj)
    }
}

fn check_labels(len: usize, labels: &[usize], k: usize, what: &str) -> Result<()> {
    if labels.len() != len {
        return Err(Error::Dim(format!(
            "{what} has {} entries for {len} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("{what} value {bad} out of range [0,{k})")));
    }
    Ok(())
}

/// Mean negative log-likelihood and its logits-gradient `(phi - onehot)/M`.
pub fn ce_loss(probs: &ProbBatch, labels: &[usize]) -> Result<(f64, Matrix)> {
    let p = &probs.probs;
    check_labels(p.rows(), labels, p.cols(), "labels")?;
    let m = p.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for (r, &y) in labels.iter().enumerate() {
        let row = p.row(r);
        loss += -(row[y].max(PROB_FLOOR)).ln();
        let out = grad.row_mut(r);
        for (j, &pj) in row.iter().enumerate() {
            out[j] = (pj - if j == y { 1.0 } else { 0.0 }) / m;
        }
    }
    Ok((loss / m, grad))
}

/// Per-sample negative log-likelihoods.
pub fn ce_per_sample(probs: &ProbBatch, labels: &[usize]) -> Result<Vec<f64>> {
    let p = &probs.probs;
    check_labels(p.rows(), labels, p.cols(), "labels")?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -(p.get(r, y).max(PROB_FLOOR)).ln())
        .collect())
}

/// Generalized cross entropy `(1 - f_y^q)/q` with its logits-gradient
/// `f_y^q * (phi - onehot)/M`: the per-sample weight `f_y^q` turns hard
/// (low-confidence) samples down, which is what makes the loss latch onto
/// the easiest separating feature first.
pub fn gce_loss(probs: &ProbBatch, labels: &[usize], q: f64) -> Result<(f64, Matrix)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("gce q must lie in (0,1], got {q}")));
    }
    let p = &probs.probs;
    check_labels(p.rows(), labels, p.cols(), "labels")?;
    let m = p.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for (r, &y) in labels.iter().enumerate() {
        let row = p.row(r);
        let fy = row[y];
        let w = fy.powf(q);
        loss += (1.0 - w) / q;
        let out = grad.row_mut(r);
        for (j, &pj) in row.iter().enumerate() {
            out[j] = w * (pj - if j == y { 1.0 } else { 0.0 }) / m;
        }
    }
    Ok((loss / m, grad))
}

pub fn gce_per_sample(probs: &ProbBatch, labels: &[usize], q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("gce q must lie in (0,1], got {q}")));
    }
    let p = &probs.probs;
    check_labels(p.rows(), labels, p.cols(), "labels")?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| (1.0 - p.get(r, y).powf(q)) / q)
        .collect())
}

/// Prior-adjusted class probabilities: for a sample with bias class `b`,
/// `phi_hat_j = p(y=j|b) exp(eta_j) / sum_i p(y=i|b) exp(eta_i)`, computed
/// in the log domain as `softmax(eta + ln p(.|b))`.
pub fn bias_balanced_probs(
    logits: &LogitsBatch,
    priors: &PriorTable,
    bias: &[usize],
) -> Result<ProbBatch> {
    let eta = &logits.0;
    if !eta.is_finite() {
        return Err(Error::Degenerate("non-finite logits".into()));
    }
    if eta.cols() != priors.num_classes {
        return Err(Error::Dim(format!(
            "logits have {} classes, prior table has {}",
            eta.cols(),
            priors.num_classes
        )));
    }
    check_labels(eta.rows(), bias, priors.num_bias_classes, "bias labels")?;
    let adj = priors.log_adjustments()?;
    let mut out = Matrix::zeros(eta.rows(), eta.cols());
    for r in 0..eta.rows() {
        let row = out.row_mut(r);
        row.copy_from_slice(eta.row(r));
        for (v, a) in row.iter_mut().zip(adj[bias[r]].iter()) {
            *v += a;
        }
        softmax_row(row);
    }
    Ok(ProbBatch {
        probs: out,
        balanced: true,
    })
}

/// Bias-balanced loss: mean over samples of the negative log of the
/// prior-adjusted probability at the true class. The logits-gradient is
/// `(phi_hat - onehot)/M`.
pub fn bs_loss(
    logits: &LogitsBatch,
    labels: &[usize],
    bias: &[usize],
    priors: &PriorTable,
) -> Result<(f64, Matrix)> {
    let balanced = bias_balanced_probs(logits, priors, bias)?;
    ce_loss(&balanced, labels)
}

pub fn bs_per_sample(
    logits: &LogitsBatch,
    labels: &[usize],
    bias: &[usize],
    priors: &PriorTable,
) -> Result<Vec<f64>> {
    let balanced = bias_balanced_probs(logits, priors, bias)?;
    ce_per_sample(&balanced, labels)
}
