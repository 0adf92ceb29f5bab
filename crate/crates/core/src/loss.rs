//! LF-MMI objective and gradient.

use ndarray::{Array3, Axis};

use crate::batching::LogLikBatch;
use crate::error::{Error, Result};
use crate::forward_backward::{forward_backward, FbOptions, FbResult, ItemStatus};
use crate::graph::ChainGraphBatch;

#[derive(Clone, Debug)]
pub struct ChainLossResult {
    /// `Σ_b (ln P(X_b | num_b) - ln P(X_b | den))` over items that succeeded.
    pub objective: f64,
    /// `-objective`, divided by the valid frame count of successful items
    /// when frame normalization was requested.
    pub loss: f64,
    /// `(B, T_max, D)` derivative of `objective` w.r.t. the log-likelihoods.
    pub grad: Array3<f64>,
    /// `(num_logprob, den_logprob)` per item, sorted order.
    pub per_utt: Vec<(f64, f64)>,
    pub status: Vec<ItemStatus>,
    pub num_failed: usize,
    /// Frames of the items that contributed.
    pub num_frames: usize,
}

/// Runs numerator and denominator forward-backward and combines them.
///
/// Items that fail in either graph contribute nothing to the objective and a
/// zero gradient; they are reported in `status`.
pub fn chain_loss(
    batch: &LogLikBatch,
    numerators: &ChainGraphBatch,
    denominator: &ChainGraphBatch,
    opts: &FbOptions,
    normalize_by_frames: bool,
) -> Result<ChainLossResult> {
    let (num, den) = rayon::join(
        || forward_backward(batch, numerators, opts),
        || forward_backward(batch, denominator, opts),
    );
    combine(batch, num?, den?, normalize_by_frames)
}

fn combine(batch: &LogLikBatch, num: FbResult, den: FbResult, normalize: bool) -> Result<ChainLossResult> {
    let b_size = batch.batch_size();
    let mut grad = num.posteriors;
    grad -= &den.posteriors;

    let mut objective = 0.0;
    let mut num_frames = 0;
    let mut status = Vec::with_capacity(b_size);
    for b in 0..b_size {
        let st = match (num.status[b], den.status[b]) {
            (ItemStatus::Ok, ItemStatus::Ok) => ItemStatus::Ok,
            (ItemStatus::Failed { frame }, _) | (_, ItemStatus::Failed { frame }) => ItemStatus::Failed { frame },
        };
        if st.is_ok() {
            objective += num.log_probs[b] - den.log_probs[b];
            num_frames += batch.lengths()[b];
        } else {
            grad.index_axis_mut(Axis(0), b).fill(0.0);
        }
        status.push(st);
    }
    let num_failed = status.iter().filter(|s| !s.is_ok()).count();
    if num_failed == b_size {
        return Err(Error::AllFailed(b_size));
    }
    let loss = if normalize {
        -objective / num_frames as f64
    } else {
        -objective
    };
    Ok(ChainLossResult {
        objective,
        loss,
        grad,
        per_utt: num.log_probs.into_iter().zip(den.log_probs).collect(),
        status,
        num_failed,
        num_frames,
    })
}
