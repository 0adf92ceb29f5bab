//! Randomized finite-difference check of the chain-loss gradient.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batching::LogLikBatch;
use crate::error::{Error, Result};
use crate::forward_backward::FbOptions;
use crate::graph::{ChainGraph, ChainGraphBatch};
use crate::loss::chain_loss;
use crate::oracle::{finite_diff_grad, relative_error};
use crate::synth::{random_graph, random_logliks, GraphLimits};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;

/// A small chain-loss problem with sequences already in descending length
/// order.
#[derive(Clone, Debug)]
pub struct LossInstance {
    pub sequences: Vec<Array2<f64>>,
    pub numerators: Vec<ChainGraph>,
    pub denominator: ChainGraph,
}

impl LossInstance {
    /// Draws instances until every item has a finite objective under `opts`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, opts: &FbOptions) -> Self {
        loop {
            let num_pdfs = rng.random_range(1..=4);
            let b = rng.random_range(1..=3);
            let mut lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=6)).collect();
            lengths.sort_unstable_by(|a, b| b.cmp(a));
            let sequences: Vec<_> = lengths.iter().map(|&t| random_logliks(rng, t, num_pdfs, 1.0)).collect();
            let numerators: Vec<_> = (0..b)
                .map(|_| random_graph(rng, GraphLimits::default(), num_pdfs))
                .collect();
            let denominator = random_graph(rng, GraphLimits::default(), num_pdfs);
            let inst = LossInstance {
                sequences,
                numerators,
                denominator,
            };
            if let Ok(r) = inst.evaluate(&inst.flat(), opts) {
                if r.0.is_finite() && r.1 == 0 {
                    return inst;
                }
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.sequences.iter().flat_map(|s| s.iter().copied()).collect()
    }

    fn unflatten(&self, x: &[f64]) -> Vec<Array2<f64>> {
        let mut offset = 0;
        self.sequences
            .iter()
            .map(|s| {
                let n = s.len();
                let a = Array2::from_shape_vec(s.raw_dim(), x[offset..offset + n].to_vec()).unwrap();
                offset += n;
                a
            })
            .collect()
    }

    /// `(objective, failed count, flattened gradient)`.
    fn evaluate_full(&self, x: &[f64], opts: &FbOptions) -> Result<(f64, usize, Vec<f64>)> {
        let seqs = self.unflatten(x);
        let batch = LogLikBatch::new(&seqs)?;
        let num = ChainGraphBatch::from_graphs(self.numerators.clone())?;
        let den = ChainGraphBatch::broadcast(self.denominator.clone(), seqs.len())?;
        let r = chain_loss(&batch, &num, &den, opts, false)?;
        let mut grad = Vec::with_capacity(x.len());
        for (b, s) in seqs.iter().enumerate() {
            for t in 0..s.nrows() {
                for d in 0..s.ncols() {
                    grad.push(r.grad[[b, t, d]]);
                }
            }
        }
        Ok((r.objective, r.num_failed, grad))
    }

    fn evaluate(&self, x: &[f64], opts: &FbOptions) -> Result<(f64, usize)> {
        self.evaluate_full(x, opts).map(|(f, n, _)| (f, n))
    }

    /// Maximum relative error between analytic and central-difference
    /// gradients.
    pub fn max_relative_error(&self, opts: &FbOptions, eps: f64) -> Result<f64> {
        let x = self.flat();
        let (_, _, analytic) = self.evaluate_full(&x, opts)?;
        let numeric = finite_diff_grad(|v| self.evaluate(v, opts).map_or(f64::NAN, |(f, _)| f), &x, eps)?;
        Ok(analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Checks `trials` random instances drawn from `seed`.
pub fn run_gradcheck(seed: u64, trials: usize, opts: &FbOptions, eps: f64) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Options("gradcheck needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let inst = LossInstance::random(&mut rng, opts);
        errors.push(inst.max_relative_error(opts, eps)?);
    }
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        trials,
        errors,
        max_relative_error,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_trials_pass() {
        let report = run_gradcheck(7, 5, &FbOptions::default(), DEFAULT_EPS).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_gradcheck(0, 0, &FbOptions::default(), DEFAULT_EPS).is_err());
    }
}
