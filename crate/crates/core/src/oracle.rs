//! Brute-force references: exhaustive path enumeration and central finite
//! differences. Only meant for small instances.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::ChainGraph;

/// Maximum number of complete `T`-step paths explored.
pub const MAX_PATHS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptingPath {
    pub states: Vec<usize>,
    pub pdfs: Vec<usize>,
    /// Arc probabilities times final probability times `exp(L[t, pdf_t])`.
    pub prob: f64,
}

/// All accepting paths of exactly `loglik.nrows()` transitions.
pub fn enumerate_paths(graph: &ChainGraph, loglik: ArrayView2<'_, f64>) -> Result<Vec<AcceptingPath>> {
    if loglik.ncols() != graph.num_pdfs() {
        return Err(Error::Shape(format!(
            "log-likelihoods have {} columns, graph has {} pdfs",
            loglik.ncols(),
            graph.num_pdfs()
        )));
    }
    let frames = loglik.nrows();
    let mut out = Vec::new();
    let mut explored = 0usize;
    let mut states = vec![graph.initial_state()];
    let mut pdfs = Vec::with_capacity(frames);
    dfs(
        graph,
        &loglik,
        frames,
        1.0,
        &mut states,
        &mut pdfs,
        &mut out,
        &mut explored,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    graph: &ChainGraph,
    loglik: &ArrayView2<'_, f64>,
    frames: usize,
    prob: f64,
    states: &mut Vec<usize>,
    pdfs: &mut Vec<usize>,
    out: &mut Vec<AcceptingPath>,
    explored: &mut usize,
) -> Result<()> {
    let here = *states.last().unwrap();
    let t = pdfs.len();
    if t == frames {
        *explored += 1;
        if *explored > MAX_PATHS {
            return Err(Error::Oracle(format!(
                "more than {MAX_PATHS} paths; shrink the instance"
            )));
        }
        let fin = graph.final_probs()[here];
        if fin > 0.0 {
            out.push(AcceptingPath {
                states: states.clone(),
                pdfs: pdfs.clone(),
                prob: prob * fin,
            });
        }
        return Ok(());
    }
    for arc in graph.outgoing(here) {
        let pdf = arc.pdf_id as usize;
        let p = prob * arc.prob * loglik[[t, pdf]].exp();
        states.push(arc.to_state as usize);
        pdfs.push(pdf);
        dfs(graph, loglik, frames, p, states, pdfs, out, explored)?;
        states.pop();
        pdfs.pop();
    }
    Ok(())
}

/// `ln Σ_paths prob`; `-inf` when no path of the right length is accepted.
pub fn brute_logprob(graph: &ChainGraph, loglik: ArrayView2<'_, f64>) -> Result<f64> {
    let paths = enumerate_paths(graph, loglik)?;
    Ok(paths.iter().map(|p| p.prob).sum::<f64>().ln())
}

/// `(T, D)` pdf posteriors by path-weighted counting.
pub fn brute_posteriors(graph: &ChainGraph, loglik: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let paths = enumerate_paths(graph, loglik)?;
    let total: f64 = paths.iter().map(|p| p.prob).sum();
    if paths.is_empty() || total == 0.0 {
        return Err(Error::Oracle("no accepting path of the requested length".into()));
    }
    let mut gamma = Array2::zeros(loglik.raw_dim());
    for path in &paths {
        for (t, &d) in path.pdfs.iter().enumerate() {
            gamma[[t, d]] += path.prob;
        }
    }
    gamma /= total;
    Ok(gamma)
}

/// Central differences `(f(x + εe_i) - f(x - εe_i)) / 2ε` for every entry.
pub fn finite_diff_grad<F>(mut objective: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let f0 = objective(&probe);
    if !f0.is_finite() {
        return Err(Error::Oracle(format!("objective is {f0} at the base point")));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = objective(&probe);
        probe[i] = x[i] - eps;
        let down = objective(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("objective is not finite around entry {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Transition;

    fn two_state() -> ChainGraph {
        ChainGraph::new(
            vec![
                Transition::new(0, 1, 0, 0.4),
                Transition::new(0, 0, 1, 0.6),
                Transition::new(1, 1, 0, 1.0),
            ],
            2,
            2,
            0,
            vec![0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn self_loop_is_zero() {
        let g = ChainGraph::new(vec![Transition::new(0, 0, 0, 1.0)], 1, 1, 0, vec![1.0]).unwrap();
        let l = Array2::zeros((3, 1));
        assert_eq!(brute_logprob(&g, l.view()).unwrap(), 0.0);
        let gamma = brute_posteriors(&g, l.view()).unwrap();
        assert!(gamma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_state_paths() {
        let l = Array2::zeros((2, 2));
        let paths = enumerate_paths(&two_state(), l.view()).unwrap();
        assert_eq!(paths.len(), 2);
        assert!((brute_logprob(&two_state(), l.view()).unwrap() - 0.64f64.ln()).abs() < 1e-15);
        let gamma = brute_posteriors(&two_state(), l.view()).unwrap();
        assert!((gamma[[0, 0]] - 0.625).abs() < 1e-15);
        assert!((gamma[[0, 1]] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn no_path() {
        let g = ChainGraph::new(vec![Transition::new(0, 1, 0, 1.0)], 2, 1, 0, vec![0.0, 1.0]).unwrap();
        let l = Array2::zeros((3, 1));
        assert_eq!(brute_logprob(&g, l.view()).unwrap(), f64::NEG_INFINITY);
        assert!(brute_posteriors(&g, l.view()).is_err());
    }

    #[test]
    fn guard_trips() {
        let g = ChainGraph::new(
            vec![Transition::new(0, 0, 0, 0.5), Transition::new(0, 0, 1, 0.5)],
            1,
            2,
            0,
            vec![1.0],
        )
        .unwrap();
        let l = Array2::zeros((21, 2));
        assert!(matches!(brute_logprob(&g, l.view()), Err(Error::Oracle(_))));
    }

    #[test]
    fn linear_functional() {
        let x = vec![0.3, -1.0, 2.5];
        let g = finite_diff_grad(|v| v.iter().sum(), &x, 1e-6).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn non_finite_objective() {
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-6).is_err());
    }
}
