//! Seeded generators for small random graphs, random batches and the
//! synthetic phone language used by the training demo.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{ChainGraph, Transition};
use crate::toy_builder::Transcript;

/// Limits for [`random_graph`].
#[derive(Clone, Copy, Debug)]
pub struct GraphLimits {
    pub max_states: usize,
    pub max_transitions: usize,
}

impl Default for GraphLimits {
    fn default() -> Self {
        GraphLimits {
            max_states: 5,
            max_transitions: 10,
        }
    }
}

/// A random connected graph over `num_pdfs` pdfs with unnormalized weights.
///
/// States form a left-to-right spine `0 -> 1 -> ... -> S-1` with a self-loop
/// on the last state, which is always final; the rest of the transition
/// budget is spent on random arcs.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, limits: GraphLimits, num_pdfs: usize) -> ChainGraph {
    let max_states = limits.max_states.clamp(1, limits.max_transitions.max(1));
    let states = rng.random_range(1..=max_states);
    let mut arcs = Vec::new();
    let prob = |rng: &mut R| rng.random_range(0.05..=1.0);
    for s in 0..states - 1 {
        let p = prob(rng);
        arcs.push(Transition::new(
            s as u32,
            s as u32 + 1,
            rng.random_range(0..num_pdfs) as u32,
            p,
        ));
    }
    let last = states as u32 - 1;
    let p = prob(rng);
    arcs.push(Transition::new(last, last, rng.random_range(0..num_pdfs) as u32, p));
    let budget = limits.max_transitions.saturating_sub(arcs.len());
    let extra = rng.random_range(0..=budget);
    for _ in 0..extra {
        let from = rng.random_range(0..states) as u32;
        let to = rng.random_range(0..states) as u32;
        let pdf = rng.random_range(0..num_pdfs) as u32;
        let p = prob(rng);
        arcs.push(Transition::new(from, to, pdf, p));
    }
    let mut finals = vec![0.0; states];
    for f in finals.iter_mut().take(states - 1) {
        if rng.random_bool(0.3) {
            *f = rng.random_range(0.1..=1.0);
        }
    }
    finals[states - 1] = rng.random_range(0.1..=1.0);
    ChainGraph::new(arcs, states, num_pdfs, 0, finals).expect("spine keeps the graph connected")
}

/// A `(frames, num_pdfs)` array of standard normal log-likelihoods scaled by
/// `scale`.
pub fn random_logliks<R: Rng + ?Sized>(rng: &mut R, frames: usize, num_pdfs: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((frames, num_pdfs), || {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// A large random stochastic graph: a ring over all states for connectivity
/// plus `out_degree - 1` random successors per state, probabilities
/// normalized per state with a small final probability everywhere.
pub fn random_large_graph<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    out_degree: usize,
    num_pdfs: usize,
) -> ChainGraph {
    let mut arcs = Vec::with_capacity(num_states * out_degree);
    let mut finals = vec![0.0; num_states];
    for (s, final_prob) in finals.iter_mut().enumerate() {
        let mut weights: Vec<(u32, u32, f64)> = Vec::with_capacity(out_degree);
        weights.push((
            ((s + 1) % num_states) as u32,
            rng.random_range(0..num_pdfs) as u32,
            rng.random_range(0.1..1.0),
        ));
        for _ in 1..out_degree {
            weights.push((
                rng.random_range(0..num_states) as u32,
                rng.random_range(0..num_pdfs) as u32,
                rng.random_range(0.1..1.0),
            ));
        }
        let fin: f64 = rng.random_range(0.01..0.1);
        let total: f64 = weights.iter().map(|w| w.2).sum::<f64>() + fin;
        for (to, pdf, w) in weights {
            arcs.push(Transition::new(s as u32, to, pdf, w / total));
        }
        *final_prob = fin / total;
    }
    ChainGraph::new(arcs, num_states, num_pdfs, 0, finals).expect("ring keeps the graph connected")
}

/// Random utterances over phones `0..num_phones`: 1 to 3 words of 1 to 3
/// phones each.
pub fn synthetic_corpus<R: Rng + ?Sized>(rng: &mut R, num_phones: usize, num_utts: usize) -> Vec<Transcript> {
    let phones: Vec<usize> = (0..num_phones).collect();
    (0..num_utts)
        .map(|_| {
            let words = (0..rng.random_range(1..=3))
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| *phones.choose(rng).unwrap())
                        .collect()
                })
                .collect();
            Transcript { words }
        })
        .collect()
}
