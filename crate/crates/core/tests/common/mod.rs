#![allow(dead_code)]

use std::io::Cursor;

use lfmmi::array_io::{read_from, write_to};
use lfmmi::forward_backward::FbOptions;
use lfmmi::fst_io::{parse_fst_text_with_ids, serialize_fst_text};
use lfmmi::graph::{ChainGraph, ChainGraphBatch, Transition};
use lfmmi::loss::{chain_loss, ChainLossResult};
use lfmmi::synth::{random_graph, random_logliks, GraphLimits};
use lfmmi::LogLikBatch;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Random numerator/denominator loss problem in caller order.
pub struct Problem {
    pub sequences: Vec<Array2<f64>>,
    pub numerators: Vec<ChainGraph>,
    pub denominator: ChainGraph,
}

impl Problem {
    /// Draws until every item has a finite objective.
    pub fn random<R: Rng>(
        rng: &mut R,
        max_batch: usize,
        frames: std::ops::RangeInclusive<usize>,
        opts: &FbOptions,
    ) -> Self {
        loop {
            let d = rng.random_range(1..=4);
            let b = rng.random_range(1..=max_batch);
            let sequences: Vec<_> = (0..b)
                .map(|_| {
                    let t = rng.random_range(frames.clone());
                    random_logliks(rng, t, d, 1.5)
                })
                .collect();
            let numerators = (0..b).map(|_| random_graph(rng, GraphLimits::default(), d)).collect();
            let denominator = random_graph(rng, GraphLimits::default(), d);
            let p = Problem {
                sequences,
                numerators,
                denominator,
            };
            if p.loss(opts).is_ok_and(|r| r.num_failed == 0) {
                return p;
            }
        }
    }

    pub fn batch(&self) -> LogLikBatch {
        LogLikBatch::new(&self.sequences).unwrap()
    }

    pub fn loss_on(&self, batch: &LogLikBatch, opts: &FbOptions) -> lfmmi::Result<ChainLossResult> {
        let num = ChainGraphBatch::from_graphs(batch.sort_items(&self.numerators)?)?;
        let den = ChainGraphBatch::broadcast(self.denominator.clone(), batch.batch_size())?;
        chain_loss(batch, &num, &den, opts, false)
    }

    pub fn loss(&self, opts: &FbOptions) -> lfmmi::Result<ChainLossResult> {
        self.loss_on(&self.batch(), opts)
    }

    pub fn item(&self, b: usize) -> Problem {
        Problem {
            sequences: vec![self.sequences[b].clone()],
            numerators: vec![self.numerators[b].clone()],
            denominator: self.denominator.clone(),
        }
    }
}

/// Scaled forward recursion without leak, written directly against the
/// graph's incoming arc lists. Returns the log-probability and the normalized
/// alpha rows `0..=T`.
pub fn plain_forward(graph: &ChainGraph, loglik: &Array2<f64>) -> (f64, Vec<Vec<f64>>) {
    let (frames, _) = loglik.dim();
    let n = graph.num_states();
    let mut rows = vec![vec![0.0; n]];
    rows[0][graph.initial_state()] = 1.0;
    let mut log_prob = 0.0;
    for t in 0..frames {
        let l = loglik.row(t);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|&v| (v - m).exp()).collect();
        let prev = &rows[t];
        let mut cur = vec![0.0; n];
        for (s, cell) in cur.iter_mut().enumerate() {
            let mut acc = 0.0;
            for arc in graph.incoming(s) {
                acc += arc.prob * prev[arc.from_state as usize] * e[arc.pdf_id as usize];
            }
            *cell = acc;
        }
        if t + 1 == frames {
            for (a, f) in cur.iter_mut().zip(graph.final_probs()) {
                *a *= f;
            }
        }
        let total: f64 = cur.iter().sum();
        let inv = 1.0 / total;
        cur.iter_mut().for_each(|a| *a *= inv);
        log_prob += total.ln() + m;
        rows.push(cur);
    }
    (log_prob, rows)
}

/// Lengths whose shortest entry is at most 70% of the longest.
pub fn spread_lengths<R: Rng>(rng: &mut R, count: usize, max_len: usize) -> Vec<usize> {
    let shortest = (max_len * 7 / 10).max(1);
    let mut lengths: Vec<usize> = (0..count).map(|_| rng.random_range(1..=max_len)).collect();
    lengths[0] = max_len;
    let last = count - 1;
    lengths[last] = rng.random_range(1..=shortest);
    lengths
}

/// Small connected graphs: a spine to the last state, a loop on it, extra
/// random arcs and optional early finals.
pub fn graph_strategy() -> impl Strategy<Value = ChainGraph> {
    (1usize..=6, 1usize..=5)
        .prop_flat_map(|(states, pdfs)| {
            let spine = proptest::collection::vec((0..pdfs as u32, 1e-12f64..=1.0), states);
            let extra = proptest::collection::vec(
                (0..states as u32, 0..states as u32, 0..pdfs as u32, 1e-12f64..=1.0),
                0..12,
            );
            let finals = proptest::collection::vec(prop_oneof![Just(0.0), 1e-9f64..=1.0], states);
            let last_final = 1e-9f64..=1.0;
            (Just(states), Just(pdfs), spine, extra, finals, last_final)
        })
        .prop_map(|(states, pdfs, spine, extra, mut finals, last_final)| {
            let n = states as u32;
            let mut arcs: Vec<Transition> = spine
                .iter()
                .enumerate()
                .map(|(s, &(pdf, p))| {
                    let s = s as u32;
                    Transition::new(s, (s + 1).min(n - 1), pdf, p)
                })
                .collect();
            arcs.extend(extra.into_iter().map(|(f, t, pdf, p)| Transition::new(f, t, pdf, p)));
            finals[states - 1] = last_final;
            ChainGraph::new(arcs, states, pdfs, 0, finals).unwrap()
        })
}

pub fn transition_key(t: &Transition) -> (u32, u32, u32, u64) {
    (t.from_state, t.to_state, t.pdf_id, t.prob.to_bits())
}

/// Serializes and reparses `g`; states come back relabeled in first-appearance
/// order and probabilities pass through `-ln`/`exp`.
pub fn check_fst_round_trip(g: &ChainGraph) -> Result<(), TestCaseError> {
    let text = serialize_fst_text(g);
    let (parsed, ids) = parse_fst_text_with_ids(&text, g.num_pdfs()).unwrap();
    prop_assert_eq!(parsed.num_states(), g.num_states());
    prop_assert_eq!(ids[parsed.initial_state()] as usize, g.initial_state());

    let mut expect: Vec<Transition> = g.forward_transitions().to_vec();
    let mut got: Vec<Transition> = parsed
        .forward_transitions()
        .iter()
        .map(|t| {
            Transition::new(
                ids[t.from_state as usize] as u32,
                ids[t.to_state as usize] as u32,
                t.pdf_id,
                t.prob,
            )
        })
        .collect();
    expect.sort_by_key(transition_key);
    got.sort_by_key(transition_key);
    prop_assert_eq!(expect.len(), got.len());
    for (a, b) in expect.iter().zip(&got) {
        prop_assert_eq!(
            (a.from_state, a.to_state, a.pdf_id),
            (b.from_state, b.to_state, b.pdf_id)
        );
        prop_assert!((a.prob - b.prob).abs() <= 1e-14 * a.prob, "{} vs {}", a.prob, b.prob);
    }
    for (new, &old) in ids.iter().enumerate() {
        let (a, b) = (g.final_probs()[old as usize], parsed.final_probs()[new]);
        prop_assert!((a - b).abs() <= 1e-14 * a, "final {} vs {}", a, b);
    }
    Ok(())
}

/// Writes a PCTN array of shape `dims` filled cyclically from `pool` and reads
/// it back bit for bit.
pub fn check_pctn_round_trip(dims: &[usize], pool: &[f64]) -> Result<(), TestCaseError> {
    let len: usize = dims.iter().product();
    let values: Vec<f64> = (0..len)
        .map(|i| if pool.is_empty() { 0.0 } else { pool[i % pool.len()] })
        .collect();
    let mut buf = Vec::new();
    write_to(&mut buf, dims, &values).unwrap();
    let (d2, v2) = read_from(Cursor::new(&buf)).unwrap();
    prop_assert_eq!(&d2[..], dims);
    prop_assert_eq!(
        v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    Ok(())
}
