//! Sparse chain HMM graphs.
//!
//! A [`ChainGraph`] stores its transitions twice: once sorted by from-state
//! (used when walking a state's outgoing arcs, i.e. the backward pass) and once
//! sorted by to-state (used when gathering a state's incoming arcs, i.e. the
//! forward pass). Each layout comes with per-state half-open row ranges, the
//! same way a COO matrix is paired with row pointers.
//!
//! [`ChainGraphBatch`] stacks graphs into zero-padded `(B, I_max, 3)`,
//! `(B, I_max)`, `(B, S_max, 2)` and `(B, S_max)` tensors. A batch built from a
//! single graph with [`ChainGraphBatch::broadcast`] holds one physical copy and
//! presents it `B` times.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// One weighted arc `from_state -> to_state` emitting `pdf_id`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub from_state: u32,
    pub to_state: u32,
    pub pdf_id: u32,
    pub prob: f64,
}

impl Transition {
    pub fn new(from_state: u32, to_state: u32, pdf_id: u32, prob: f64) -> Self {
        Transition {
            from_state,
            to_state,
            pdf_id,
            prob,
        }
    }

    fn forward_key(&self, other: &Self) -> Ordering {
        (self.from_state, self.to_state, self.pdf_id)
            .cmp(&(other.from_state, other.to_state, other.pdf_id))
            .then(self.prob.total_cmp(&other.prob))
    }

    fn backward_key(&self, other: &Self) -> Ordering {
        (self.to_state, self.from_state, self.pdf_id)
            .cmp(&(other.to_state, other.from_state, other.pdf_id))
            .then(self.prob.total_cmp(&other.prob))
    }
}

/// Immutable sparse representation of one HMM graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainGraph {
    num_states: usize,
    num_pdfs: usize,
    initial_state: u32,
    forward_transitions: Vec<Transition>,
    forward_index: Vec<(u32, u32)>,
    backward_transitions: Vec<Transition>,
    backward_index: Vec<(u32, u32)>,
    final_probs: Vec<f64>,
    dropped_arcs: usize,
}

impl ChainGraph {
    /// Validates the arcs, drops zero-probability ones, builds both sorted
    /// layouts and checks that every state lies on some accepting path.
    pub fn new(
        transitions: Vec<Transition>,
        num_states: usize,
        num_pdfs: usize,
        initial_state: usize,
        final_probs: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::Graph("graph has no states".into()));
        }
        if num_states > u32::MAX as usize {
            return Err(Error::Graph(format!("{num_states} states exceed the u32 index range")));
        }
        if num_pdfs == 0 {
            return Err(Error::Graph("num_pdfs must be positive".into()));
        }
        if initial_state >= num_states {
            return Err(Error::Graph(format!(
                "initial state {initial_state} out of range for {num_states} states"
            )));
        }
        if final_probs.len() != num_states {
            return Err(Error::Graph(format!(
                "final_probs has length {}, expected {num_states}",
                final_probs.len()
            )));
        }
        for (s, &p) in final_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Graph(format!("final prob {p} of state {s} outside [0, 1]")));
            }
        }
        if !final_probs.iter().any(|&p| p > 0.0) {
            return Err(Error::Graph("no state has a positive final probability".into()));
        }

        let mut kept = Vec::with_capacity(transitions.len());
        let mut dropped_arcs = 0;
        for (i, t) in transitions.into_iter().enumerate() {
            if t.from_state as usize >= num_states || t.to_state as usize >= num_states {
                return Err(Error::Graph(format!(
                    "transition {i} ({} -> {}) references a state outside [0, {num_states})",
                    t.from_state, t.to_state
                )));
            }
            if t.pdf_id as usize >= num_pdfs {
                return Err(Error::Graph(format!(
                    "transition {i} has pdf id {} but num_pdfs is {num_pdfs}",
                    t.pdf_id
                )));
            }
            if !t.prob.is_finite() || t.prob < 0.0 || t.prob > 1.0 {
                return Err(Error::Graph(format!(
                    "transition {i} has probability {} outside [0, 1]",
                    t.prob
                )));
            }
            if t.prob == 0.0 {
                dropped_arcs += 1;
                continue;
            }
            kept.push(t);
        }
        if kept.len() > u32::MAX as usize {
            return Err(Error::Graph("transition count exceeds the u32 index range".into()));
        }

        let mut forward_transitions = kept.clone();
        forward_transitions.sort_by(Transition::forward_key);
        let forward_index = index_ranges(&forward_transitions, num_states, |t| t.from_state);

        let mut backward_transitions = kept;
        backward_transitions.sort_by(Transition::backward_key);
        let backward_index = index_ranges(&backward_transitions, num_states, |t| t.to_state);

        let graph = ChainGraph {
            num_states,
            num_pdfs,
            initial_state: initial_state as u32,
            forward_transitions,
            forward_index,
            backward_transitions,
            backward_index,
            final_probs,
            dropped_arcs,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.num_states;
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.initial_state as usize]);
        seen[self.initial_state as usize] = true;
        while let Some(s) = queue.pop_front() {
            for t in self.outgoing(s) {
                let next = t.to_state as usize;
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        if let Some(state) = seen.iter().position(|&v| !v) {
            return Err(Error::Unreachable { state });
        }

        seen.iter_mut().for_each(|v| *v = false);
        for (s, &p) in self.final_probs.iter().enumerate() {
            if p > 0.0 {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            for t in self.incoming(s) {
                let prev = t.from_state as usize;
                if !seen[prev] {
                    seen[prev] = true;
                    queue.push_back(prev);
                }
            }
        }
        match seen.iter().position(|&v| !v) {
            Some(state) => Err(Error::NotCoaccessible { state }),
            None => Ok(()),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_pdfs(&self) -> usize {
        self.num_pdfs
    }

    pub fn num_transitions(&self) -> usize {
        self.forward_transitions.len()
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state as usize
    }

    /// Transitions sorted by from-state.
    pub fn forward_transitions(&self) -> &[Transition] {
        &self.forward_transitions
    }

    pub fn forward_index(&self) -> &[(u32, u32)] {
        &self.forward_index
    }

    /// Transitions sorted by to-state.
    pub fn backward_transitions(&self) -> &[Transition] {
        &self.backward_transitions
    }

    pub fn backward_index(&self) -> &[(u32, u32)] {
        &self.backward_index
    }

    pub fn final_probs(&self) -> &[f64] {
        &self.final_probs
    }

    /// Number of zero-probability arcs removed during construction.
    pub fn dropped_arcs(&self) -> usize {
        self.dropped_arcs
    }

    pub fn outgoing(&self, state: usize) -> &[Transition] {
        let (start, end) = self.forward_index[state];
        &self.forward_transitions[start as usize..end as usize]
    }

    pub fn incoming(&self, state: usize) -> &[Transition] {
        let (start, end) = self.backward_index[state];
        &self.backward_transitions[start as usize..end as usize]
    }
}

fn index_ranges(sorted: &[Transition], num_states: usize, key: impl Fn(&Transition) -> u32) -> Vec<(u32, u32)> {
    let mut ranges = vec![(0u32, 0u32); num_states];
    let mut pos = 0usize;
    for (s, range) in ranges.iter_mut().enumerate() {
        let start = pos;
        while pos < sorted.len() && key(&sorted[pos]) as usize == s {
            pos += 1;
        }
        *range = (start as u32, pos as u32);
    }
    debug_assert_eq!(pos, sorted.len());
    ranges
}

/// Borrowed view of one logical batch item in padded layout.
///
/// Slices are `I_max`/`S_max` long; entries past the item's own
/// `num_transitions`/`num_states` are zero padding.
#[derive(Clone, Copy, Debug)]
pub struct GraphItem<'a> {
    pub num_states: usize,
    pub num_transitions: usize,
    pub initial_state: usize,
    /// `(from, to, pdf)` triples, from-state order.
    pub forward_transitions: &'a [u32],
    pub forward_probs: &'a [f64],
    /// `(start, end)` pairs per state.
    pub forward_index: &'a [u32],
    /// `(from, to, pdf)` triples, to-state order.
    pub backward_transitions: &'a [u32],
    pub backward_probs: &'a [f64],
    pub backward_index: &'a [u32],
    pub final_probs: &'a [f64],
}

impl GraphItem<'_> {
    #[inline]
    pub fn forward_range(&self, state: usize) -> std::ops::Range<usize> {
        self.forward_index[2 * state] as usize..self.forward_index[2 * state + 1] as usize
    }

    #[inline]
    pub fn backward_range(&self, state: usize) -> std::ops::Range<usize> {
        self.backward_index[2 * state] as usize..self.backward_index[2 * state + 1] as usize
    }
}

/// A batch of chain graphs in zero-padded tensor layout.
#[derive(Clone, Debug)]
pub struct ChainGraphBatch {
    batch_size: usize,
    broadcast: bool,
    num_pdfs: usize,
    max_states: usize,
    max_transitions: usize,
    graphs: Vec<Arc<ChainGraph>>,
    forward_transitions: Array3<u32>,
    forward_probs: Array2<f64>,
    forward_index: Array3<u32>,
    backward_transitions: Array3<u32>,
    backward_probs: Array2<f64>,
    backward_index: Array3<u32>,
    final_probs: Array2<f64>,
}

impl ChainGraphBatch {
    /// Stacks distinct graphs (one per utterance), zero-padding to the largest.
    pub fn from_graphs(graphs: Vec<ChainGraph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Batch("cannot batch an empty list of graphs".into()));
        }
        let num_pdfs = graphs[0].num_pdfs;
        if let Some((i, g)) = graphs.iter().enumerate().find(|(_, g)| g.num_pdfs != num_pdfs) {
            return Err(Error::Batch(format!(
                "graph {i} has {} pdfs, graph 0 has {num_pdfs}",
                g.num_pdfs
            )));
        }
        let batch_size = graphs.len();
        Ok(Self::pack(
            graphs.into_iter().map(Arc::new).collect(),
            batch_size,
            false,
        ))
    }

    /// Presents one graph `batch_size` times without copying it.
    pub fn broadcast(graph: ChainGraph, batch_size: usize) -> Result<Self> {
        Self::broadcast_shared(Arc::new(graph), batch_size)
    }

    pub fn broadcast_shared(graph: Arc<ChainGraph>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Batch("broadcast batch size must be at least 1".into()));
        }
        Ok(Self::pack(vec![graph], batch_size, true))
    }

    fn pack(graphs: Vec<Arc<ChainGraph>>, batch_size: usize, broadcast: bool) -> Self {
        let physical = graphs.len();
        let num_pdfs = graphs[0].num_pdfs;
        let max_states = graphs.iter().map(|g| g.num_states).max().unwrap_or(0);
        let max_transitions = graphs.iter().map(|g| g.num_transitions()).max().unwrap_or(0);

        let mut forward_transitions = Array3::zeros((physical, max_transitions, 3));
        let mut forward_probs = Array2::zeros((physical, max_transitions));
        let mut forward_index = Array3::zeros((physical, max_states, 2));
        let mut backward_transitions = Array3::zeros((physical, max_transitions, 3));
        let mut backward_probs = Array2::zeros((physical, max_transitions));
        let mut backward_index = Array3::zeros((physical, max_states, 2));
        let mut final_probs = Array2::zeros((physical, max_states));

        for (b, g) in graphs.iter().enumerate() {
            let layouts = [
                (&g.forward_transitions, &mut forward_transitions, &mut forward_probs),
                (&g.backward_transitions, &mut backward_transitions, &mut backward_probs),
            ];
            for (arcs, triples, probs) in layouts {
                for (i, t) in arcs.iter().enumerate() {
                    triples[[b, i, 0]] = t.from_state;
                    triples[[b, i, 1]] = t.to_state;
                    triples[[b, i, 2]] = t.pdf_id;
                    probs[[b, i]] = t.prob;
                }
            }
            for s in 0..g.num_states {
                forward_index[[b, s, 0]] = g.forward_index[s].0;
                forward_index[[b, s, 1]] = g.forward_index[s].1;
                backward_index[[b, s, 0]] = g.backward_index[s].0;
                backward_index[[b, s, 1]] = g.backward_index[s].1;
                final_probs[[b, s]] = g.final_probs[s];
            }
        }

        ChainGraphBatch {
            batch_size,
            broadcast,
            num_pdfs,
            max_states,
            max_transitions,
            graphs,
            forward_transitions,
            forward_probs,
            forward_index,
            backward_transitions,
            backward_probs,
            backward_index,
            final_probs,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn is_broadcast(&self) -> bool {
        self.broadcast
    }

    pub fn num_pdfs(&self) -> usize {
        self.num_pdfs
    }

    pub fn max_states(&self) -> usize {
        self.max_states
    }

    pub fn max_transitions(&self) -> usize {
        self.max_transitions
    }

    /// Number of physically stored graphs (1 for a broadcast batch).
    pub fn num_physical(&self) -> usize {
        self.graphs.len()
    }

    fn physical(&self, b: usize) -> usize {
        assert!(b < self.batch_size, "batch item {b} out of range");
        if self.broadcast {
            0
        } else {
            b
        }
    }

    /// The source graph of logical item `b`.
    pub fn graph(&self, b: usize) -> &ChainGraph {
        &self.graphs[self.physical(b)]
    }

    /// `(I_b, S_b)` of logical item `b`.
    pub fn item_size(&self, b: usize) -> (usize, usize) {
        let g = self.graph(b);
        (g.num_transitions(), g.num_states)
    }

    pub fn item(&self, b: usize) -> GraphItem<'_> {
        let p = self.physical(b);
        let g = &self.graphs[p];
        GraphItem {
            num_states: g.num_states,
            num_transitions: g.num_transitions(),
            initial_state: g.initial_state as usize,
            forward_transitions: plane(&self.forward_transitions, p),
            forward_probs: row(&self.forward_probs, p),
            forward_index: plane(&self.forward_index, p),
            backward_transitions: plane(&self.backward_transitions, p),
            backward_probs: row(&self.backward_probs, p),
            backward_index: plane(&self.backward_index, p),
            final_probs: row(&self.final_probs, p),
        }
    }

    /// Logical `(B, I_max, 3)` from-state-sorted triples.
    pub fn forward_transitions(&self) -> ArrayView3<'_, u32> {
        self.logical3(&self.forward_transitions)
    }

    pub fn forward_probs(&self) -> ArrayView2<'_, f64> {
        self.logical2(&self.forward_probs)
    }

    pub fn forward_index(&self) -> ArrayView3<'_, u32> {
        self.logical3(&self.forward_index)
    }

    /// Logical `(B, I_max, 3)` to-state-sorted triples.
    pub fn backward_transitions(&self) -> ArrayView3<'_, u32> {
        self.logical3(&self.backward_transitions)
    }

    pub fn backward_probs(&self) -> ArrayView2<'_, f64> {
        self.logical2(&self.backward_probs)
    }

    pub fn backward_index(&self) -> ArrayView3<'_, u32> {
        self.logical3(&self.backward_index)
    }

    pub fn final_probs(&self) -> ArrayView2<'_, f64> {
        self.logical2(&self.final_probs)
    }

    fn logical3<'a>(&self, a: &'a Array3<u32>) -> ArrayView3<'a, u32> {
        let (_, n, m) = a.dim();
        a.broadcast((self.batch_size, n, m))
            .expect("padded layout broadcasts along the batch axis")
    }

    fn logical2<'a>(&self, a: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        let (_, n) = a.dim();
        a.broadcast((self.batch_size, n))
            .expect("padded layout broadcasts along the batch axis")
    }

    /// Rebuilds logical item `b` from the padded tensors alone.
    pub fn extract(&self, b: usize) -> Result<ChainGraph> {
        let item = self.item(b);
        let transitions = (0..item.num_transitions)
            .map(|i| {
                Transition::new(
                    item.forward_transitions[3 * i],
                    item.forward_transitions[3 * i + 1],
                    item.forward_transitions[3 * i + 2],
                    item.forward_probs[i],
                )
            })
            .collect();
        ChainGraph::new(
            transitions,
            item.num_states,
            self.num_pdfs,
            item.initial_state,
            item.final_probs[..item.num_states].to_vec(),
        )
    }

    /// Reorders logical items; `order[k]` is the current index of new item `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.batch_size {
            return Err(Error::Shape(format!(
                "permutation of length {} for a batch of {}",
                order.len(),
                self.batch_size
            )));
        }
        if self.broadcast {
            return Ok(self.clone());
        }
        let graphs = order.iter().map(|&i| Arc::clone(&self.graphs[i])).collect();
        Ok(Self::pack(graphs, self.batch_size, false))
    }
}

fn plane(a: &Array3<u32>, p: usize) -> &[u32] {
    let (_, n, m) = a.dim();
    let flat = a.as_slice().expect("padded layouts are contiguous");
    &flat[p * n * m..(p + 1) * n * m]
}

fn row(a: &Array2<f64>, p: usize) -> &[f64] {
    let (_, n) = a.dim();
    let flat = a.as_slice().expect("padded layouts are contiguous");
    &flat[p * n..(p + 1) * n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_loop() -> ChainGraph {
        ChainGraph::new(vec![Transition::new(0, 0, 0, 1.0)], 1, 1, 0, vec![1.0]).unwrap()
    }

    fn chain3() -> ChainGraph {
        ChainGraph::new(
            vec![Transition::new(1, 2, 0, 1.0), Transition::new(0, 1, 0, 1.0)],
            3,
            1,
            0,
            vec![0.0, 0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn smallest_accepting_graph() {
        let g = self_loop();
        assert_eq!(g.forward_index(), &[(0, 1)]);
        assert_eq!(g.backward_index(), &[(0, 1)]);
    }

    #[test]
    fn left_to_right_chain_ranges() {
        let g = chain3();
        assert_eq!(g.forward_index(), &[(0, 1), (1, 2), (2, 2)]);
        assert_eq!(g.backward_index(), &[(0, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn construction_sorts_input() {
        let arcs = vec![
            Transition::new(0, 1, 0, 0.4),
            Transition::new(0, 0, 1, 0.6),
            Transition::new(1, 1, 0, 1.0),
        ];
        let mut reversed = arcs.clone();
        reversed.reverse();
        let a = ChainGraph::new(arcs, 2, 2, 0, vec![0.0, 1.0]).unwrap();
        let b = ChainGraph::new(reversed, 2, 2, 0, vec![0.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_prob_arcs_dropped() {
        let g = ChainGraph::new(
            vec![Transition::new(0, 0, 0, 1.0), Transition::new(0, 0, 1, 0.0)],
            1,
            2,
            0,
            vec![1.0],
        )
        .unwrap();
        assert_eq!(g.num_transitions(), 1);
        assert_eq!(g.dropped_arcs(), 1);
    }

    #[test]
    fn rejects_bad_pdf() {
        let err = ChainGraph::new(vec![Transition::new(0, 0, 3, 1.0)], 1, 2, 0, vec![1.0]);
        assert!(matches!(err, Err(Error::Graph(_))));
    }

    #[test]
    fn rejects_unreachable_state() {
        let err = ChainGraph::new(
            vec![Transition::new(0, 0, 0, 1.0), Transition::new(1, 0, 0, 1.0)],
            2,
            1,
            0,
            vec![1.0, 0.0],
        );
        assert!(matches!(err, Err(Error::Unreachable { state: 1 })));
    }

    #[test]
    fn rejects_dead_end_state() {
        let err = ChainGraph::new(
            vec![Transition::new(0, 0, 0, 1.0), Transition::new(0, 1, 0, 1.0)],
            2,
            1,
            0,
            vec![1.0, 0.0],
        );
        assert!(matches!(err, Err(Error::NotCoaccessible { state: 1 })));
    }

    #[test]
    fn rejects_no_final() {
        let err = ChainGraph::new(vec![Transition::new(0, 0, 0, 1.0)], 1, 1, 0, vec![0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn batch_pads_with_zeros() {
        let small = ChainGraph::new(
            vec![Transition::new(0, 1, 0, 1.0), Transition::new(1, 1, 0, 0.5)],
            2,
            2,
            0,
            vec![0.0, 1.0],
        )
        .unwrap();
        let big = ChainGraph::new(
            vec![
                Transition::new(0, 1, 0, 0.5),
                Transition::new(0, 2, 1, 0.5),
                Transition::new(1, 1, 0, 0.5),
                Transition::new(2, 2, 1, 0.5),
                Transition::new(1, 2, 1, 0.5),
            ],
            3,
            2,
            0,
            vec![0.0, 0.0, 1.0],
        )
        .unwrap();
        let batch = ChainGraphBatch::from_graphs(vec![small.clone(), big.clone()]).unwrap();
        assert_eq!(batch.max_transitions(), 5);
        assert_eq!(batch.max_states(), 3);
        let ft = batch.forward_transitions();
        for i in 2..5 {
            for k in 0..3 {
                assert_eq!(ft[[0, i, k]], 0);
            }
            assert_eq!(batch.forward_probs()[[0, i]], 0.0);
        }
        assert_eq!(batch.forward_index()[[0, 2, 0]], 0);
        assert_eq!(batch.forward_index()[[0, 2, 1]], 0);
        assert_eq!(batch.extract(0).unwrap(), small);
        assert_eq!(batch.extract(1).unwrap(), big);
    }

    #[test]
    fn batch_rejects_empty_and_mismatched() {
        assert!(ChainGraphBatch::from_graphs(vec![]).is_err());
        let other = ChainGraph::new(vec![Transition::new(0, 0, 1, 1.0)], 1, 2, 0, vec![1.0]).unwrap();
        assert!(ChainGraphBatch::from_graphs(vec![self_loop(), other]).is_err());
    }

    #[test]
    fn broadcast_shares_one_copy() {
        let g = chain3();
        let batch = ChainGraphBatch::broadcast(g.clone(), 4).unwrap();
        assert!(batch.is_broadcast());
        assert_eq!(batch.num_physical(), 1);
        assert_eq!(batch.forward_transitions().dim(), (4, 2, 3));
        for b in 0..4 {
            assert_eq!(batch.extract(b).unwrap(), g);
            assert_eq!(batch.graph(b).forward_transitions(), g.forward_transitions());
        }
        assert!(ChainGraphBatch::broadcast(g, 0).is_err());
    }
}
