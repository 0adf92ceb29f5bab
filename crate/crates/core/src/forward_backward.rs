//! Batched probability-space forward-backward over chain graphs.
//!
//! Trellis column `t` (1-based) consumes log-likelihood frame `t - 1`. For item
//! `b` with `T_b` frames the unnormalized recursion is
//!
//! ```text
//! a_0     = e_init
//! a_t     = a_{t-1} M_t K            1 <= t < T_b
//! a_{T_b} = a_{T_b-1} M_{T_b} K F
//! ```
//!
//! where `M_t[f, s] = sum over arcs f->s of p * exp(L[t-1, d])`, `K = I + λ 1 πᵀ`
//! is the leak operator (identity when `λ = 0`) and `F = diag(final_probs)`.
//! Every column is divided by its total `c_t` and `ln c_t` is accumulated, so
//! `ln P = Σ_t ln c_t`. Emissions are shifted by the per-frame maximum
//! log-likelihood before exponentiation and the shift is added back into the
//! frame's log scale.
//!
//! The backward trellis reuses the forward scales: `β_{T_b} = final_probs` and
//! `β_{t-1} = M_t K β_t / c_t`. With this convention the arc posterior
//! `α_t[f] p E[t, d] (K β_{t+1})[s] / c_{t+1}` sums to one over the arcs of a
//! frame and equals the derivative of `ln P` with respect to `L[t, d]`, for any
//! leak coefficient.
//!
//! Within a time step, the forward pass gathers each to-state's incoming arcs
//! from the to-state-sorted layout and the backward pass each from-state's
//! outgoing arcs from the from-state-sorted layout, so every output cell has a
//! single writer. Items and (for large graphs) blocks of states run in
//! parallel on the current rayon pool. Summation order never depends on the
//! thread count, so results are bit-identical across pool sizes.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::batching::LogLikBatch;
use crate::error::{Error, Result};
use crate::graph::{ChainGraphBatch, GraphItem};

pub const DEFAULT_LEAK: f64 = 1e-5;
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-300;

/// Graphs with at least this many states also split each time step across
/// blocks of states.
const PAR_STATE_THRESHOLD: usize = 512;
const STATE_BLOCK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub enum LeakDistribution {
    /// `1 / S_b` for every state of item `b`.
    Uniform,
    /// One distribution per logical batch item, `S_b` entries each.
    PerItem(Vec<Vec<f64>>),
}

#[derive(Clone, Debug)]
pub struct FbOptions {
    pub leak_coefficient: f64,
    pub leak_distribution: LeakDistribution,
    /// An item fails when a column total drops below this.
    pub scale_floor: f64,
    /// Keep alpha and beta in the result.
    pub keep_trellis: bool,
}

impl Default for FbOptions {
    fn default() -> Self {
        FbOptions {
            leak_coefficient: DEFAULT_LEAK,
            leak_distribution: LeakDistribution::Uniform,
            scale_floor: DEFAULT_SCALE_FLOOR,
            keep_trellis: false,
        }
    }
}

impl FbOptions {
    pub fn with_leak(leak_coefficient: f64) -> Self {
        FbOptions {
            leak_coefficient,
            ..Default::default()
        }
    }

    fn validate(&self, graphs: &ChainGraphBatch) -> Result<()> {
        if !self.leak_coefficient.is_finite() || self.leak_coefficient < 0.0 {
            return Err(Error::Options(format!(
                "leak coefficient {} must be finite and non-negative",
                self.leak_coefficient
            )));
        }
        if !(self.scale_floor >= 0.0) {
            return Err(Error::Options(format!(
                "scale floor {} must be non-negative",
                self.scale_floor
            )));
        }
        if let LeakDistribution::PerItem(dists) = &self.leak_distribution {
            if dists.len() != graphs.batch_size() {
                return Err(Error::Options(format!(
                    "{} leak distributions for a batch of {}",
                    dists.len(),
                    graphs.batch_size()
                )));
            }
            for (b, pi) in dists.iter().enumerate() {
                let states = graphs.item_size(b).1;
                if pi.len() != states {
                    return Err(Error::Options(format!(
                        "leak distribution {b} has {} entries, graph has {states} states",
                        pi.len()
                    )));
                }
                if pi.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::Options(format!("leak distribution {b} has a negative entry")));
                }
                let total: f64 = pi.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Options(format!("leak distribution {b} sums to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    fn leak_for(&self, b: usize, num_states: usize) -> Leak<'_> {
        if self.leak_coefficient == 0.0 {
            return Leak::None;
        }
        match &self.leak_distribution {
            LeakDistribution::Uniform => Leak::Uniform {
                coef: self.leak_coefficient,
                share: 1.0 / num_states as f64,
            },
            LeakDistribution::PerItem(d) => Leak::Custom {
                coef: self.leak_coefficient,
                pi: &d[b],
            },
        }
    }
}

#[derive(Clone, Copy)]
enum Leak<'a> {
    None,
    Uniform { coef: f64, share: f64 },
    Custom { coef: f64, pi: &'a [f64] },
}

impl Leak<'_> {
    /// `row <- row + λ π (Σ row)`, the forward (row-vector) application of `K`.
    fn apply_forward(&self, row: &mut [f64]) {
        match *self {
            Leak::None => {}
            Leak::Uniform { coef, share } => {
                let add = coef * share * row.iter().sum::<f64>();
                row.iter_mut().for_each(|v| *v += add);
            }
            Leak::Custom { coef, pi } => {
                let tot = coef * row.iter().sum::<f64>();
                row.iter_mut().zip(pi).for_each(|(v, &p)| *v += p * tot);
            }
        }
    }

    /// `out <- beta + λ (πᵀ beta) 1`, the column-vector application of `K`.
    fn apply_backward(&self, beta: &[f64], out: &mut [f64]) {
        match *self {
            Leak::None => out.copy_from_slice(beta),
            Leak::Uniform { coef, share } => {
                let add = coef * share * beta.iter().sum::<f64>();
                out.iter_mut().zip(beta).for_each(|(o, &v)| *o = v + add);
            }
            Leak::Custom { coef, pi } => {
                let add = coef * beta.iter().zip(pi).map(|(&v, &p)| v * p).sum::<f64>();
                out.iter_mut().zip(beta).for_each(|(o, &v)| *o = v + add);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemStatus {
    Ok,
    /// No probability mass survived trellis column `frame` (1-based).
    Failed {
        frame: usize,
    },
}

impl ItemStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ItemStatus::Ok)
    }
}

/// Output of [`forward`]; feeds [`backward`] and [`occupation_posteriors`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `ln P(X_b | G_b)`; `-inf` for failed items.
    pub log_probs: Vec<f64>,
    /// Normalized `(B, T_max + 1, S_max)` forward trellis. Column `T_b`
    /// includes the final probabilities.
    pub alpha: Array3<f64>,
    /// `(B, T_max)` per-frame log scale factors; `Σ_t` over valid frames is
    /// the log-probability.
    pub scale_logs: Array2<f64>,
    pub status: Vec<ItemStatus>,
    scales: Array2<f64>,
    emissions: Array3<f64>,
}

impl ForwardPass {
    /// Column normalizers excluding the emission shift.
    pub fn scales(&self) -> &Array2<f64> {
        &self.scales
    }
}

/// Complete forward-backward output.
#[derive(Clone, Debug)]
pub struct FbResult {
    pub log_probs: Vec<f64>,
    /// `(B, T_max, D)` pdf occupation posteriors.
    pub posteriors: Array3<f64>,
    pub scale_logs: Array2<f64>,
    pub status: Vec<ItemStatus>,
    pub alpha: Option<Array3<f64>>,
    pub beta: Option<Array3<f64>>,
}

fn check_shapes(batch: &LogLikBatch, graphs: &ChainGraphBatch) -> Result<()> {
    if graphs.batch_size() != batch.batch_size() {
        return Err(Error::Shape(format!(
            "{} graphs for {} sequences",
            graphs.batch_size(),
            batch.batch_size()
        )));
    }
    if graphs.num_pdfs() != batch.num_pdfs() {
        return Err(Error::Shape(format!(
            "graphs have {} pdfs, log-likelihoods have {}",
            graphs.num_pdfs(),
            batch.num_pdfs()
        )));
    }
    Ok(())
}

/// `exp(L - max_d L)` on valid frames, plus the per-frame shifts.
fn emissions(batch: &LogLikBatch) -> (Array3<f64>, Array2<f64>) {
    let (b_size, t_max, d) = batch.values().dim();
    let mut emis = Array3::zeros((b_size, t_max, d));
    let mut shifts = Array2::zeros((b_size, t_max));
    let values = batch.values();
    for b in 0..b_size {
        for t in 0..batch.lengths()[b] {
            let row = values.slice(ndarray::s![b, t, ..]);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let m = if m.is_finite() { m } else { 0.0 };
            shifts[[b, t]] = m;
            for (e, &l) in emis.slice_mut(ndarray::s![b, t, ..]).iter_mut().zip(row) {
                *e = (l - m).exp();
            }
        }
    }
    (emis, shifts)
}

/// Gathers incoming mass for states `first..first + out.len()`.
#[inline]
fn gather_incoming(item: &GraphItem<'_>, prev: &[f64], emis: &[f64], first: usize, out: &mut [f64]) {
    for (k, cell) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in item.backward_range(first + k) {
            let from = item.backward_transitions[3 * i] as usize;
            let pdf = item.backward_transitions[3 * i + 2] as usize;
            acc += item.backward_probs[i] * prev[from] * emis[pdf];
        }
        *cell = acc;
    }
}

/// Scatters `w` back along outgoing arcs for states `first..first + out.len()`.
#[inline]
fn gather_outgoing(item: &GraphItem<'_>, w: &[f64], emis: &[f64], inv_scale: f64, first: usize, out: &mut [f64]) {
    for (k, cell) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in item.forward_range(first + k) {
            let to = item.forward_transitions[3 * i + 1] as usize;
            let pdf = item.forward_transitions[3 * i + 2] as usize;
            acc += item.forward_probs[i] * emis[pdf] * w[to];
        }
        *cell = acc * inv_scale;
    }
}

fn for_state_blocks(out: &mut [f64], f: impl Fn(usize, &mut [f64]) + Sync) {
    if out.len() >= PAR_STATE_THRESHOLD {
        out.par_chunks_mut(STATE_BLOCK)
            .enumerate()
            .for_each(|(k, chunk)| f(k * STATE_BLOCK, chunk));
    } else {
        f(0, out);
    }
}

struct ForwardItem<'a> {
    b: usize,
    alpha: &'a mut [f64],
    scales: &'a mut [f64],
    failed: Option<usize>,
}

/// Runs the forward recursion over all items.
pub fn forward(batch: &LogLikBatch, graphs: &ChainGraphBatch, opts: &FbOptions) -> Result<ForwardPass> {
    check_shapes(batch, graphs)?;
    opts.validate(graphs)?;

    let b_size = batch.batch_size();
    let t_max = batch.max_len();
    let s_max = graphs.max_states();
    let d = batch.num_pdfs();
    let lengths = batch.lengths();
    let (emissions, shifts) = emissions(batch);
    let emis_flat = emissions.as_slice().expect("contiguous");

    let mut alpha = Array3::<f64>::zeros((b_size, t_max + 1, s_max));
    let mut scales = Array2::<f64>::zeros((b_size, t_max));
    let stride = (t_max + 1) * s_max;

    let mut items: Vec<ForwardItem<'_>> = alpha
        .as_slice_mut()
        .expect("contiguous")
        .chunks_mut(stride.max(1))
        .zip(scales.as_slice_mut().expect("contiguous").chunks_mut(t_max))
        .enumerate()
        .map(|(b, (alpha, scales))| ForwardItem {
            b,
            alpha,
            scales,
            failed: None,
        })
        .collect();

    for item in &mut items {
        let init = graphs.item(item.b).initial_state;
        item.alpha[init] = 1.0;
    }

    for t in 1..=t_max {
        let active = batch.valid_batch_sizes()[t - 1];
        items[..active].par_iter_mut().for_each(|it| {
            if it.failed.is_some() {
                return;
            }
            let g = graphs.item(it.b);
            let n = g.num_states;
            let (head, tail) = it.alpha.split_at_mut(t * s_max);
            let prev = &head[(t - 1) * s_max..(t - 1) * s_max + n];
            let cur = &mut tail[..n];
            let e = &emis_flat[(it.b * t_max + t - 1) * d..(it.b * t_max + t) * d];

            for_state_blocks(cur, |first, out| gather_incoming(&g, prev, e, first, out));
            opts.leak_for(it.b, n).apply_forward(cur);
            if t == lengths[it.b] {
                cur.iter_mut().zip(g.final_probs).for_each(|(a, &f)| *a *= f);
            }
            let total: f64 = cur.iter().sum();
            if !(total >= opts.scale_floor) || !total.is_finite() || total == 0.0 {
                cur.fill(0.0);
                it.failed = Some(t);
                return;
            }
            let inv = 1.0 / total;
            cur.iter_mut().for_each(|a| *a *= inv);
            it.scales[t - 1] = total;
        });
    }

    let mut status = Vec::with_capacity(b_size);
    let mut log_probs = Vec::with_capacity(b_size);
    let mut scale_logs = Array2::<f64>::zeros((b_size, t_max));
    let failed: Vec<Option<usize>> = items.iter().map(|it| it.failed).collect();
    drop(items);
    for (b, fail) in failed.into_iter().enumerate() {
        match fail {
            Some(frame) => {
                status.push(ItemStatus::Failed { frame });
                log_probs.push(f64::NEG_INFINITY);
                alpha.index_axis_mut(Axis(0), b).fill(0.0);
                scales.index_axis_mut(Axis(0), b).fill(0.0);
            }
            None => {
                let mut lp = 0.0;
                for t in 0..lengths[b] {
                    let v = scales[[b, t]].ln() + shifts[[b, t]];
                    scale_logs[[b, t]] = v;
                    lp += v;
                }
                status.push(ItemStatus::Ok);
                log_probs.push(lp);
            }
        }
    }

    Ok(ForwardPass {
        log_probs,
        alpha,
        scale_logs,
        status,
        scales,
        emissions,
    })
}

struct BackwardItem<'a> {
    b: usize,
    beta: &'a mut [f64],
    scratch: Vec<f64>,
}

/// Runs the backward recursion using the forward pass's scales.
///
/// Returns the normalized `(B, T_max + 1, S_max)` backward trellis; for
/// valid columns `Σ_s α[b,t,s] β[b,t,s] = 1` when `t < T_b`.
pub fn backward(
    batch: &LogLikBatch,
    graphs: &ChainGraphBatch,
    opts: &FbOptions,
    fwd: &ForwardPass,
) -> Result<Array3<f64>> {
    check_shapes(batch, graphs)?;
    opts.validate(graphs)?;
    let b_size = batch.batch_size();
    let t_max = batch.max_len();
    let s_max = graphs.max_states();
    let d = batch.num_pdfs();
    if fwd.alpha.dim() != (b_size, t_max + 1, s_max) {
        return Err(Error::Shape("forward pass does not match this batch".into()));
    }
    let lengths = batch.lengths();
    let emis_flat = fwd.emissions.as_slice().expect("contiguous");
    let scales = &fwd.scales;

    let mut beta = Array3::<f64>::zeros((b_size, t_max + 1, s_max));
    let stride = (t_max + 1) * s_max;
    let mut items: Vec<BackwardItem<'_>> = beta
        .as_slice_mut()
        .expect("contiguous")
        .chunks_mut(stride.max(1))
        .enumerate()
        .filter(|(b, _)| fwd.status[*b].is_ok())
        .map(|(b, beta)| BackwardItem {
            b,
            beta,
            scratch: vec![0.0; graphs.item_size(b).1],
        })
        .collect();

    for t in (1..=t_max).rev() {
        items.par_iter_mut().for_each(|it| {
            if lengths[it.b] < t {
                return;
            }
            let g = graphs.item(it.b);
            let n = g.num_states;
            if t == lengths[it.b] {
                it.beta[t * s_max..t * s_max + n].copy_from_slice(&g.final_probs[..n]);
            }
            let (head, tail) = it.beta.split_at_mut(t * s_max);
            let next = &tail[..n];
            let cur = &mut head[(t - 1) * s_max..(t - 1) * s_max + n];
            opts.leak_for(it.b, n).apply_backward(next, &mut it.scratch);
            let w = &it.scratch;
            let e = &emis_flat[(it.b * t_max + t - 1) * d..(it.b * t_max + t) * d];
            let inv = 1.0 / scales[[it.b, t - 1]];
            for_state_blocks(cur, |first, out| gather_outgoing(&g, w, e, inv, first, out));
        });
    }
    Ok(beta)
}

/// `(B, T_max, D)` pdf occupation posteriors from matched forward and
/// backward trellises. Rows of failed items and padded frames are zero.
pub fn occupation_posteriors(
    batch: &LogLikBatch,
    graphs: &ChainGraphBatch,
    opts: &FbOptions,
    fwd: &ForwardPass,
    beta: &Array3<f64>,
) -> Result<Array3<f64>> {
    check_shapes(batch, graphs)?;
    let b_size = batch.batch_size();
    let t_max = batch.max_len();
    let s_max = graphs.max_states();
    let d = batch.num_pdfs();
    if beta.dim() != fwd.alpha.dim() || fwd.alpha.dim() != (b_size, t_max + 1, s_max) {
        return Err(Error::Shape(
            "forward and backward trellises do not match this batch".into(),
        ));
    }
    let lengths = batch.lengths();
    let alpha = fwd.alpha.as_slice().expect("contiguous");
    let beta = beta.as_slice().expect("contiguous");
    let emis_flat = fwd.emissions.as_slice().expect("contiguous");

    let mut post = Array3::<f64>::zeros((b_size, t_max, d));
    post.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(row, gamma)| {
            let (b, t) = (row / t_max, row % t_max);
            if t >= lengths[b] || !fwd.status[b].is_ok() {
                return;
            }
            let g = graphs.item(b);
            let n = g.num_states;
            let base = b * (t_max + 1) * s_max;
            let a = &alpha[base + t * s_max..base + t * s_max + n];
            let next = &beta[base + (t + 1) * s_max..base + (t + 1) * s_max + n];
            let mut w = vec![0.0; n];
            opts.leak_for(b, n).apply_backward(next, &mut w);
            let e = &emis_flat[(b * t_max + t) * d..(b * t_max + t + 1) * d];
            for (from, &af) in a.iter().enumerate() {
                if af == 0.0 {
                    continue;
                }
                for i in g.forward_range(from) {
                    let to = g.forward_transitions[3 * i + 1] as usize;
                    let pdf = g.forward_transitions[3 * i + 2] as usize;
                    gamma[pdf] += af * g.forward_probs[i] * w[to];
                }
            }
            let inv = 1.0 / fwd.scales[[b, t]];
            gamma.iter_mut().zip(e).for_each(|(v, &ev)| *v *= ev * inv);
        });
    Ok(post)
}

/// Forward, backward and posteriors in one call.
pub fn forward_backward(batch: &LogLikBatch, graphs: &ChainGraphBatch, opts: &FbOptions) -> Result<FbResult> {
    let fwd = forward(batch, graphs, opts)?;
    let beta = backward(batch, graphs, opts, &fwd)?;
    let posteriors = occupation_posteriors(batch, graphs, opts, &fwd, &beta)?;
    let keep = opts.keep_trellis;
    Ok(FbResult {
        log_probs: fwd.log_probs,
        posteriors,
        scale_logs: fwd.scale_logs,
        status: fwd.status,
        alpha: keep.then_some(fwd.alpha),
        beta: keep.then_some(beta),
    })
}

/// `ln Σ_s α[b,0,s] β[b,0,s] + Σ_t scale_logs[b,t]`, the log-probability
/// reconstructed from the backward trellis.
pub fn backward_log_prob(batch: &LogLikBatch, fwd: &ForwardPass, beta: &Array3<f64>, b: usize) -> f64 {
    if !fwd.status[b].is_ok() {
        return f64::NEG_INFINITY;
    }
    let dot: f64 = fwd
        .alpha
        .slice(ndarray::s![b, 0, ..])
        .iter()
        .zip(beta.slice(ndarray::s![b, 0, ..]))
        .map(|(a, b)| a * b)
        .sum();
    let scales: f64 = fwd.scale_logs.slice(ndarray::s![b, ..batch.lengths()[b]]).sum();
    dot.ln() + scales
}
