//! Toy end-to-end training: an affine map from synthetic frame features to
//! pdf scores, trained by gradient ascent on the LF-MMI objective.
//!
//! Each transcript is expanded to a frame-level pdf alignment (first frame of
//! a phone uses its entry pdf, the rest its loop pdf). A frame's feature is
//! the aligned pdf's prototype vector plus Gaussian noise. The model never
//! sees the alignment; it is used only to score frame accuracy.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::batching::LogLikBatch;
use crate::error::{Error, Result};
use crate::forward_backward::FbOptions;
use crate::graph::{ChainGraph, ChainGraphBatch};
use crate::loss::chain_loss;
use crate::toy_builder::{
    build_denominator, build_numerator, estimate_bigram, BigramOptions, PhoneTopology, Transcript,
};

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub frames_per_phone: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fb: FbOptions,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            frames_per_phone: 4,
            feature_dim: 8,
            noise: 0.5,
            epochs: 10,
            learning_rate: 2.0,
            batch_size: 16,
            seed: 0,
            fb: FbOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoReport {
    /// Frame-normalized loss on the whole corpus after each epoch.
    pub losses: Vec<f64>,
    /// Loss before training.
    pub initial_loss: f64,
    pub accuracy: f64,
    pub num_frames: usize,
}

struct Utterance {
    features: Array2<f64>,
    alignment: Vec<usize>,
    numerator: ChainGraph,
}

struct Model {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Model {
    fn scores(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }
}

fn synthesize<R: Rng>(
    rng: &mut R,
    corpus: &[Transcript],
    topo: &PhoneTopology,
    cfg: &DemoConfig,
) -> Result<Vec<Utterance>> {
    let prototypes = Array2::from_shape_simple_fn((topo.num_pdfs(), cfg.feature_dim), || {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Options(e.to_string()))?;
    let mu = cfg.frames_per_phone.max(1);
    corpus
        .iter()
        .map(|t| {
            let phones = t.phones();
            let mut alignment = Vec::new();
            for &q in &phones {
                let dur = rng.random_range(mu.saturating_sub(1).max(1)..=mu + 1);
                alignment.push(topo.entry_pdf(q) as usize);
                alignment.extend(std::iter::repeat_n(topo.loop_pdf(q) as usize, dur - 1));
            }
            let mut features = Array2::zeros((alignment.len(), cfg.feature_dim));
            for (mut row, &pdf) in features.axis_iter_mut(Axis(0)).zip(&alignment) {
                for (x, &p) in row.iter_mut().zip(prototypes.row(pdf)) {
                    *x = p + noise.sample(rng);
                }
            }
            Ok(Utterance {
                features,
                alignment,
                numerator: build_numerator(&phones, topo)?,
            })
        })
        .collect()
}

/// Objective gradient w.r.t. the model over `utts`; returns
/// `(objective, frames, d_weights, d_bias)`.
fn batch_step(
    model: &Model,
    utts: &[&Utterance],
    den: &ChainGraph,
    fb: &FbOptions,
) -> Result<(f64, usize, Array2<f64>, Array1<f64>)> {
    let scores: Vec<Array2<f64>> = utts.iter().map(|u| model.scores(&u.features)).collect();
    let batch = LogLikBatch::new(&scores)?;
    let nums = batch.sort_items(&utts.iter().map(|u| u.numerator.clone()).collect::<Vec<_>>())?;
    let num = ChainGraphBatch::from_graphs(nums)?;
    let den = ChainGraphBatch::broadcast(den.clone(), utts.len())?;
    let r = chain_loss(&batch, &num, &den, fb, false)?;

    let mut dw = Array2::zeros(model.weights.raw_dim());
    let mut db = Array1::zeros(model.bias.raw_dim());
    for (k, &src) in batch.order_map().iter().enumerate() {
        let len = batch.lengths()[k];
        let g = r.grad.slice(ndarray::s![k, ..len, ..]);
        dw += &g.t().dot(&utts[src].features);
        db += &g.sum_axis(Axis(0));
    }
    Ok((r.objective, r.num_frames, dw, db))
}

fn corpus_loss(model: &Model, utts: &[Utterance], den: &ChainGraph, fb: &FbOptions) -> Result<f64> {
    let all: Vec<&Utterance> = utts.iter().collect();
    let (obj, frames, ..) = batch_step(model, &all, den, fb)?;
    Ok(-obj / frames as f64)
}

/// Trains on `corpus` (phone indices below `num_phones`) and reports the loss
/// curve and final frame accuracy.
pub fn train_demo(corpus: &[Transcript], num_phones: usize, cfg: &DemoConfig) -> Result<DemoReport> {
    if corpus.is_empty() {
        return Err(Error::Options("empty training corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.feature_dim == 0 {
        return Err(Error::Options(
            "batch size and feature dimension must be positive".into(),
        ));
    }
    let topo = PhoneTopology::new(num_phones, crate::toy_builder::DEFAULT_SELF_LOOP)?;
    let lm = estimate_bigram(corpus, num_phones, &BigramOptions::default())?;
    let den = build_denominator(&lm, &topo)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut utts = synthesize(&mut rng, corpus, &topo, cfg)?;
    utts.sort_by_key(|u| std::cmp::Reverse(u.features.nrows()));
    let num_frames = utts.iter().map(|u| u.alignment.len()).sum();

    let mut model = Model {
        weights: Array2::zeros((topo.num_pdfs(), cfg.feature_dim)),
        bias: Array1::zeros(topo.num_pdfs()),
    };
    let initial_loss = corpus_loss(&model, &utts, &den, &cfg.fb)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for chunk in utts.chunks(cfg.batch_size) {
            let refs: Vec<&Utterance> = chunk.iter().collect();
            let (_, frames, dw, db) = batch_step(&model, &refs, &den, &cfg.fb)?;
            let step = cfg.learning_rate / frames as f64;
            model.weights.scaled_add(step, &dw);
            model.bias.scaled_add(step, &db);
        }
        losses.push(corpus_loss(&model, &utts, &den, &cfg.fb)?);
    }

    let mut correct = 0usize;
    for u in &utts {
        let scores = model.scores(&u.features);
        for (row, &target) in scores.axis_iter(Axis(0)).zip(&u.alignment) {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (d, &v)| if v > acc.1 { (d, v) } else { acc },
                )
                .0;
            correct += usize::from(best == target);
        }
    }

    Ok(DemoReport {
        losses,
        initial_loss,
        accuracy: correct as f64 / num_frames as f64,
        num_frames,
    })
}
