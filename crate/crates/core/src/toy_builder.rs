//! Toy numerator/denominator graph construction.
//!
//! Each phone `q` owns two pdfs: `2q` for its first frame and `2q + 1` for
//! every further frame. A phone instance is a single "loop" state entered by
//! a `2q` arc and carrying a `2q + 1` self-loop, so every phone lasts at least
//! one frame.
//!
//! The denominator is a bigram phone LM compiled onto that topology: one
//! start state fanning out to every phone by `P(q | <s>)`, and from each loop
//! state the exit mass `1 - ρ` split across successors by `P(q' | q)` or
//! spent on the final probability `P(</s> | q)`.

use std::collections::HashMap;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::{ChainGraph, Transition};

pub const DEFAULT_SELF_LOOP: f64 = 0.5;
pub const DEFAULT_SIL_BETWEEN: f64 = 0.2;
pub const DEFAULT_SIL_BOUNDARY: f64 = 0.8;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Word boundary marker in transcript files.
pub const WORD_BOUNDARY: &str = "|";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhoneTopology {
    num_phones: usize,
    self_loop_prob: f64,
}

impl PhoneTopology {
    pub fn new(num_phones: usize, self_loop_prob: f64) -> Result<Self> {
        if num_phones == 0 {
            return Err(Error::Options("topology needs at least one phone".into()));
        }
        if !(self_loop_prob > 0.0 && self_loop_prob < 1.0) {
            return Err(Error::Options(format!(
                "self-loop probability {self_loop_prob} must lie in (0, 1)"
            )));
        }
        Ok(PhoneTopology {
            num_phones,
            self_loop_prob,
        })
    }

    pub fn num_phones(&self) -> usize {
        self.num_phones
    }

    pub fn num_pdfs(&self) -> usize {
        2 * self.num_phones
    }

    pub fn self_loop_prob(&self) -> f64 {
        self.self_loop_prob
    }

    /// First-frame pdf of `phone`.
    pub fn entry_pdf(&self, phone: usize) -> u32 {
        2 * phone as u32
    }

    /// Continuation pdf of `phone`.
    pub fn loop_pdf(&self, phone: usize) -> u32 {
        2 * phone as u32 + 1
    }

    fn check_phone(&self, phone: usize) -> Result<()> {
        if phone >= self.num_phones {
            return Err(Error::Options(format!(
                "phone {phone} is not in a topology of {} phones",
                self.num_phones
            )));
        }
        Ok(())
    }
}

/// Phone names; the line number in the phone file is the phone index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhoneTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhoneTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut table = PhoneTable::default();
        for name in names {
            let name = name.into();
            if name.is_empty() || name.chars().any(char::is_whitespace) || name == WORD_BOUNDARY {
                return Err(Error::Options(format!("invalid phone name {name:?}")));
            }
            if table.index.insert(name.clone(), table.names.len()).is_some() {
                return Err(Error::Options(format!("duplicate phone {name:?}")));
            }
            table.names.push(name);
        }
        if table.names.is_empty() {
            return Err(Error::Options("empty phone table".into()));
        }
        Ok(table)
    }

    /// One phone per line. Trailing blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        let end = lines.iter().rposition(|l| !l.is_empty()).map_or(0, |p| p + 1);
        Self::new(lines[..end].iter().copied())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, phone: usize) -> &str {
        &self.names[phone]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }
}

/// An utterance as a list of words, each a non-empty list of phone indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub words: Vec<Vec<usize>>,
}

impl Transcript {
    pub fn phones(&self) -> Vec<usize> {
        self.words.iter().flatten().copied().collect()
    }
}

/// One utterance per non-blank line, phones separated by whitespace, `|`
/// between words.
pub fn parse_transcripts(text: &str, table: &PhoneTable) -> Result<Vec<Transcript>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut words = vec![Vec::new()];
        for token in line.split_whitespace() {
            if token == WORD_BOUNDARY {
                words.push(Vec::new());
                continue;
            }
            let phone = table.lookup(token).ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("unknown phone {token:?}"),
            })?;
            words.last_mut().unwrap().push(phone);
        }
        words.retain(|w| !w.is_empty());
        if words.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "utterance has no phones".into(),
            });
        }
        out.push(Transcript { words });
    }
    Ok(out)
}

pub fn format_transcript(t: &Transcript, table: &PhoneTable) -> String {
    t.words
        .iter()
        .map(|w| w.iter().map(|&p| table.name(p)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Bigram phone LM with sentence-begin and sentence-end events.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramLm {
    /// `P(q | <s>)`.
    pub begin: Vec<f64>,
    /// `trans[q][q'] = P(q' | q)`.
    pub trans: Vec<Vec<f64>>,
    /// `P(</s> | q)`.
    pub end: Vec<f64>,
}

impl BigramLm {
    pub fn new(begin: Vec<f64>, trans: Vec<Vec<f64>>, end: Vec<f64>) -> Result<Self> {
        let v = begin.len();
        if v == 0 || trans.len() != v || end.len() != v || trans.iter().any(|r| r.len() != v) {
            return Err(Error::Lm("inconsistent vocabulary sizes".into()));
        }
        let all = begin.iter().chain(trans.iter().flatten()).chain(&end);
        if all.clone().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Lm("probabilities must lie in [0, 1]".into()));
        }
        let check = |total: f64, what: String| {
            if (total - 1.0).abs() > 1e-12 {
                Err(Error::Lm(format!("{what} sums to {total}")))
            } else {
                Ok(())
            }
        };
        check(begin.iter().sum(), "P(. | <s>)".into())?;
        for q in 0..v {
            check(trans[q].iter().sum::<f64>() + end[q], format!("P(. | {q})"))?;
        }
        Ok(BigramLm { begin, trans, end })
    }

    pub fn num_phones(&self) -> usize {
        self.begin.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BigramOptions {
    /// Silence phone to insert, if any.
    pub silence: Option<usize>,
    pub sil_between: f64,
    pub sil_boundary: f64,
    /// Add-k constant.
    pub smoothing: f64,
}

impl Default for BigramOptions {
    fn default() -> Self {
        BigramOptions {
            silence: None,
            sil_between: DEFAULT_SIL_BETWEEN,
            sil_boundary: DEFAULT_SIL_BOUNDARY,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

/// Estimates a bigram over `num_phones` phones from expected counts.
///
/// Optional silence is handled without sampling: a slot that holds silence
/// with probability `q` between units `x` and `y` adds `1 - q` to `x -> y`
/// and `q` to both `x -> sil` and `sil -> y`.
pub fn estimate_bigram(transcripts: &[Transcript], num_phones: usize, opts: &BigramOptions) -> Result<BigramLm> {
    if transcripts.is_empty() {
        return Err(Error::Lm("empty corpus".into()));
    }
    if num_phones == 0 {
        return Err(Error::Lm("empty vocabulary".into()));
    }
    for (name, v) in [("sil_between", opts.sil_between), ("sil_boundary", opts.sil_boundary)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Lm(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if !(opts.smoothing >= 0.0) || !opts.smoothing.is_finite() {
        return Err(Error::Lm(format!("smoothing {} must be non-negative", opts.smoothing)));
    }
    if let Some(s) = opts.silence {
        if s >= num_phones {
            return Err(Error::Lm(format!("silence phone {s} outside the vocabulary")));
        }
    }

    // Histories 0..V are phones and V is <s>; successors 0..V are phones and V is </s>.
    let v = num_phones;
    let bos = v;
    let eos = v;
    let mut counts = vec![vec![0.0f64; v + 1]; v + 1];
    let slot = |x: usize, y: usize, q: f64, counts: &mut [Vec<f64>]| match opts.silence {
        Some(sil) if q > 0.0 => {
            counts[x][y] += 1.0 - q;
            counts[x][sil] += q;
            counts[sil][y] += q;
        }
        _ => counts[x][y] += 1.0,
    };

    for (u, t) in transcripts.iter().enumerate() {
        if t.words.iter().all(Vec::is_empty) {
            return Err(Error::Lm(format!("transcript {u} has no phones")));
        }
        let mut prev = bos;
        let mut pending = opts.sil_boundary;
        for word in t.words.iter().filter(|w| !w.is_empty()) {
            for (i, &p) in word.iter().enumerate() {
                if p >= v {
                    return Err(Error::Lm(format!(
                        "transcript {u} uses phone {p} outside the vocabulary"
                    )));
                }
                if i == 0 {
                    slot(prev, p, pending, &mut counts);
                } else {
                    counts[prev][p] += 1.0;
                }
                prev = p;
            }
            pending = opts.sil_between;
        }
        slot(prev, eos, opts.sil_boundary, &mut counts);
    }

    let k = opts.smoothing;
    let begin_total: f64 = counts[bos][..v].iter().sum::<f64>() + k * v as f64;
    let begin = counts[bos][..v].iter().map(|c| (c + k) / begin_total).collect();
    let mut trans = vec![vec![0.0; v]; v];
    let mut end = vec![0.0; v];
    for q in 0..v {
        let total: f64 = counts[q].iter().sum::<f64>() + k * (v + 1) as f64;
        if total == 0.0 {
            // Unseen history without smoothing: the phone is unreachable anyway.
            end[q] = 1.0;
            continue;
        }
        for (dst, c) in trans[q].iter_mut().zip(&counts[q][..v]) {
            *dst = (c + k) / total;
        }
        end[q] = (counts[q][eos] + k) / total;
    }
    BigramLm::new(begin, trans, end)
}

/// Linear graph accepting `phones` in order, each for one or more frames.
pub fn build_numerator(phones: &[usize], topo: &PhoneTopology) -> Result<ChainGraph> {
    numerator_with(phones, topo, |_| 1.0, |_, _| 1.0, |_| 1.0)
}

/// Like [`build_numerator`] but with arc weights taken from the denominator
/// built from `lm`, so every numerator path is also a denominator path with
/// the same weight.
pub fn build_numerator_den_weighted(phones: &[usize], topo: &PhoneTopology, lm: &BigramLm) -> Result<ChainGraph> {
    if lm.num_phones() != topo.num_phones() {
        return Err(Error::Lm(format!(
            "LM has {} phones, topology has {}",
            lm.num_phones(),
            topo.num_phones()
        )));
    }
    numerator_with(phones, topo, |q| lm.begin[q], |a, b| lm.trans[a][b], |q| lm.end[q])
}

fn numerator_with(
    phones: &[usize],
    topo: &PhoneTopology,
    begin: impl Fn(usize) -> f64,
    next: impl Fn(usize, usize) -> f64,
    end: impl Fn(usize) -> f64,
) -> Result<ChainGraph> {
    if phones.is_empty() {
        return Err(Error::Options(
            "cannot build a numerator for an empty phone sequence".into(),
        ));
    }
    for &p in phones {
        topo.check_phone(p)?;
    }
    let rho = topo.self_loop_prob();
    let n = phones.len();
    let mut arcs = Vec::with_capacity(2 * n);
    arcs.push(Transition::new(0, 1, topo.entry_pdf(phones[0]), begin(phones[0])));
    for (k, &q) in phones.iter().enumerate() {
        let state = k as u32 + 1;
        arcs.push(Transition::new(state, state, topo.loop_pdf(q), rho));
        if let Some(&q_next) = phones.get(k + 1) {
            arcs.push(Transition::new(
                state,
                state + 1,
                topo.entry_pdf(q_next),
                (1.0 - rho) * next(q, q_next),
            ));
        }
    }
    let mut final_probs = vec![0.0; n + 1];
    final_probs[n] = (1.0 - rho) * end(phones[n - 1]);
    ChainGraph::new(arcs, n + 1, topo.num_pdfs(), 0, final_probs)
}

/// Compiles `lm` onto the topology. Phones the LM cannot reach from the
/// sentence start are left out.
pub fn build_denominator(lm: &BigramLm, topo: &PhoneTopology) -> Result<ChainGraph> {
    let v = lm.num_phones();
    if v != topo.num_phones() {
        return Err(Error::Lm(format!(
            "LM has {v} phones, topology has {}",
            topo.num_phones()
        )));
    }
    let mut reachable = vec![false; v];
    let mut queue: VecDeque<usize> = (0..v).filter(|&q| lm.begin[q] > 0.0).collect();
    for &q in &queue {
        reachable[q] = true;
    }
    while let Some(q) = queue.pop_front() {
        for (q2, &p) in lm.trans[q].iter().enumerate() {
            if p > 0.0 && !reachable[q2] {
                reachable[q2] = true;
                queue.push_back(q2);
            }
        }
    }

    let mut state_of = vec![u32::MAX; v];
    let mut num_states = 1u32;
    for q in (0..v).filter(|&q| reachable[q]) {
        state_of[q] = num_states;
        num_states += 1;
    }

    let rho = topo.self_loop_prob();
    let mut arcs = Vec::new();
    let mut final_probs = vec![0.0; num_states as usize];
    for q in (0..v).filter(|&q| reachable[q]) {
        let s = state_of[q];
        arcs.push(Transition::new(0, s, topo.entry_pdf(q), lm.begin[q]));
        arcs.push(Transition::new(s, s, topo.loop_pdf(q), rho));
        for q2 in (0..v).filter(|&q2| reachable[q2]) {
            arcs.push(Transition::new(
                s,
                state_of[q2],
                topo.entry_pdf(q2),
                (1.0 - rho) * lm.trans[q][q2],
            ));
        }
        final_probs[s as usize] = (1.0 - rho) * lm.end[q];
    }
    ChainGraph::new(arcs, num_states as usize, topo.num_pdfs(), 0, final_probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(ws: &[&[usize]]) -> Transcript {
        Transcript {
            words: ws.iter().map(|w| w.to_vec()).collect(),
        }
    }

    fn no_sil_k0() -> BigramOptions {
        BigramOptions {
            smoothing: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_phone_numerator() {
        let topo = PhoneTopology::new(1, 0.5).unwrap();
        let g = build_numerator(&[0], &topo).unwrap();
        assert_eq!(g.num_states(), 2);
        assert_eq!(
            g.forward_transitions(),
            &[Transition::new(0, 1, 0, 1.0), Transition::new(1, 1, 1, 0.5)]
        );
        assert_eq!(g.final_probs(), &[0.0, 0.5]);
    }

    #[test]
    fn empty_and_unknown_phones() {
        let topo = PhoneTopology::new(2, 0.5).unwrap();
        assert!(build_numerator(&[], &topo).is_err());
        assert!(build_numerator(&[2], &topo).is_err());
        assert!(PhoneTopology::new(2, 1.0).is_err());
    }

    #[test]
    fn bigram_single_path() {
        let lm = estimate_bigram(&[words(&[&[0]])], 1, &no_sil_k0()).unwrap();
        assert_eq!(lm.begin, vec![1.0]);
        assert_eq!(lm.end, vec![1.0]);
    }

    #[test]
    fn bigram_hand_counts() {
        let corpus = [words(&[&[0, 1]]), words(&[&[0]])];
        let lm = estimate_bigram(&corpus, 2, &no_sil_k0()).unwrap();
        assert_eq!(lm.trans[0][1], 0.5);
        assert_eq!(lm.end[0], 0.5);
        assert_eq!(lm.end[1], 1.0);
        assert_eq!(lm.begin, vec![1.0, 0.0]);
    }

    #[test]
    fn silence_fractional_counts() {
        // phones: 0 = sil, 1 = a, 2 = b; corpus "a | b"
        let opts = BigramOptions {
            silence: Some(0),
            smoothing: 0.0,
            ..Default::default()
        };
        let lm = estimate_bigram(&[words(&[&[1], &[2]])], 3, &opts).unwrap();
        // <s>: a 0.2, sil 0.8
        assert!((lm.begin[0] - 0.8).abs() < 1e-15);
        assert!((lm.begin[1] - 0.2).abs() < 1e-15);
        // a: b 0.8, sil 0.2
        assert!((lm.trans[1][2] - 0.8).abs() < 1e-15);
        assert!((lm.trans[1][0] - 0.2).abs() < 1e-15);
        // b: </s> 0.2, sil 0.8
        assert!((lm.end[2] - 0.2).abs() < 1e-15);
        assert!((lm.trans[2][0] - 0.8).abs() < 1e-15);
        // sil history counts: a 0.8, b 0.2, </s> 0.8 out of 1.8
        assert!((lm.trans[0][1] - 0.8 / 1.8).abs() < 1e-15);
        assert!((lm.trans[0][2] - 0.2 / 1.8).abs() < 1e-15);
        assert!((lm.end[0] - 0.8 / 1.8).abs() < 1e-15);
    }

    #[test]
    fn smoothed_rows_normalize() {
        let corpus = [words(&[&[0, 1], &[2]]), words(&[&[2, 2]])];
        let opts = BigramOptions {
            silence: Some(3),
            ..Default::default()
        };
        let lm = estimate_bigram(&corpus, 4, &opts).unwrap();
        assert!((lm.begin.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for q in 0..4 {
            assert!((lm.trans[q].iter().sum::<f64>() + lm.end[q] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_corpus() {
        assert!(estimate_bigram(&[], 2, &BigramOptions::default()).is_err());
    }

    #[test]
    fn one_phone_denominator() {
        let alpha = 0.3;
        let lm = BigramLm::new(vec![1.0], vec![vec![alpha]], vec![1.0 - alpha]).unwrap();
        let topo = PhoneTopology::new(1, 0.5).unwrap();
        let g = build_denominator(&lm, &topo).unwrap();
        assert_eq!(g.num_states(), 2);
        assert_eq!(
            g.forward_transitions(),
            &[
                Transition::new(0, 1, 0, 1.0),
                Transition::new(1, 1, 0, 0.5 * alpha),
                Transition::new(1, 1, 1, 0.5),
            ]
        );
        assert_eq!(g.final_probs(), &[0.0, 0.5 * (1.0 - alpha)]);
    }

    #[test]
    fn denominator_is_stochastic() {
        let corpus = [words(&[&[0, 1], &[2]]), words(&[&[2, 1]])];
        let lm = estimate_bigram(&corpus, 3, &BigramOptions::default()).unwrap();
        let topo = PhoneTopology::new(3, 0.5).unwrap();
        let g = build_denominator(&lm, &topo).unwrap();
        for s in 1..g.num_states() {
            let out: f64 = g.outgoing(s).iter().map(|t| t.prob).sum::<f64>() + g.final_probs()[s];
            assert!((out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_phones_are_pruned() {
        let lm = estimate_bigram(&[words(&[&[1]])], 3, &no_sil_k0()).unwrap();
        let topo = PhoneTopology::new(3, 0.5).unwrap();
        let g = build_denominator(&lm, &topo).unwrap();
        assert_eq!(g.num_states(), 2);
        assert_eq!(g.num_pdfs(), 6);
    }

    #[test]
    fn tables_and_transcripts() {
        let table = PhoneTable::parse("sil\na\nb\n\n").unwrap();
        assert_eq!(table.len(), 3);
        let ts = parse_transcripts("a b | a\n\nb\n", &table).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].words, vec![vec![1, 2], vec![1]]);
        assert_eq!(format_transcript(&ts[0], &table), "a b | a");
        assert!(parse_transcripts("a c\n", &table).is_err());
        assert!(parse_transcripts("|\n", &table).is_err());
        assert!(PhoneTable::parse("a\na\n").is_err());
    }
}
