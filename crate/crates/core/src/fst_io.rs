//! Line-oriented text acceptor format for chain graphs.
//!
//! ```text
//! # comment
//! src dst label [weight]    arc, label = pdf_id + 1, weight = -ln(prob)
//! state [weight]            final state, weight = -ln(final_prob)
//! ```
//!
//! The source state of the first arc line is the start state. A missing
//! weight means probability one. Label 0 (epsilon) is rejected. State ids in
//! the file may be arbitrary non-negative integers; they are re-indexed densely
//! in order of first appearance, with the start state mapped to 0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ChainGraph, Transition};

/// Parses a graph over `num_pdfs` pdfs.
pub fn parse_fst_text(text: &str, num_pdfs: usize) -> Result<ChainGraph> {
    parse_fst_text_with_ids(text, num_pdfs).map(|(g, _)| g)
}

/// Like [`parse_fst_text`], also returning the file's state id for each
/// dense state index.
pub fn parse_fst_text_with_ids(text: &str, num_pdfs: usize) -> Result<(ChainGraph, Vec<u64>)> {
    enum Line {
        Arc(u64, u64, u32, f64),
        Final(u64, f64),
    }

    let mut lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let state = |f: &str| f.parse::<u64>().map_err(|_| err(format!("invalid state id {f:?}")));
        let weight = |f: Option<&&str>| -> Result<f64> {
            let Some(f) = f else { return Ok(0.0) };
            let w: f64 = f.parse().map_err(|_| err(format!("invalid weight {f:?}")))?;
            if !w.is_finite() || w < 0.0 {
                return Err(err(format!("weight {w} must be finite and non-negative")));
            }
            Ok(w)
        };
        match fields.len() {
            1 | 2 => lines.push(Line::Final(state(fields[0])?, weight(fields.get(1))?)),
            3 | 4 => {
                let label: u64 = fields[2]
                    .parse()
                    .map_err(|_| err(format!("invalid label {:?}", fields[2])))?;
                if label == 0 {
                    return Err(err("epsilon label 0 is not allowed in chain graphs".into()));
                }
                if label > num_pdfs as u64 {
                    return Err(err(format!("label {label} exceeds num_pdfs {num_pdfs}")));
                }
                lines.push(Line::Arc(
                    state(fields[0])?,
                    state(fields[1])?,
                    (label - 1) as u32,
                    weight(fields.get(3))?,
                ));
            }
            k => return Err(err(format!("expected 1 to 4 fields, found {k}"))),
        }
    }

    let start = lines.iter().find_map(|l| match l {
        Line::Arc(src, ..) => Some(*src),
        Line::Final(..) => None,
    });
    let mut ids: Vec<u64> = Vec::new();
    let mut dense: HashMap<u64, u32> = HashMap::new();
    let mut intern = |id: u64| -> u32 {
        *dense.entry(id).or_insert_with(|| {
            ids.push(id);
            (ids.len() - 1) as u32
        })
    };
    if let Some(s) = start {
        intern(s);
    }

    let mut transitions = Vec::new();
    let mut finals: Vec<(u32, f64)> = Vec::new();
    for l in &lines {
        match *l {
            Line::Arc(src, dst, pdf, w) => {
                let from = intern(src);
                let to = intern(dst);
                transitions.push(Transition::new(from, to, pdf, (-w).exp()));
            }
            Line::Final(s, w) => finals.push((intern(s), (-w).exp())),
        }
    }
    if finals.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "no final state".into(),
        });
    }

    let mut final_probs = vec![0.0; ids.len()];
    for (s, p) in finals {
        if final_probs[s as usize] != 0.0 {
            return Err(Error::Graph(format!(
                "state {} listed as final more than once",
                ids[s as usize]
            )));
        }
        final_probs[s as usize] = p;
    }
    let graph = ChainGraph::new(transitions, ids.len(), num_pdfs, 0, final_probs)?;
    Ok((graph, ids))
}

/// Writes arcs in from-state order (arcs of the initial state first), then
/// final lines. Weights use the shortest decimal that parses back to the same
/// `f64`.
pub fn serialize_fst_text(graph: &ChainGraph) -> String {
    let mut out = String::new();
    let init = graph.initial_state();
    let arcs = graph.outgoing(init).iter().chain(
        graph
            .forward_transitions()
            .iter()
            .filter(|t| t.from_state as usize != init),
    );
    for t in arcs {
        writeln!(
            out,
            "{} {} {} {}",
            t.from_state,
            t.to_state,
            t.pdf_id + 1,
            weight_of(t.prob)
        )
        .unwrap();
    }
    for (s, &p) in graph.final_probs().iter().enumerate() {
        if p > 0.0 {
            writeln!(out, "{s} {}", weight_of(p)).unwrap();
        }
    }
    out
}

fn weight_of(prob: f64) -> f64 {
    let w = -prob.ln();
    // -ln(1) is -0.0
    if w == 0.0 {
        0.0
    } else {
        w
    }
}

pub fn read_fst(path: impl AsRef<Path>, num_pdfs: usize) -> Result<ChainGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fst_text(&text, num_pdfs).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Graph(msg) => Error::Graph(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_fst(path: impl AsRef<Path>, graph: &ChainGraph) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_fst_text(graph)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_self_loop() {
        let g = parse_fst_text("0 0 1 0.0\n0 1.0\n", 1).unwrap();
        assert_eq!(g.num_states(), 1);
        assert_eq!(g.forward_transitions(), &[Transition::new(0, 0, 0, 1.0)]);
        assert!((g.final_probs()[0] - (-1.0f64).exp()).abs() < 1e-16);
        assert!((g.final_probs()[0] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn epsilon_rejected_with_line() {
        let err = parse_fst_text("0 1 0 0.5\n1\n", 2).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("epsilon"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let err = parse_fst_text("0 0 3\n0\n", 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn malformed_lines() {
        let err = parse_fst_text("# header\n0 0 1\n0 x\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_fst_text("0 0 1 0 7\n0\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_fst_text("0 0 1 -1\n0\n", 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn missing_final() {
        let err = parse_fst_text("0 0 1\n", 1).unwrap_err();
        assert!(err.to_string().contains("no final"));
    }

    #[test]
    fn start_state_and_first_appearance() {
        // Start is 7; 3 appears before 5.
        let text = "7 3 1\n5 5 1\n7 5 2 0.5\n3 5 1\n5 0\n";
        let (g, ids) = parse_fst_text_with_ids(text, 2).unwrap();
        assert_eq!(ids, vec![7, 3, 5]);
        assert_eq!(g.initial_state(), 0);
        assert_eq!(g.final_probs(), &[0.0, 0.0, 1.0]);
        assert_eq!(g.outgoing(0).len(), 2);
    }

    #[test]
    fn serializes_self_loop() {
        let g = ChainGraph::new(vec![Transition::new(0, 0, 0, 1.0)], 1, 1, 0, vec![1.0]).unwrap();
        assert_eq!(serialize_fst_text(&g), "0 0 1 0\n0 0\n");
    }

    #[test]
    fn serializes_half_as_ln2() {
        let g = ChainGraph::new(
            vec![Transition::new(0, 0, 0, 0.5), Transition::new(0, 0, 1, 0.5)],
            1,
            2,
            0,
            vec![1.0],
        )
        .unwrap();
        let text = serialize_fst_text(&g);
        assert!(text.starts_with("0 0 1 0.6931471805599453\n"), "{text}");
    }

    #[test]
    fn initial_state_arcs_come_first() {
        let g = ChainGraph::new(
            vec![
                Transition::new(0, 0, 0, 0.5),
                Transition::new(1, 0, 0, 1.0),
                Transition::new(0, 0, 0, 0.25),
            ],
            2,
            1,
            1,
            vec![1.0, 0.0],
        )
        .unwrap();
        let text = serialize_fst_text(&g);
        assert!(text.starts_with("1 0 1 0\n"), "{text}");
        let back = parse_fst_text(&text, 1).unwrap();
        assert_eq!(back.initial_state(), 0);
        assert_eq!(back.num_transitions(), 3);
    }
}
