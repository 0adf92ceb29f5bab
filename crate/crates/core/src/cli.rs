//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array_io::{read_ndarray, write_ndarray};
use crate::batching::{unsort, unsort_vec, LogLikBatch};
use crate::demo::{train_demo, DemoConfig};
use crate::error::{Error, Result};
use crate::forward_backward::{FbOptions, ItemStatus, DEFAULT_LEAK};
use crate::fst_io::{read_fst, write_fst};
use crate::gradcheck::{run_gradcheck, DEFAULT_EPS};
use crate::graph::{ChainGraph, ChainGraphBatch};
use crate::loss::{chain_loss, ChainLossResult};
use crate::synth::synthetic_corpus;
use crate::toy_builder::{
    build_denominator, build_numerator, build_numerator_den_weighted, estimate_bigram, parse_transcripts,
    BigramOptions, PhoneTable, PhoneTopology, DEFAULT_SELF_LOOP, DEFAULT_SIL_BETWEEN, DEFAULT_SIL_BOUNDARY,
    DEFAULT_SMOOTHING,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NUMERIC_FAILURE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "lfmmi", version, about = "LF-MMI loss and gradients for chain graphs")]
pub struct Cli {
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print per-utterance and batch LF-MMI objectives.
    Loss(LossArgs),
    /// Write the objective gradient w.r.t. the log-likelihoods.
    Grad {
        #[command(flatten)]
        loss: LossArgs,
        /// Output PCTN file, shape (B, T_max, D).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_LEAK)]
        leak: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Build one numerator FST per transcript line.
    MakeNum {
        #[command(flatten)]
        graph: GraphArgs,
        /// Output directory; files are named NNNNN.fst by line order.
        #[arg(long)]
        out_dir: PathBuf,
        /// Weight arcs like the matching denominator paths.
        #[arg(long)]
        den_weights: bool,
    },
    /// Build the denominator FST from a bigram phone LM.
    MakeDen {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an affine toy model on synthetic data and report the loss curve.
    TrainDemo {
        /// Transcript file; a random corpus is generated when omitted.
        #[arg(long, requires = "phones")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        phones: Option<PathBuf>,
        /// Size of the generated phone set when no corpus is given.
        #[arg(long, default_value_t = 5)]
        num_phones: usize,
        /// Number of generated utterances when no corpus is given.
        #[arg(long, default_value_t = 200)]
        utterances: usize,
        #[arg(long, default_value_t = 4)]
        frames_per_phone: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2.0)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_LEAK)]
        leak: f64,
    },
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// PCTN log-likelihoods: (B, T_max, D) with --lengths, or one (T, D) file
    /// per utterance.
    #[arg(long, num_args = 1.., required = true)]
    pub logits: Vec<PathBuf>,
    /// One frame count per line, caller order.
    #[arg(long)]
    pub lengths: Option<PathBuf>,
    /// Directory of *.fst files (sorted by name) or a file listing FST paths.
    #[arg(long)]
    pub num_fsts: PathBuf,
    #[arg(long)]
    pub den_fst: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEAK)]
    pub leak: f64,
    /// Report the loss divided by the number of valid frames.
    #[arg(long)]
    pub per_frame: bool,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    #[arg(long)]
    pub phones: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SELF_LOOP)]
    pub self_loop: f64,
    /// Silence phone to insert when estimating the LM.
    #[arg(long)]
    pub silence: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SIL_BETWEEN)]
    pub sil_between: f64,
    #[arg(long, default_value_t = DEFAULT_SIL_BOUNDARY)]
    pub sil_boundary: f64,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    pub smoothing: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<u8> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Options("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Options(format!("thread pool: {e}")))?;
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(&cli.command, &mut buf));
    out.write_all(&buf).map_err(|e| Error::io("<stdout>", e))?;
    result
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<u8> {
    match cmd {
        Command::Loss(args) => cmd_loss(args, out),
        Command::Grad { loss, out: path } => cmd_grad(loss, path, out),
        Command::Gradcheck {
            seed,
            trials,
            leak,
            eps,
        } => cmd_gradcheck(*seed, *trials, *leak, *eps, out),
        Command::MakeNum {
            graph,
            out_dir,
            den_weights,
        } => cmd_make_num(graph, out_dir, *den_weights, out),
        Command::MakeDen { graph, out: path } => cmd_make_den(graph, path, out),
        Command::TrainDemo {
            corpus,
            phones,
            num_phones,
            utterances,
            frames_per_phone,
            epochs,
            lr,
            seed,
            leak,
        } => {
            let (corpus, num_phones) = match (corpus, phones) {
                (Some(c), Some(p)) => {
                    let table = PhoneTable::parse(&read_text(p)?)?;
                    (parse_transcripts(&read_text(c)?, &table)?, table.len())
                }
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    (synthetic_corpus(&mut rng, *num_phones, *utterances), *num_phones)
                }
            };
            let cfg = DemoConfig {
                frames_per_phone: *frames_per_phone,
                epochs: *epochs,
                learning_rate: *lr,
                seed: *seed,
                fb: FbOptions::with_leak(*leak),
                ..Default::default()
            };
            let report = train_demo(&corpus, num_phones, &cfg)?;
            w(
                out,
                format_args!(
                    "utterances {} frames {} pdfs {}\n",
                    corpus.len(),
                    report.num_frames,
                    2 * num_phones
                ),
            )?;
            w(out, format_args!("epoch 0 loss {}\n", report.initial_loss))?;
            for (e, l) in report.losses.iter().enumerate() {
                w(out, format_args!("epoch {} loss {}\n", e + 1, l))?;
            }
            w(out, format_args!("frame accuracy {}\n", report.accuracy))?;
            Ok(EXIT_OK)
        }
    }
}

fn w(out: &mut dyn Write, args: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(args).map_err(|e| Error::io("<stdout>", e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Log-likelihood batch, numerators in caller order, denominator.
pub struct LossInputs {
    pub batch: LogLikBatch,
    pub numerators: Vec<ChainGraph>,
    pub denominator: ChainGraph,
}

/// Loads everything `loss`/`grad` need.
pub fn load_loss_inputs(args: &LossArgs) -> Result<LossInputs> {
    let batch = load_logits(&args.logits, args.lengths.as_deref())?;
    let d = batch.num_pdfs();
    let num_paths = list_fsts(&args.num_fsts)?;
    if num_paths.len() != batch.batch_size() {
        return Err(Error::Shape(format!(
            "{} numerator graphs for {} utterances",
            num_paths.len(),
            batch.batch_size()
        )));
    }
    let numerators = num_paths.iter().map(|p| read_fst(p, d)).collect::<Result<Vec<_>>>()?;
    let denominator = read_fst(&args.den_fst, d)?;
    Ok(LossInputs {
        batch,
        numerators,
        denominator,
    })
}

fn load_logits(paths: &[PathBuf], lengths: Option<&Path>) -> Result<LogLikBatch> {
    match lengths {
        Some(len_path) => {
            if paths.len() != 1 {
                return Err(Error::Options("--lengths requires exactly one --logits file".into()));
            }
            let arr = read_ndarray(&paths[0])?;
            if arr.ndim() != 3 {
                return Err(Error::Shape(format!(
                    "{}: expected (B, T_max, D), found shape {:?}",
                    paths[0].display(),
                    arr.shape()
                )));
            }
            let arr = arr
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::Shape(e.to_string()))?;
            let text = read_text(len_path)?;
            let lens = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| {
                    l.trim().parse::<usize>().map_err(|_| Error::Parse {
                        line: n + 1,
                        msg: format!("{}: invalid length {l:?}", len_path.display()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            LogLikBatch::from_padded(arr, &lens)
        }
        None => {
            let seqs = paths
                .iter()
                .map(|p| {
                    let a = read_ndarray(p)?;
                    if a.ndim() != 2 {
                        return Err(Error::Shape(format!(
                            "{}: expected (T, D), found shape {:?}",
                            p.display(),
                            a.shape()
                        )));
                    }
                    a.into_dimensionality::<ndarray::Ix2>()
                        .map_err(|e| Error::Shape(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            LogLikBatch::new(&seqs)
        }
    }
}

fn list_fsts(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "fst"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(read_text(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect())
    }
}

/// Runs the chain loss for caller-ordered inputs.
pub fn compute_loss(inputs: &LossInputs, leak: f64, per_frame: bool) -> Result<ChainLossResult> {
    let batch = &inputs.batch;
    let nums = ChainGraphBatch::from_graphs(batch.sort_items(&inputs.numerators)?)?;
    let den = ChainGraphBatch::broadcast(inputs.denominator.clone(), batch.batch_size())?;
    chain_loss(batch, &nums, &den, &FbOptions::with_leak(leak), per_frame)
}

fn report_loss(batch: &LogLikBatch, r: &ChainLossResult, per_frame: bool, out: &mut dyn Write) -> Result<u8> {
    let per_utt = unsort_vec(&r.per_utt, batch.order_map())?;
    let status = unsort_vec(&r.status, batch.order_map())?;
    for (u, ((num, den), st)) in per_utt.iter().zip(&status).enumerate() {
        match st {
            ItemStatus::Ok => w(out, format_args!("utt {u} num {num} den {den} obj {}\n", num - den))?,
            ItemStatus::Failed { frame } => w(out, format_args!("utt {u} failed at frame {frame}\n"))?,
        }
    }
    w(out, format_args!("objective {}\n", r.objective))?;
    let kind = if per_frame { "per-frame" } else { "total" };
    w(out, format_args!("loss {} ({kind})\n", r.loss))?;
    w(out, format_args!("frames {}\n", r.num_frames))?;
    w(out, format_args!("failed {}\n", r.num_failed))?;
    Ok(if r.num_failed > 0 {
        EXIT_NUMERIC_FAILURE
    } else {
        EXIT_OK
    })
}

fn cmd_loss(args: &LossArgs, out: &mut dyn Write) -> Result<u8> {
    let inputs = load_loss_inputs(args)?;
    let r = compute_loss(&inputs, args.leak, args.per_frame)?;
    report_loss(&inputs.batch, &r, args.per_frame, out)
}

/// Gradient in caller order, `(B, T_max, D)`.
pub fn caller_order_grad(batch: &LogLikBatch, r: &ChainLossResult) -> Result<Array3<f64>> {
    unsort(&r.grad, batch.order_map())
}

fn cmd_grad(args: &LossArgs, path: &Path, out: &mut dyn Write) -> Result<u8> {
    let inputs = load_loss_inputs(args)?;
    let r = compute_loss(&inputs, args.leak, args.per_frame)?;
    let grad = caller_order_grad(&inputs.batch, &r)?;
    write_ndarray(path, &grad.into_dimensionality::<IxDyn>().expect("3-d"))?;
    report_loss(&inputs.batch, &r, args.per_frame, out)
}

fn cmd_gradcheck(seed: u64, trials: usize, leak: f64, eps: f64, out: &mut dyn Write) -> Result<u8> {
    let report = run_gradcheck(seed, trials, &FbOptions::with_leak(leak), eps)?;
    for (i, e) in report.errors.iter().enumerate() {
        w(out, format_args!("trial {i} max_rel_err {e:e}\n"))?;
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    w(
        out,
        format_args!(
            "{verdict}: {} trials, max relative error {:e} (tolerance {:e})\n",
            report.trials, report.max_relative_error, report.tolerance
        ),
    )?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_ERROR })
}

fn load_graph_inputs(
    args: &GraphArgs,
) -> Result<(
    PhoneTable,
    Vec<crate::toy_builder::Transcript>,
    PhoneTopology,
    BigramOptions,
)> {
    let table = PhoneTable::parse(&read_text(&args.phones)?)?;
    let transcripts = parse_transcripts(&read_text(&args.transcripts)?, &table)?;
    let topo = PhoneTopology::new(table.len(), args.self_loop)?;
    let silence = match &args.silence {
        Some(name) => Some(
            table
                .lookup(name)
                .ok_or_else(|| Error::Options(format!("silence phone {name:?} not in the phone table")))?,
        ),
        None => None,
    };
    let opts = BigramOptions {
        silence,
        sil_between: args.sil_between,
        sil_boundary: args.sil_boundary,
        smoothing: args.smoothing,
    };
    Ok((table, transcripts, topo, opts))
}

fn cmd_make_num(args: &GraphArgs, out_dir: &Path, den_weights: bool, out: &mut dyn Write) -> Result<u8> {
    let (_, transcripts, topo, opts) = load_graph_inputs(args)?;
    let lm = if den_weights {
        Some(estimate_bigram(&transcripts, topo.num_phones(), &opts)?)
    } else {
        None
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, t) in transcripts.iter().enumerate() {
        let g = match &lm {
            Some(lm) => build_numerator_den_weighted(&t.phones(), &topo, lm)?,
            None => build_numerator(&t.phones(), &topo)?,
        };
        write_fst(out_dir.join(format!("{i:05}.fst")), &g)?;
    }
    w(
        out,
        format_args!(
            "wrote {} numerator graphs, {} pdfs\n",
            transcripts.len(),
            topo.num_pdfs()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_make_den(args: &GraphArgs, path: &Path, out: &mut dyn Write) -> Result<u8> {
    let (_, transcripts, topo, opts) = load_graph_inputs(args)?;
    let lm = estimate_bigram(&transcripts, topo.num_phones(), &opts)?;
    let g = build_denominator(&lm, &topo)?;
    write_fst(path, &g)?;
    w(
        out,
        format_args!(
            "wrote denominator: {} states, {} transitions, {} pdfs\n",
            g.num_states(),
            g.num_transitions(),
            topo.num_pdfs()
        ),
    )?;
    Ok(EXIT_OK)
}
