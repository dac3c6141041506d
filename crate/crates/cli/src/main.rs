//! `chunktrain`: train, gradient-check, memory-benchmark and schedule-report
//! runs for the chunk-recurrent trainer.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 a validation
//! check found a violation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chunktrain_core::corpus::{load_tokens, synthetic, SyntheticKind};
use chunktrain_core::experiments::{
    budget_grid, chunk_size_grid, chunk_size_sweep, gradcheck_sweep, membench, schedule_run, write_membench_csv,
};
use chunktrain_core::model::{AdamConfig, AttentionMode, ModelConfig, ModelParams};
use chunktrain_core::oracle::write_budget_csv;
use chunktrain_core::tiered::{EvictPolicy, TierConfig, TierController};
use chunktrain_core::trainer::{fit, Corpus, FitConfig, Trainer};
use chunktrain_core::{Error, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("validation failed: {0}")]
    Violation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Violation(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "chunktrain", version, about = "Chunk-recurrent transformer training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with Adam and stream per-step metrics as JSON lines.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also time one step at 1/8, 1/4, 1/2 and 1× the chunk size.
        #[arg(long)]
        chunk_sweep: bool,
        /// Write the page selections of one step with the final parameters.
        #[arg(long)]
        dump_retrieval: bool,
    },
    /// Compare chunked gradients with the full-sequence reference across budgets.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Comma-separated budgets in tokens; defaults to the scaled grid.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
    },
    /// Peak KV memory of the paged cache against a contiguous cache.
    Membench {
        #[command(flatten)]
        run: RunArgs,
        /// Largest sequence length; lengths double from one chunk.
        #[arg(long, default_value_t = 4096)]
        max_len: usize,
    },
    /// Run one logged step under the offload simulator and validate it.
    ScheduleReport {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Lru,
    Eager,
}

#[derive(Args)]
struct RunArgs {
    /// Model configuration (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Token file of u32 little-endian ids.
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Synthetic corpus: random, periodic or needle.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Tokens per training sequence.
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    page_size: Option<usize>,
    /// Top-K retrieval budget in tokens.
    #[arg(long)]
    budget: Option<usize>,
    /// Attention mode for every layer: dense, topk or local.
    #[arg(long)]
    mode: Option<String>,
    /// Local attention window in pages.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    offload: Switch,
    /// Device tier capacity in pages.
    #[arg(long)]
    device_capacity: Option<usize>,
    /// Simulated host-to-device bandwidth.
    #[arg(long, value_name = "BYTES_PER_S")]
    bandwidth: Option<f64>,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    /// The model configuration with overrides applied, validated before any
    /// allocation.
    fn model(&self) -> Outcome<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_file(p).map_err(|e| match e {
                Error::Io(io) => Failure::Config(format!("{}: {io}", p.display())),
                other => other.into(),
            })?,
            None => ModelConfig::default(),
        };
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = v;
        }
        if let Some(v) = self.page_size {
            cfg.page_size = v;
        }
        if let Some(v) = self.budget {
            cfg.retrieval_budget = v;
        }
        if let Some(v) = self.window {
            cfg.local_window = v;
        }
        if let Some(m) = &self.mode {
            cfg = cfg.with_mode(m.parse::<AttentionMode>()?);
        }
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn tier(&self) -> Outcome<TierConfig> {
        let mut t = TierConfig::default();
        if let Some(v) = self.device_capacity {
            t.device_capacity_pages = v;
        }
        if let Some(v) = self.bandwidth {
            t.bandwidth_bytes_per_s = v;
        }
        if let Some(p) = self.policy {
            t.policy = match p {
                Policy::Lru => EvictPolicy::Lru,
                Policy::Eager => EvictPolicy::Eager,
            };
        }
        t.validate()?;
        Ok(t)
    }

    fn tokens(&self, cfg: &ModelConfig, min_len: usize) -> Outcome<Vec<usize>> {
        let toks = match (&self.corpus, &self.synthetic) {
            (Some(p), _) => load_tokens(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
            (None, kind) => {
                let kind: SyntheticKind = kind.as_deref().unwrap_or("random").parse()?;
                synthetic(kind, min_len.max(16 * self.seq_len), cfg.vocab_size, self.seed)?
            }
        };
        if let Some(&bad) = toks.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Failure::Config(format!("corpus token {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if toks.len() < 2 {
            return Err(Failure::Config("corpus needs at least two tokens".into()));
        }
        Ok(toks)
    }

    fn seq_len(&self) -> Outcome<usize> {
        if self.seq_len < 2 {
            return Err(Failure::Config("--seq-len must be at least 2".into()));
        }
        Ok(self.seq_len)
    }

    fn out_file(&self, name: &str) -> Outcome<BufWriter<File>> {
        std::fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Outcome {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Outcome<ModelParams<T>> {
    Ok(ModelParams::<f64>::init(cfg, seed)?.cast::<T>())
}

fn cmd_train<T: Scalar>(run: &RunArgs, chunk_sweep: bool, dump_retrieval: bool) -> Outcome {
    let cfg = run.model()?;
    let tier = run.tier()?;
    let seq_len = run.seq_len()?;
    let corpus = Corpus::new(run.tokens(&cfg, seq_len)?)?;
    let mut params = init_params::<T>(&cfg, run.seed)?;
    let mut trainer = Trainer::<T>::new(&cfg)?;
    let mut ctl = match run.offload {
        Switch::On => Some(TierController::new(tier, &cfg)?),
        Switch::Off => None,
    };
    let fc = FitConfig { steps: run.steps, seq_len, adam: AdamConfig { lr: run.lr, ..AdamConfig::default() } };

    let mut metrics = run.out_file("metrics.jsonl")?;
    let mut io_err = None;
    let history = fit(&mut trainer, &mut params, &corpus, &fc, ctl.as_mut(), |m| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut metrics, m).map_err(Failure::from).and_then(|_| {
                writeln!(metrics)?;
                Ok(())
            }) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    metrics.flush()?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("steps {} loss {:.4} -> {:.4}", history.len(), first.loss, last.loss);
    } else {
        println!("steps 0");
    }

    if dump_retrieval {
        let mut tr = Trainer::<T>::new(&cfg)?;
        tr.retrieval_log = Some(Vec::new());
        tr.train_step(&params, corpus.window(0, seq_len)?, None)?;
        let recs = tr.retrieval_log.take().unwrap_or_default();
        let mut w = run.out_file("retrieval.csv")?;
        chunktrain_core::attention::write_retrieval_csv(&recs, &mut w)?;
        w.flush()?;
    }
    if chunk_sweep {
        let sizes = chunk_size_grid(cfg.chunk_size, cfg.page_size);
        let rows = chunk_size_sweep(&cfg, &params, corpus.window(0, seq_len)?, &sizes)?;
        let mut w = run.out_file("chunk_sweep.csv")?;
        writeln!(w, "chunk_size,tokens_per_s,tape_peak_bytes,loss")?;
        for r in &rows {
            writeln!(w, "{},{},{},{}", r.chunk_size, r.tokens_per_s, r.tape_peak_bytes, r.loss)?;
            println!("chunk {:>6}: {:>10.0} tokens/s, tape peak {} B", r.chunk_size, r.tokens_per_s, r.tape_peak_bytes);
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_gradcheck<T: Scalar>(run: &RunArgs, seeds: u64, budgets: &[usize]) -> Outcome {
    let cfg = run.model()?;
    let seq_len = run.seq_len()?;
    if seeds == 0 {
        return Err(Failure::Config("--seeds must be positive".into()));
    }
    let grid = if budgets.is_empty() { budget_grid(cfg.chunk_size, cfg.page_size) } else { budgets.to_vec() };
    if let Some(b) = grid.iter().find(|&&b| b == 0 || b % cfg.page_size != 0) {
        return Err(Failure::Config(format!("budget {b} is not a positive multiple of page size {}", cfg.page_size)));
    }
    let seed_list: Vec<u64> = (run.seed..run.seed + seeds).collect();
    let outcome = gradcheck_sweep::<T>(&cfg, seq_len, &seed_list, &grid)?;
    std::fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("gradcheck.json"), &outcome)?;
    write_json(&run.out.join("grad_report_dense.json"), &outcome.dense)?;
    let mut w = run.out_file("budget_l2.csv")?;
    write_budget_csv(&outcome.rows, &mut w)?;
    w.flush()?;

    println!("dense chunked vs reference: max rel {:.3e}", outcome.dense.max_rel);
    for (b, l2) in &outcome.mean_l2_by_budget {
        println!("budget {b:>6}: mean L2 {l2:.4e}");
    }
    let tol = if T::BYTES == 4 { 1e-5 } else { 1e-10 };
    if outcome.dense.max_rel >= tol {
        return Err(Failure::Violation(format!(
            "dense chunked gradients differ from the reference by {:.3e} (tolerance {tol:e})",
            outcome.dense.max_rel
        )));
    }
    Ok(())
}

fn cmd_membench(run: &RunArgs, max_len: usize) -> Outcome {
    let cfg = run.model()?;
    if max_len < cfg.chunk_size {
        return Err(Failure::Config(format!("--max-len {max_len} is shorter than one chunk")));
    }
    let lens: Vec<usize> = std::iter::successors(Some(cfg.chunk_size), |&t| Some(t * 2)).take_while(|&t| t <= max_len).collect();
    let rows = membench(&cfg, &lens)?;
    let mut w = run.out_file("membench.csv")?;
    write_membench_csv(&rows, &mut w)?;
    w.flush()?;
    for r in &rows {
        println!(
            "T {:>7}: paged {:>10} B, contiguous {:>10} B, theoretical {:>10} B",
            r.tokens, r.paged_peak, r.contiguous_peak, r.theoretical
        );
    }
    if let Some(r) = rows.iter().find(|r| r.paged_peak != r.theoretical || r.paged_copied_bytes != 0) {
        return Err(Failure::Violation(format!("paged cache exceeds the theoretical size at T={}", r.tokens)));
    }
    Ok(())
}

fn cmd_schedule_report<T: Scalar>(run: &RunArgs) -> Outcome {
    let cfg = run.model()?;
    let tier = run.tier()?;
    let seq_len = run.seq_len()?;
    let toks = run.tokens(&cfg, seq_len)?;
    let params = init_params::<T>(&cfg, run.seed)?;
    let res = schedule_run(&cfg, &params, &toks[..seq_len.min(toks.len())], &tier)?;
    let mut w = run.out_file("schedule.jsonl")?;
    res.log.write_json_lines(&mut w)?;
    w.flush()?;
    write_json(&run.out.join("schedule_report.json"), &res)?;

    let r = &res.report;
    println!("violations      {}", r.violations.len());
    println!("stall           {:.6e} s (replay {:.6e} s)", r.stall_seconds, res.replay_stall_seconds);
    println!("overlap         {:.4}", r.overlap_fraction);
    println!("transfer bytes  {} ({} pages)", r.transfer_bytes, r.transfer_bytes / res.page_bytes.max(1));
    println!("grad transfer   {}", r.grad_transfer_bytes);
    println!("writeback bytes {}", r.writeback_bytes);
    if let Some(v) = r.violations.first() {
        return Err(Failure::Violation(format!("{} residency violations, first: {v}", r.violations.len())));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    macro_rules! by_precision {
        ($run:expr, $f:ident($($arg:expr),*)) => {
            match $run.precision {
                Precision::F32 => $f::<f32>($($arg),*),
                Precision::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match &cli.command {
        Command::Train { run, chunk_sweep, dump_retrieval } => {
            by_precision!(run, cmd_train(run, *chunk_sweep, *dump_retrieval))
        }
        Command::Gradcheck { run, seeds, budgets } => by_precision!(run, cmd_gradcheck(run, *seeds, budgets)),
        Command::Membench { run, max_len } => cmd_membench(run, *max_len),
        Command::ScheduleReport { run } => by_precision!(run, cmd_schedule_report(run)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("chunktrain: {f}");
            ExitCode::from(f.code())
        }
    }
}
