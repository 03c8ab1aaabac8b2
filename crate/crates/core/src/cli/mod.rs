//! The `swamp` command line: dataset generation, training, evaluation,
//! ablation sweeps and reports.

pub mod ablate;
pub mod checkpoint;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::retrieval_eval::{evaluate_paired, Direction, ErrorType, RetrievalReport, RECALL_KS};
use crate::synthgen::{self, Split};
use crate::trainer::{Modality, TrainConfig};
use ablate::{AblationParam, Sweep};
use checkpoint::Checkpoint;
use run::{LoadedData, RunRequest};

pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const INPUT: i32 = 5;
    pub const NUMERIC: i32 = 6;
}

#[derive(Debug, Parser)]
#[command(
    name = "swamp",
    version,
    about = "Swapped class assignment for cross-modal retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired dataset.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Fill the `seconds` column of metrics.csv.
        #[arg(long)]
        timings: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "a2b")]
        direction: Direction,
        #[arg(long = "error", default_value = "pair")]
        error_type: ErrorType,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one config field over values and seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base_config: Option<PathBuf>,
        /// One of K, lambda, queue, eta, assignment, init.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Keep completed runs whose config matches.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize every run manifest below a directory as markdown.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit_code::CONFIG,
        Error::Io { .. } => exit_code::IO,
        Error::Dimension { .. } | Error::Input(_) | Error::Contract(_) | Error::Format(_) => {
            exit_code::INPUT
        }
        Error::NumericAbort { .. }
        | Error::DegenerateEmbedding { .. }
        | Error::DegenerateTarget { .. } => exit_code::NUMERIC,
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&text)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const EVAL_HEADER: &str = "split,direction,error,r1,r5,r10,median_rank,n_queries";

pub fn eval_csv(split: Split, report: &RetrievalReport) -> String {
    let recalls: Vec<String> = RECALL_KS
        .iter()
        .map(|&k| report.recall(k).to_string())
        .collect();
    format!(
        "{EVAL_HEADER}\n{},{},{},{},{},{}\n",
        split_name(split),
        report.direction,
        report.error_type,
        recalls.join(","),
        report.median_rank,
        report.n_queries
    )
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Evaluates a checkpoint on a dataset split after checking that the input
/// dimensions agree.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    data: &synthgen::PairedDataset,
    split: Split,
    direction: Direction,
    error_type: ErrorType,
) -> Result<RetrievalReport> {
    let model = &ck.model;
    let want = (model.input_dim(Modality::A), model.input_dim(Modality::B));
    let have = (data.dim_a(), data.dim_b());
    if want != have {
        return Err(Error::dim(
            "eval",
            format!(
                "model takes inputs (a: {}, b: {}) but dataset has xa {}x{} and xb {}x{}",
                want.0,
                want.1,
                data.len(),
                have.0,
                data.len(),
                have.1
            ),
        ));
    }
    let view = data.pairs(split);
    let fa = model.embed(Modality::A, &view.xa)?;
    let fb = model.embed(Modality::B, &view.xb)?;
    let (q, g) = match direction {
        Direction::AToB => (&fa, &fb),
        Direction::BToA => (&fb, &fa),
    };
    evaluate_paired(q, g, &data.labels_of(split), direction, error_type)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { seed, out } => {
            let ds = synthgen::generate(seed)?;
            synthgen::save(&ds, &out)?;
            let [tr, va, te] = ds.split_counts();
            println!(
                "wrote {} pairs ({tr}/{va}/{te}) to {}",
                ds.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out_dir,
            timings,
        } => {
            let config = read_config(config.as_deref())?;
            let data = LoadedData::read(&data)?;
            let m = run::run_train(&RunRequest {
                data: &data,
                config,
                out_dir: out_dir.clone(),
                timings,
                sweep: None,
            })?;
            if let Some(best) = &m.best {
                println!(
                    "best epoch {} (val pair R@1 {:.2})",
                    best.epoch, best.val_r1_pair
                );
            }
            for r in &m.test {
                println!(
                    "test {} {}: R@1 {:.2} R@5 {:.2} R@10 {:.2} MedR {}",
                    r.direction,
                    r.error_type,
                    r.recall(1),
                    r.recall(5),
                    r.recall(10),
                    r.median_rank
                );
            }
            println!("run written to {}", out_dir.display());
        }
        Command::Eval {
            model,
            data,
            split,
            direction,
            error_type,
            out,
        } => {
            let ck = Checkpoint::load(&model)?;
            let ds = synthgen::load(&data)?;
            let report = evaluate_checkpoint(&ck, &ds, split, direction, error_type)?;
            let csv = eval_csv(split, &report);
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
        }
        Command::Ablate {
            data,
            base_config,
            param,
            values,
            seeds,
            out_dir,
            resume,
        } => {
            let param: AblationParam = param.parse()?;
            let base = read_config(base_config.as_deref())?;
            let threads = ablate::threads_from_env()?;
            let data = LoadedData::read(&data)?;
            let sweep = Sweep {
                param,
                values,
                seeds,
                base,
                out_dir: out_dir.clone(),
                resume,
                threads,
            };
            let result = ablate::run_sweep(&sweep, &data)?;
            info!(
                "summary written to {}",
                out_dir.join(ablate::SUMMARY_FILE).display()
            );
            if let Some(e) = result.first_error {
                return Err(e);
            }
        }
        Command::Report { runs, out } => {
            let text = report::build_report(&runs)?;
            write_text(&out, &text)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit_code::USAGE
            } else {
                exit_code::OK
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit_code::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
