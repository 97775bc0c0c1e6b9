//! `egofront`: prepare paired data, train, sample, evaluate, rank and run
//! ablation sweeps. Exit status is 0 on success, 1 for bad input and 2 for
//! internal failures.

mod ablate;
mod eval;
mod failure;
mod infer;
mod prep;
mod rank;
mod rundir;
mod toy;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use egofront::datapipe::Split;
use egofront::schedule::SamplerKind;

use failure::{Failure, Outcome};

#[derive(Parser)]
#[command(name = "egofront", version, about = "Egocentric-to-frontal view synthesis with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ancestral,
    Strided,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ancestral => SamplerKind::Ancestral,
            SamplerArg::Strided => SamplerKind::Strided,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pair ego and frontal captures into a manifest.
    Prep {
        #[arg(long)]
        ego_dir: PathBuf,
        #[arg(long)]
        frontal_dir: PathBuf,
        /// Manifest to write; the drop report goes beside it.
        #[arg(long)]
        out: PathBuf,
        /// Maximum ego/frontal time difference in seconds.
        #[arg(long, default_value_t = 1.0)]
        window: f64,
        /// Ego frames kept per frontal frame.
        #[arg(long, default_value_t = 10)]
        per_frontal: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Train a model; outputs land in `<output root>/run-<config digest>`.
    Train {
        config: PathBuf,
        /// `section.key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long, conflicts_with = "resume_from")]
        resume: bool,
        /// Continue from a specific checkpoint written with the same config.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        /// Parent of run directories (else $EGOFRONT_OUTPUT_ROOT, then
        /// `paths.output_root`, then ./runs).
        #[arg(long)]
        output_root: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Generate a frontal image from one ego image and a pose mask.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ego: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampling steps (defaults to the checkpoint's sampler setting).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
    },
    /// Score a checkpoint on one manifest split, per body region.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        /// Attach garment-type accuracy from the toy-data classifier.
        #[arg(long)]
        toy_classifier: bool,
        /// Also write ego | mask | prediction | target grids.
        #[arg(long)]
        samples: bool,
    },
    /// Borda aggregation of a ranking-ballot file.
    Rank {
        ballots: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train and evaluate every combination of a config matrix.
    Ablate {
        matrix: PathBuf,
        #[arg(long)]
        output_root: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Render a procedural capture fixture (frontal/ and ego/ directories).
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        subjects: usize,
        /// Ego frames per subject.
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Prep { ego_dir, frontal_dir, out, window, per_frontal, val_fraction } => {
            let args = prep::PrepArgs {
                ego_dir: &ego_dir,
                frontal_dir: &frontal_dir,
                out: &out,
                window,
                per_frontal,
                val_fraction,
            };
            if let Some(report) = prep::run(&args)? {
                return Err(Failure::user(format!("some frames could not be used:\n{report}")));
            }
        }
        Command::Train { config, overrides, resume, resume_from, output_root, quiet } => {
            let loaded = train::LoadedConfig::load(&config, &overrides)?;
            let root = rundir::output_root(output_root.as_deref(), loaded.config.paths.output_root.as_deref());
            let mode = match (&resume_from, resume) {
                (Some(p), _) => train::Resume::From(p),
                (None, true) => train::Resume::Latest,
                (None, false) => train::Resume::No,
            };
            let outcome = train::train(&loaded, &root, mode, quiet)?;
            println!("{}", outcome.dir.display());
            let s = &outcome.summary;
            eprintln!(
                "config {}: {} steps, loss {:.4} -> {:.4} (last-25 mean {:.4})",
                &s.config_hash[..12],
                s.steps,
                s.initial_total,
                s.final_total,
                s.tail_mean_total
            );
        }
        Command::Infer { checkpoint, ego, mask, out, steps, seed, sampler } => {
            let args = infer::InferArgs {
                checkpoint: &checkpoint,
                ego: &ego,
                mask: &mask,
                out: &out,
                steps,
                seed,
                sampler: sampler.map(Into::into),
            };
            for p in infer::run(&args)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            oracle,
            manifest,
            data_root,
            split,
            out,
            steps,
            seed,
            sampler,
            toy_classifier,
            samples,
        } => {
            let predictor = match (&checkpoint, oracle) {
                (_, true) => eval::Predictor::Oracle,
                (Some(c), false) => eval::Predictor::Checkpoint(c),
                (None, false) => return Err(Failure::user("pass --checkpoint or --oracle")),
            };
            let args = eval::EvalArgs {
                predictor,
                manifest: &manifest,
                data_root: data_root.as_deref(),
                split: split.into(),
                out: &out,
                steps,
                seed,
                sampler: sampler.map(Into::into),
                toy_classifier,
                save_samples: samples,
            };
            print!("{}", eval::run(&args)?.to_table());
        }
        Command::Rank { ballots, out } => {
            print!("{}", rank::run(&ballots, &out)?.to_table());
        }
        Command::Ablate { matrix, output_root, quiet } => {
            let root = rundir::output_root(output_root.as_deref(), None);
            let (dir, report) = ablate::run(&matrix, &root, quiet)?;
            print!("{}", ablate::render(&report));
            eprintln!("wrote {}", dir.display());
        }
        Command::Toy { out, subjects, frames, resolution, seed } => {
            if subjects == 0 || frames == 0 || resolution < 8 {
                return Err(Failure::user("need at least one subject, one frame and 8 pixels"));
            }
            let (f, e) = toy::write_fixture(&out, subjects, frames, resolution, seed)?;
            eprintln!("wrote {f} frontal and {e} ego frames under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
