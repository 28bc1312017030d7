//! `layoutgen`: toy corpora, training, generation, validation and metrics
//! from one binary.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use layoutgen_core::layout::{default_templates, generate_toy_corpus, parse_corpus, write_corpus, ToyCorpusSpec};
use layoutgen_core::metrics::{compare_augmentation, layout_perplexity, ClassifierConfig, TokenizerConfig};
use layoutgen_core::model::{
    fine_tune, load_checkpoint, run_grad_check, save_checkpoint, train_with_progress, EpochLoss, FineTuneOverrides,
    TrainingConfig, CHECKPOINT_VERSION,
};
use layoutgen_core::synthesis::{
    rejection_sample, render_svg, sample_layouts, validate_corpus, SyntheticLayout, ValidationRuleConfig,
};
use layoutgen_core::{io, Error, Result};
use serde::Serialize;

use config::CliConfig;

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
// Draws allowed per requested layout under `generate --validate`.
const DRAWS_PER_TARGET: usize = 20;

#[derive(Parser)]
#[command(name = "layoutgen", about = "Graph-based document layout generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled toy corpus built from the built-in templates.
    GenToy {
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..=3))]
        classes: u64,
        #[arg(long, default_value_t = 67)]
        per_class: usize,
        #[arg(long, default_value_t = 0.01)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a checkpoint on another corpus.
    FineTune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample layouts from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep only layouts that pass the validation rules.
        #[arg(long)]
        validate: bool,
    },
    /// Check a corpus against the validation rules.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Bigram perplexity of one corpus under a model fitted on another.
    Perplexity {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// One SVG per document.
    Render {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Classification accuracy with and without synthetic training data.
    EvalDownstream {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(CHECKPOINT_VERSION.to_string().into_boxed_str());
    let parsed = Cli::command()
        .version(version)
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric_failure() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy {
            classes,
            per_class,
            jitter,
            seed,
            out,
        } => {
            let mut spec = ToyCorpusSpec::with_default_templates(per_class, jitter, seed);
            spec.classes = default_templates().into_iter().take(classes as usize).collect();
            write_corpus(&generate_toy_corpus(&spec)?, &out)
        }
        Command::Train { corpus, config, out } => {
            let cfg = CliConfig::load(config.as_deref())?;
            let docs = parse_corpus(&corpus)?;
            let epochs = cfg.training.epochs;
            let ckpt = train_with_progress(&docs, &cfg.graph, &cfg.training, |l| print_epoch(l, epochs))?;
            save_checkpoint(&ckpt, &out)
        }
        Command::FineTune {
            checkpoint,
            corpus,
            epochs,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let docs = parse_corpus(&corpus)?;
            let overrides = FineTuneOverrides {
                epochs,
                ..FineTuneOverrides::default()
            };
            let total = ckpt.loss_trace.len() + epochs;
            let tuned = fine_tune(&ckpt, &docs, &overrides, |l| print_epoch(l, total))?;
            save_checkpoint(&tuned, &out)
        }
        Command::Generate {
            checkpoint,
            n,
            seed,
            out,
            validate,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let layouts = if validate {
                let budget = n.saturating_mul(DRAWS_PER_TARGET);
                let (layouts, stats) = rejection_sample(&ckpt, n, &ValidationRuleConfig::default(), seed, budget)?;
                println!(
                    "accepted {} of {} draws (rate {:.4}); shortfall {}",
                    stats.accepted, stats.draws, stats.acceptance_rate, stats.shortfall
                );
                layouts
            } else {
                sample_layouts(&ckpt, n, seed)?
            };
            write_generated(&layouts, &out)
        }
        Command::Validate { corpus, config, report } => {
            let cfg = CliConfig::load(config.as_deref())?;
            let docs = parse_corpus(&corpus)?;
            io::write_json(&report, &validate_corpus(&docs, &cfg.validation))
        }
        Command::Perplexity {
            fit,
            eval,
            grid,
            alpha,
            report,
        } => {
            let fit = parse_corpus(&fit)?;
            let eval = parse_corpus(&eval)?;
            let r = layout_perplexity(&fit, &eval, &TokenizerConfig { grid }, alpha)?;
            io::write_json(&report, &r)
        }
        Command::Render { corpus, out_dir } => {
            let docs = parse_corpus(&corpus)?;
            let files: Vec<(PathBuf, String)> = docs
                .iter()
                .map(|d| (out_dir.join(format!("{}.svg", file_stem(&d.id))), render_svg(d)))
                .collect();
            std::fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
            for (path, svg) in files {
                io::write_atomic(&path, svg.as_bytes())?;
            }
            Ok(())
        }
        Command::EvalDownstream {
            real,
            synthetic,
            test,
            seeds,
            report,
        } => {
            let real = parse_corpus(&real)?;
            let synthetic = parse_corpus(&synthetic)?;
            let test = parse_corpus(&test)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let r = compare_augmentation(&real, &synthetic, &test, &seeds, &ClassifierConfig::default())?;
            io::write_json(&report, &r)
        }
        Command::GradCheck { seed } => {
            let r = run_grad_check(&TrainingConfig::default(), seed)?;
            let worst = r.worst.as_ref().map(|(name, i)| format!("{name}[{i}]")).unwrap_or_else(|| "-".into());
            println!(
                "max relative error {:.3e} over {} coordinates ({} nudged); worst {worst}: analytic {:.6e} numeric {:.6e}",
                r.max_rel_error, r.coordinates, r.nudged, r.analytic_at_worst, r.numeric_at_worst
            );
            if r.max_rel_error.is_finite() && r.max_rel_error < GRAD_CHECK_TOLERANCE {
                Ok(())
            } else {
                Err(Error::NumericFailure(format!(
                    "gradient check failed: {:.3e} ≥ {GRAD_CHECK_TOLERANCE:e}",
                    r.max_rel_error
                )))
            }
        }
    }
}

fn print_epoch(l: &EpochLoss, total: usize) {
    println!(
        "epoch {}/{total} generator {:.6e} discriminator {:.6e} reconstruction {:.6e}",
        l.epoch, l.generator, l.discriminator, l.reconstruction
    );
}

#[derive(Serialize)]
struct Provenance<'a> {
    id: &'a str,
    checkpoint_id: &'a str,
    latent_seed: u64,
    draw: usize,
    valid: Option<bool>,
}

/// The corpus at `out` and one provenance line per layout beside it.
fn write_generated(layouts: &[SyntheticLayout], out: &Path) -> Result<()> {
    let docs: Vec<_> = layouts.iter().map(|s| s.document.clone()).collect();
    let mut sidecar = String::new();
    for s in layouts {
        let p = Provenance {
            id: &s.document.id,
            checkpoint_id: &s.checkpoint_id,
            latent_seed: s.latent_seed,
            draw: s.draw,
            valid: s.valid,
        };
        sidecar.push_str(&serde_json::to_string(&p).expect("provenance serializes"));
        sidecar.push('\n');
    }
    write_corpus(&docs, out)?;
    io::write_atomic(&provenance_path(out), sidecar.as_bytes())
}

fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.jsonl");
    out.with_file_name(name)
}

/// Document ids with path separators or other odd characters still make
/// one flat file each.
fn file_stem(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        format!("_{s}")
    } else {
        s
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
