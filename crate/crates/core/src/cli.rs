//! Command-line front end. Any `--key value` pair that is not an option of
//! the chosen subcommand overrides the run config key of the same name.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::verify::{gradient_suite, DEFAULT_SEEDS, DEFAULT_TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "multibreath", version, about = "Respiratory sound classification with multi-head class-specific residual attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run config; `--key value` overrides win over it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset dir -> manifest.jsonl, summary.json, normalization.json.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Writes a synthetic labeled dataset and prepares it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Training cycles per class.
        #[arg(long)]
        per_class: Option<usize>,
        /// Test cycles per class.
        #[arg(long)]
        test_per_class: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Prepared work dir -> checkpoint, CSV log, loss curve.
    Train {
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Checkpoint + one split of a work dir -> metrics document.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// train or test.
        #[arg(long, default_value = "test")]
        slice: String,
        /// Also write the metrics document here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a confusion heatmap (PPM).
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Checkpoint + WAV (+ annotation file) -> per-cycle labels.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Only cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Separates config overrides from the subcommand's own options.
fn split_overrides(argv: &[OsString]) -> std::result::Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let cmd = Cli::command();
    let Some(pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok((argv.to_vec(), Vec::new()));
    };
    let sub_name = argv[pos].to_string_lossy().into_owned();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok((argv.to_vec(), Vec::new()));
    };
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut kept = argv[..=pos].to_vec();
    let mut overrides = Vec::new();
    let mut i = pos + 1;
    while i < argv.len() {
        let tok = argv[i].to_string_lossy().into_owned();
        let Some(body) = tok.strip_prefix("--") else {
            kept.push(argv[i].clone());
            i += 1;
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if known.contains(&key) {
            kept.push(argv[i].clone());
            i += 1;
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => {
                i += 1;
                argv.get(i)
                    .map(|v| v.to_string_lossy().into_owned())
                    .ok_or_else(|| format!("--{key} needs a value"))?
            }
        };
        overrides.push((key, value));
        i += 1;
    }
    Ok((kept, overrides))
}

fn resolve(cfg: &ConfigArg, overrides: &[(String, String)]) -> Result<RunConfig> {
    let resolved = RunConfig::resolve(cfg.config.as_deref(), overrides)?;
    eprintln!("# resolved config\n{}", resolved.to_toml());
    Ok(resolved)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn no_overrides(overrides: &[(String, String)]) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(Error::Config(format!("unexpected option --{k}"))),
        None => Ok(()),
    }
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<i32> {
    match command {
        Command::Prepare { data, out, cfg } => {
            let cfg = resolve(&cfg, overrides)?;
            let prepared = pipeline::prepare(&data, &cfg, &out)?;
            write_text(&out.join(pipeline::RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
            println!("{}", serde_json::to_string_pretty(&prepared.manifest.summary)?);
            Ok(0)
        }
        Command::Synth {
            out,
            per_class,
            test_per_class,
            cfg,
        } => {
            let mut overrides = overrides.to_vec();
            if let Some(n) = per_class {
                overrides.push(("synth_train_per_class".into(), n.to_string()));
            }
            if let Some(n) = test_per_class {
                overrides.push(("synth_test_per_class".into(), n.to_string()));
            }
            let cfg = resolve(&cfg, &overrides)?;
            let prepared = pipeline::synth(&cfg, &out)?;
            write_text(&out.join(pipeline::RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
            println!("{}", serde_json::to_string_pretty(&prepared.manifest.summary)?);
            Ok(0)
        }
        Command::Train { work, out, cfg } => {
            let cfg = resolve(&cfg, overrides)?;
            let outcome = pipeline::train(&work, &cfg, &out, |e| {
                eprintln!(
                    "epoch {} loss {:.6} lr {:.3e}..{:.3e} ({:.1}s)",
                    e.epoch, e.mean_loss, e.lr_start, e.lr_end, e.wall_seconds
                )
            })?;
            println!("{}", outcome.checkpoint.display());
            Ok(0)
        }
        Command::Evaluate {
            checkpoint,
            work,
            slice,
            out,
            heatmap,
            cfg,
        } => {
            let cfg = resolve(&cfg, overrides)?;
            let split = Split::parse(&slice).ok_or_else(|| Error::Config(format!("--slice {slice:?}: expected train or test")))?;
            let eval = pipeline::evaluate(&checkpoint, &work, split, cfg.threads, heatmap.as_deref())?;
            let doc = eval.report.to_document();
            print!("{doc}");
            if let Some(path) = out {
                write_text(&path, &doc)?;
            }
            Ok(0)
        }
        Command::Predict {
            checkpoint,
            audio,
            annotations,
        } => {
            no_overrides(overrides)?;
            println!("start_s\tend_s\tcrackle\twheeze\tprobabilities\tclass");
            for c in pipeline::predict(&checkpoint, &audio, annotations.as_deref())? {
                let p = &c.prediction;
                let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "{:.3}\t{:.3}\t{}\t{}\t{}\t{}",
                    c.start_s,
                    c.end_s,
                    u8::from(p.labels.crackle),
                    u8::from(p.labels.wheeze),
                    probs.join(","),
                    p.class.name()
                );
            }
            Ok(0)
        }
        Command::Gradcheck {
            seeds,
            tolerance,
            filter,
        } => {
            no_overrides(overrides)?;
            let report = gradient_suite(seeds, tolerance, filter.as_deref())?;
            for line in report.lines() {
                println!("{line}");
            }
            println!(
                "{} cases, max relative error {:.3e}: {}",
                report.cases.len(),
                report.max_rel_error(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(if report.passed() { 0 } else { 3 })
        }
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code:
/// 0 success, 1 usage or config, 2 data, 3 numerical failure.
pub fn run(argv: Vec<OsString>) -> i32 {
    let (kept, overrides) = match split_overrides(&argv) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(kept) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
