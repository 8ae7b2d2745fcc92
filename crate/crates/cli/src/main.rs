//! `deva`: data generation, description generation, training, evaluation,
//! ablation and gradient checking from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use deva_core::edg::io::{read_au_track, read_prosody};
use deva_core::edg::{detect_candidates, generate_aed, generate_ved, select_top_k, DescriptionLexicon, TertileTable};
use deva_core::harness::ablate::{ablate, parse_toggles};
use deva_core::harness::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use deva_core::harness::config::TrainConfig;
use deva_core::harness::data::{fit_dataset_tertiles, ingest, prepare};
use deva_core::harness::gradcheck::{model_grad_check, DEFAULT_STEP, DEFAULT_TOLERANCE};
use deva_core::harness::metrics::{compute_metrics, fine_grained};
use deva_core::harness::synth::{generate_synthetic, SyntheticSpec};
use deva_core::harness::train::Session;
use deva_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "deva", version, about = "Text-guided multimodal sentiment fusion with emotional descriptions")]
struct Cli {
    /// Log progress to standard error (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML training config; absent keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Start from the full-size profile (d=128, batch 64, 80 epochs).
    #[arg(long)]
    full_scale: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig, Error> {
        let base = if self.full_scale {
            TrainConfig::full_scale()
        } else {
            TrainConfig::default()
        };
        match &self.config {
            Some(path) => TrainConfig::from_toml_file_over(&base, path),
            None => Ok(base),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    GenData {
        /// TOML synthetic spec; defaults apply when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the audio and visual descriptions of one utterance as JSON lines.
    Edg {
        #[arg(long)]
        au_file: PathBuf,
        #[arg(long)]
        prosody_file: PathBuf,
        /// Fitted tertile table (JSON), e.g. the `tertiles.json` written by gen-data.
        #[arg(long)]
        tertiles: PathBuf,
        /// Number of action units in the visual description.
        #[arg(long, default_value_t = deva_core::edg::DEFAULT_TOP_K)]
        k: usize,
        /// Visual description template with a `{aus}` placeholder.
        #[arg(long)]
        template: Option<String>,
        /// Intensity at or above which an action unit counts as active.
        #[arg(long, default_value_t = deva_core::edg::DEFAULT_AU_THRESHOLD)]
        threshold: f64,
        /// TOML lexicon override.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train a model; the checkpoint is rewritten after every epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Store tensors in single precision.
        #[arg(long)]
        f32: bool,
    },
    /// Evaluate a checkpoint's best parameters on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add the per-label-interval breakdown.
        #[arg(long)]
        fine_grained: bool,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
    },
    /// Train the base model and each toggled variant and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated subset of no_aed, no_ved, no_raw_av, no_ceu, no_mfu, no_edg, no_fusion_layer.
        #[arg(long, default_value = "")]
        toggles: String,
        /// Dataset directory; a default synthetic set is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Also write the comparison table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the whole model.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn gen_data(spec: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let spec = match spec {
        Some(p) => SyntheticSpec::from_toml_file(p)?,
        None => SyntheticSpec::default(),
    };
    let manifest = generate_synthetic(&spec, out)?;
    let ds = ingest(out)?;
    let tertiles = fit_dataset_tertiles(&ds, Default::default())?;
    let path = out.join("tertiles.json");
    let text = serde_json::to_string_pretty(&tertiles).map_err(Error::from)?;
    std::fs::write(&path, text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })?;
    print_json(&manifest)
}

#[allow(clippy::too_many_arguments)]
fn edg(
    au_file: &Path,
    prosody_file: &Path,
    tertiles: &Path,
    k: usize,
    template: Option<&str>,
    threshold: f64,
    lexicon: Option<&Path>,
) -> Result<(), Failure> {
    let lex = match lexicon {
        Some(p) => DescriptionLexicon::from_toml_file(p)?,
        None => DescriptionLexicon::default(),
    };
    let table = TertileTable::from_json_file(tertiles)?;
    let (series, pwarn) = read_prosody(prosody_file)?;
    let (track, awarn) = read_au_track(au_file, threshold)?;
    for w in &pwarn {
        log::warn!("{}: {w}", prosody_file.display());
    }
    for w in &awarn {
        log::warn!("{}: {w}", au_file.display());
    }
    let aus = select_top_k(&detect_candidates(&track), k)?;
    let template = template.unwrap_or(&lex.ved_template);
    let aed = generate_aed(&series, &table, &lex)?;
    let ved = generate_ved(&aus, &lex, template)?;
    let au_names: Vec<String> = aus.iter().map(ToString::to_string).collect();
    let mut out = std::io::stdout().lock();
    let lines = [
        json!({"description": "aed", "text": aed}),
        json!({"description": "ved", "text": ved, "aus": au_names}),
    ];
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn train(config: TrainConfig, data: &Path, out: &Path, resume: Option<&Path>, precision: Precision) -> Result<(), Failure> {
    let ds = ingest(data)?;
    let (mut session, prepared) = match resume {
        Some(ckpt) => {
            let s = load_checkpoint(ckpt)?;
            if s.config.model != config.model {
                log::warn!("resuming with the checkpoint's model config; the given one differs");
            }
            let p = prepare(&ds, &s.config, Some(s.vocab.clone()), Some(s.tertiles.clone()))?;
            (s, p)
        }
        None => {
            let p = prepare(&ds, &config, None, None)?;
            (Session::new(config, &p)?, p)
        }
    };
    while session.epoch < session.config.optim.epochs {
        let record = session.run_epoch(&prepared)?;
        eprintln!(
            "epoch {:>3}  loss {:.4}{}",
            record.epoch,
            record.train_loss,
            record
                .valid
                .as_ref()
                .map(|v| format!("  valid mae {:.4}", v.mae))
                .unwrap_or_default()
        );
        save_checkpoint(&session, out, precision)?;
    }
    save_checkpoint(&session, out, precision)?;
    let test = if prepared.test.is_empty() {
        None
    } else {
        Some(session.evaluate(&prepared.test, true)?)
    };
    print_json(&json!({
        "checkpoint": out,
        "epochs": session.epoch,
        "best_epoch": session.best.as_ref().map(|b| b.epoch),
        "history": session.history,
        "test": test,
    }))
}

fn eval(ckpt: &Path, data: &Path, fine: bool, split: &str) -> Result<(), Failure> {
    let session = load_checkpoint(ckpt)?;
    let ds = ingest(data)?;
    let prepared = prepare(&ds, &session.config, Some(session.vocab.clone()), Some(session.tertiles.clone()))?;
    let examples = prepared.split(split);
    if examples.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")).into());
    }
    let preds = session.predict(examples, true)?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let metrics = compute_metrics(&preds, &labels, prepared.label_range)?;
    let fine_grained = if fine {
        Some(fine_grained(&preds, &labels, prepared.label_range)?)
    } else {
        None
    };
    print_json(&json!({
        "checkpoint": ckpt,
        "split": split,
        "label_range": prepared.label_range,
        "best_epoch": session.best.as_ref().map(|b| b.epoch),
        "metrics": metrics,
        "fine_grained": fine_grained,
    }))
}

fn parse_seeds(list: &str) -> Result<Vec<u64>, Failure> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim().parse().map_err(|_| Failure {
                code: 1,
                message: format!("invalid seed `{s}`"),
            })
        })
        .collect()
}

fn run_ablate(config: TrainConfig, toggles: &str, data: Option<&Path>, seeds: Option<&str>, csv: Option<&Path>) -> Result<(), Failure> {
    let toggles = parse_toggles(toggles)?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![config.optim.seed],
    };
    let scratch;
    let dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            scratch = tempfile::tempdir().map_err(|e| Failure {
                code: 2,
                message: e.to_string(),
            })?;
            generate_synthetic(&SyntheticSpec::default(), scratch.path())?;
            scratch.path().to_path_buf()
        }
    };
    let prepared = prepare(&ingest(&dir)?, &config, None, None)?;
    let report = ablate(&config, &toggles, &seeds, &prepared)?;
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()?).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        })?;
    }
    print_json(&report)
}

fn grad_check(config: TrainConfig, seed: u64, step: f64, tol: f64) -> Result<(), Failure> {
    let report = model_grad_check(&config, seed, step, tol)?;
    let failures: Vec<_> = report
        .failures()
        .map(|f| json!({"parameter": f.name, "max_rel_error": f.max_rel_error, "analytic": f.analytic, "numeric": f.numeric}))
        .collect();
    print_json(&json!({
        "passed": report.passed(),
        "parameters": report.entries.len(),
        "step": report.step,
        "tolerance": report.tol,
        "max_rel_error": report.max_rel_error(),
        "failures": failures,
    }))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("gradient check failed: max relative error {:.3e}", report.max_rel_error()),
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out),
        Command::Edg {
            au_file,
            prosody_file,
            tertiles,
            k,
            template,
            threshold,
            lexicon,
        } => edg(&au_file, &prosody_file, &tertiles, k, template.as_deref(), threshold, lexicon.as_deref()),
        Command::Train {
            config,
            data,
            out,
            resume,
            f32,
        } => {
            let precision = if f32 { Precision::F32 } else { Precision::F64 };
            train(config.load()?, &data, &out, resume.as_deref(), precision)
        }
        Command::Eval {
            ckpt,
            data,
            fine_grained,
            split,
        } => eval(&ckpt, &data, fine_grained, &split),
        Command::Ablate {
            config,
            toggles,
            data,
            seeds,
            csv,
        } => run_ablate(config.load()?, &toggles, data.as_deref(), seeds.as_deref(), csv.as_deref()),
        Command::GradCheck { config, seed, step, tol } => grad_check(config.load()?, seed, step, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
