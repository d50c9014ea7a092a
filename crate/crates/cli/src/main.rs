use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use mlc_core::checkpoint::Checkpoint;
use mlc_core::checks::{run_module, Module};
use mlc_core::config::RunConfig;
use mlc_core::data::{generate_synthetic, DatasetDir, SynthSpec};
use mlc_core::losses::{aam_part_curves, cosine_grid, curves_to_csv};
use mlc_core::metrics::Calibration;
use mlc_core::run::{self, CHECKPOINT_FILE};

const THRESHOLDS_FILE: &str = "thresholds.json";
const REPORT_FILE: &str = "eval_report.json";
const FROZEN_FILE: &str = "frozen_graph.json";
const CURVES_FILE: &str = "loss_curves.csv";
const SPEC_FILE: &str = "spec.json";
const GRADCHECK_SEEDS: usize = 100;

#[derive(Parser)]
#[command(
    name = "mlc",
    version,
    about = "Multilabel classification with angular-margin losses"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write its config, log and best checkpoint.
    Train {
        /// Flat JSON run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (overrides the config and MLC_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a split at 0.5 and, if given, at calibrated thresholds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-class thresholds on the training split.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the graph branch once and store its channel weights.
    FreezeGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// tensor-core, losses, label-graph, decoder, backbone or all.
        #[arg(long, default_value = "all")]
        module: String,
        /// First of the seeds to run.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with correlated labels.
    GenSynth {
        /// JSON recipe; missing fields take the reference values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate both halves of the AAM loss against the cosine.
    LossCurves {
        /// Run config whose `loss.aam` settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write loss_curves.csv here instead of to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure outside the library, with its own tag.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    msg: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn fail(kind: &'static str, msg: impl Into<String>) -> anyhow::Error {
    Failure {
        kind,
        msg: msg.into(),
    }
    .into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", kind_of(&e), describe(&e));
            ExitCode::FAILURE
        }
    }
}

fn kind_of(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<mlc_core::Error>() {
            return c.kind();
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "internal"
}

/// The cause chain on one line, skipping causes a parent already printed.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Train {
            config,
            data,
            out,
            seed,
        } => train(config.as_deref(), &data, out, seed),
        Cmd::Eval {
            checkpoint,
            data,
            thresholds,
            out,
        } => eval(&checkpoint, &data, thresholds.as_deref(), out),
        Cmd::Calibrate {
            checkpoint,
            data,
            out,
        } => calibrate(&checkpoint, &data, out),
        Cmd::FreezeGraph { checkpoint, out } => freeze_graph(&checkpoint, out),
        Cmd::Gradcheck { module, seed, out } => gradcheck(&module, seed, out.as_deref()),
        Cmd::GenSynth { spec, out, seed } => gen_synth(spec.as_deref(), &out, seed),
        Cmd::LossCurves { config, out } => loss_curves(config.as_deref(), out.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `out` if given, else the directory holding `checkpoint`.
fn beside(checkpoint: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.resolved_out_dir());
    let data = DatasetDir::load(data)?;
    let art = run::train_run(&cfg, &data, &out)?;
    let o = &art.outcome;
    println!(
        "trained {} epochs; best EMA val mAP {:.4} at epoch {}; wrote {}",
        o.log.len(),
        o.best_ema_map,
        o.best_epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    thresholds: Option<&Path>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = DatasetDir::load(data)?;
    let thr = match thresholds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cal: Calibration = serde_json::from_str(&text)
                .map_err(|e| fail("json", format!("{}: {e}", p.display())))?;
            if cal.thresholds.len() != ckpt.class_names.len() {
                bail!(fail(
                    "dimension",
                    format!(
                        "{} has {} thresholds, the checkpoint has {} classes",
                        p.display(),
                        cal.thresholds.len(),
                        ckpt.class_names.len()
                    )
                ));
            }
            Some(cal.thresholds)
        }
        None => None,
    };
    let report = run::evaluate(&ckpt, &data.val, thr.as_deref())?;
    let path = beside(checkpoint, out).join(REPORT_FILE);
    write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.to_csv());
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn calibrate(checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = DatasetDir::load(data)?;
    let cal = run::calibrate(&ckpt, &data.train)?;
    let path = beside(checkpoint, out).join(THRESHOLDS_FILE);
    write(&path, serde_json::to_string_pretty(&cal)? + "\n")?;
    if !cal.flagged.is_empty() {
        eprintln!(
            "classes without training positives kept at 0.5: {:?}",
            cal.flagged
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn freeze_graph(checkpoint: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (arch, store) = ckpt.restore()?;
    let frozen = arch.freeze(&store)?;
    let path = beside(checkpoint, out).join(FROZEN_FILE);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    frozen.save(&path)?;
    println!(
        "wrote {} ({} channel weights, sha256 {})",
        path.display(),
        frozen.s,
        frozen.checksum
    );
    Ok(())
}

fn gradcheck(module: &str, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let modules = if module == "all" {
        Module::ALL.to_vec()
    } else {
        vec![module.parse::<Module>()?]
    };
    let mut results = Vec::new();
    for m in modules {
        results.extend(run_module(m, seed, GRADCHECK_SEEDS)?);
    }
    for r in &results {
        println!(
            "{} {}/{}: max rel err {:.2e} (tol {:.0e}, {} seeds, {} coordinates, {} kink probes skipped)",
            if r.passed() { "pass" } else { "FAIL" },
            r.module,
            r.check,
            r.max_rel_err,
            r.tol,
            r.seeds,
            r.checked,
            r.skipped
        );
    }
    if let Some(dir) = out {
        write(
            &dir.join("gradcheck.json"),
            serde_json::to_string_pretty(&results)? + "\n",
        )?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{} ({})", r.module, r.check, r.failures[0]))
        .collect();
    if !failed.is_empty() {
        bail!(fail("gradcheck", format!("failed: {}", failed.join("; "))));
    }
    Ok(())
}

fn gen_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| fail("config", format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::reference(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec)?;
    data.save(out)?;
    write(
        &out.join(SPEC_FILE),
        serde_json::to_string_pretty(&spec)? + "\n",
    )?;
    println!(
        "wrote {}: {} train / {} val samples, {} classes, {:.2} labels per image",
        out.display(),
        data.train.len(),
        data.val.len(),
        data.train.num_classes(),
        data.train.avg_labels_per_image()
    );
    Ok(())
}

fn loss_curves(config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let points = aam_part_curves(&cfg.loss.aam, &cosine_grid(201))?;
    let csv = curves_to_csv(&points);
    match out {
        Some(dir) => {
            let path = dir.join(CURVES_FILE);
            write(&path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
