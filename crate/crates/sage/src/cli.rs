//! Command-line entry point: training, evaluation, gradient checking,
//! routing inspection, patch filtering, and synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime or
//! verification failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, Split};
use crate::error::{Result, SageError};
use crate::gradcheck;
use crate::model::{checkpoint, Model};
use crate::telemetry::{HeatmapKind, TelemetryLog};
use crate::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser)]
#[command(name = "sage", version, about = "Dynamic expert routing for toy segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model and write history, checkpoint and telemetry.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset, printing per-split metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Deliberately corrupt one gradient (negative control).
        #[arg(long)]
        corrupt: bool,
    },
    /// Replay a dataset through a checkpoint and export routing telemetry.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "routing")]
        out: PathBuf,
    },
    /// Apply the tissue-patch filter to an image/mask directory pair.
    FilterPatches {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Override rule thresholds: --set sigma_min=10 etc.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Manifest of kept patches.
        #[arg(long, default_value = "kept.txt")]
        out: PathBuf,
    },
    /// Generate a synthetic blob dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SageError::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.finish()?;
    // A command-line output directory is relative to the working
    // directory, not the config file.
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn export_telemetry(log: &TelemetryLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    log.export_heatmap(HeatmapKind::Affinity, &dir.join("affinity.csv"))?;
    log.export_heatmap(HeatmapKind::Activation, &dir.join("activation.csv"))?;
    log.export_gs(&dir.join("gs.csv"))?;
    Ok(())
}

pub fn cmd_train(args: &ConfigArgs) -> Result<i32> {
    let cfg = load_config(args)?;
    let data_dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| SageError::config("train requires data_dir"))?;
    let dataset = data::load_dataset(data_dir)?;
    let model = Model::build(cfg.model.clone())?;
    fs::create_dir_all(&cfg.out_dir)?;

    let out = train::train_with_checkpoint(
        model,
        &dataset,
        &cfg.plan,
        Some(&cfg.out_dir.join("best.ckpt")),
    )?;
    fs::write(cfg.out_dir.join("history.csv"), out.history.to_csv())?;
    checkpoint::save(&out.model, &cfg.out_dir.join("best.ckpt"))?;
    export_telemetry(&out.telemetry, &cfg.out_dir)?;

    let unused = out.telemetry.unused_experts_last_epoch();
    println!(
        "best epoch {} val dsc {:.4}; unused experts in final epoch: {}",
        out.best_epoch,
        out.best_val_dsc,
        if unused.is_empty() {
            "none".to_string()
        } else {
            format!("{unused:?}")
        }
    );
    if out.diverged {
        eprintln!("training diverged; wrote last good checkpoint");
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

pub fn cmd_eval(checkpoint_path: &Path, data_dir: &Path) -> Result<i32> {
    let model = checkpoint::load(checkpoint_path)?;
    let dataset = data::load_dataset(data_dir)?;
    if dataset.is_empty() {
        return Err(SageError::config("dataset is empty"));
    }
    for split in [Split::Train, Split::Val] {
        let idx = dataset.indices(split);
        if idx.is_empty() {
            continue;
        }
        let samples: Vec<&data::Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let outcome = train::evaluate(&model, &samples)?;
        println!(
            "{}: acc {:.6} iou {:.6} dsc {:.6} ({} images)",
            split.label(),
            outcome.metrics.acc,
            outcome.metrics.iou,
            outcome.metrics.dsc,
            samples.len()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &ConfigArgs, corrupt: bool) -> Result<i32> {
    let cfg = load_config(args)?;
    let report = gradcheck::run(&cfg.model, corrupt)?;
    print!("{}", report.render());
    Ok(if report.passed { EXIT_OK } else { EXIT_RUNTIME })
}

pub fn cmd_inspect_routing(checkpoint_path: &Path, data_dir: &Path, out: &Path) -> Result<i32> {
    let model = checkpoint::load(checkpoint_path)?;
    let dataset = data::load_dataset(data_dir)?;
    if dataset.is_empty() {
        return Err(SageError::config("dataset is empty"));
    }
    // Replay the validation split (whole set when there is none).
    let idx = {
        let val = dataset.indices(Split::Val);
        if val.is_empty() { (0..dataset.len()).collect() } else { val }
    };
    let samples: Vec<&data::Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
    let outcome = train::evaluate(&model, &samples)?;
    let mut log = TelemetryLog::new(model.layer_kinds(), model.pool.size(), model.config.top_k);
    for pred in &outcome.predictions {
        for (l, d) in pred.decisions.iter().enumerate() {
            log.record(l, d)?;
        }
    }
    log.end_epoch();
    export_telemetry(&log, out)?;
    println!(
        "recorded {} decisions over {} layers; exports in {}",
        samples.len() * model.layer_count(),
        model.layer_count(),
        out.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_filter_patches(
    images: &Path,
    masks: &Path,
    overrides: &[String],
    out: &Path,
) -> Result<i32> {
    let mut rule = data::PatchRule::default();
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SageError::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| SageError::config(format!("bad number '{v}' for {k}")))
        };
        match k.trim() {
            "sigma_min" => rule.sigma_min = parse(v)?,
            "mu_max" => rule.mu_max = parse(v)?,
            "mask_min" => rule.mask_min = parse(v)? as u64,
            other => return Err(SageError::config(format!("unknown rule key '{other}'"))),
        }
    }

    let mut names: Vec<String> = fs::read_dir(images)
        .map_err(|e| SageError::config(format!("cannot read {}: {e}", images.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.ends_with(".ppm").then(|| name.trim_end_matches(".ppm").to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(SageError::config("no .ppm images found"));
    }

    let mut kept = Vec::new();
    let mut rejected = 0usize;
    for name in &names {
        let raster = data::load_pnm(&images.join(format!("{name}.ppm")))?;
        let (mask, _, _) = data::load_mask(&masks.join(format!("{name}.pgm")))?;
        if data::patch_filter(&raster.data, &mask, &rule) {
            kept.push(name.clone());
        } else {
            rejected += 1;
        }
    }
    let mut manifest = String::new();
    for name in &kept {
        manifest.push_str(name);
        manifest.push('\n');
    }
    fs::write(out, manifest)?;
    println!("kept {} rejected {rejected}", kept.len());
    Ok(EXIT_OK)
}

pub fn cmd_synth(n: usize, height: usize, width: usize, seed: u64, out: &Path) -> Result<i32> {
    let dataset = data::synth_blobs(n, height, width, seed)?;
    data::save_dataset(out, &dataset)?;
    println!(
        "wrote {} samples ({} train / {} val) to {}",
        dataset.len(),
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Val).len(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Dispatch a parsed command; the error-to-exit-code mapping lives in
/// `run`.
pub fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Command::Gradcheck { config, corrupt } => cmd_gradcheck(config, *corrupt),
        Command::InspectRouting { checkpoint, data, out } => {
            cmd_inspect_routing(checkpoint, data, out)
        }
        Command::FilterPatches { images, masks, set, out } => {
            cmd_filter_patches(images, masks, set, out)
        }
        Command::Synth { n, height, width, seed, out } => {
            cmd_synth(*n, *height, *width, *seed, out)
        }
    }
}

/// Parse arguments and run, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and succeed; anything else is usage.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SageError::Config(_) | SageError::Parse { .. } => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
