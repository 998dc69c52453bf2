//! `tabgen`: batch frontend for splitting, pretraining, fitting, generating
//! and evaluating. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tabgen_core::config::RunConfig;
use tabgen_core::data::{
    fit_preprocess, load_csv, load_csv_with_schema, make_splits, read_split_plan, write_csv, write_split_plan,
    TableDataset,
};
use tabgen_core::eval::{evaluate, overfit_report};
use tabgen_core::pipeline::{
    fit, fit_on_split, generate, load_bundle, prepare_datasets, pretrain, save_bundle, FrozenFrontEnd,
    PretrainedWeights, BUNDLE_VERSION,
};
use tabgen_core::rng::hash_bytes;
use tabgen_core::store::write_atomic;

#[derive(Parser)]
#[command(name = "tabgen", version, about = "Latent diffusion generator for mixed-type tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory; run manifests go to `<out>/manifests/`.
    #[arg(long)]
    out: PathBuf,
    /// Directory for cached encoder latents.
    #[arg(long, env = "TABGEN_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a repeated train/val/test/holdout split plan.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// JSON schema sidecar; inferred from the cells when omitted.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Disable stratification on the target column.
        #[arg(long)]
        no_stratify: bool,
    },
    /// Pretrain the shared denoiser and decoder on several tables.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Training table; repeat the flag for each dataset.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Fit pretrained weights to one table and write a generator bundle.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        pretrained: PathBuf,
        /// Fit on the training part of this split plan instead of all rows.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 0, requires = "split")]
        repeat: usize,
    },
    /// Draw synthetic rows from a bundle.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    /// Score a synthetic table against the real one.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    artifact_version: u32,
    tool_version: &'static str,
    config: RunConfig,
    seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file.
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started_unix_ms: u128,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    summary: serde_json::Value,
}

struct Run {
    command: &'static str,
    config: RunConfig,
    seed: u64,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> Result<Self> {
        let config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let mut run = Self {
            command,
            config,
            seed: common.seed,
            out: common.out.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
            started: SystemTime::now(),
            clock: Instant::now(),
        };
        if let Some(p) = &common.config {
            run.input(p)?;
        }
        Ok(run)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            // bundles are identified by their manifest, which lists file hashes
            hash_bytes(&std::fs::read(tabgen_core::pipeline::bundle_manifest_path(path))?)
        } else {
            hash_bytes(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        };
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self) -> Result<PathBuf> {
        let started_unix_ms = self.started.duration_since(UNIX_EPOCH).unwrap_or_default().as_millis();
        let manifest = RunManifest {
            command: self.command.to_string(),
            artifact_version: BUNDLE_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            seeds: BTreeMap::from([("seed".to_string(), self.seed)]),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_ms,
            wall_seconds: self.clock.elapsed().as_secs_f64(),
            summary: self.summary,
        };
        let nanos = self.started.duration_since(UNIX_EPOCH).unwrap_or_default().as_nanos();
        let path = self.out.join("manifests").join(format!("{}-{nanos}.json", self.command));
        if path.exists() {
            bail!("manifest {} already exists", path.display());
        }
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

fn load_table(run: &mut Run, data: &Path, schema: Option<&Path>) -> Result<TableDataset> {
    run.input(data)?;
    if let Some(s) = schema {
        run.input(s)?;
    }
    Ok(load_csv(data, schema)?)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn execute(command: Command) -> Result<PathBuf> {
    match command {
        Command::Split {
            common,
            data,
            schema,
            repeats,
            no_stratify,
        } => {
            let mut run = Run::start("split", &common)?;
            let ds = load_table(&mut run, &data, schema.as_deref())?;
            let plan = make_splits(&ds, repeats, common.seed, !no_stratify)?;
            if let Some(w) = &plan.warning {
                log::warn!("{w}");
            }
            let path = run.output("splits.json");
            write_split_plan(&path, &plan)?;
            log::info!("wrote {} repeats over {} rows to {}", plan.n_repeats, plan.n_rows, path.display());
            run.finish()
        }
        Command::Pretrain { common, data } => {
            let mut run = Run::start("pretrain", &common)?;
            let mut tables = Vec::new();
            for path in &data {
                tables.push((dataset_name(path), load_table(&mut run, path, None)?));
            }
            let front = FrozenFrontEnd::from_config(&run.config)?;
            let prepared = prepare_datasets(&tables, &run.config, &front, common.cache_dir.as_deref())?;
            let checkpoint = run.output("pretrain.ckpt");
            let trainer = pretrain(&prepared, &run.config, common.seed, Some(&checkpoint))?;
            let weights_path = run.output("pretrained.tensors");
            trainer.weights().save(&weights_path)?;
            log::info!("wrote {}", weights_path.display());
            run.finish()
        }
        Command::Fit {
            common,
            data,
            schema,
            pretrained,
            split,
            repeat,
        } => {
            let mut run = Run::start("fit", &common)?;
            let ds = load_table(&mut run, &data, schema.as_deref())?;
            run.input(&pretrained)?;
            let weights = PretrainedWeights::load(&pretrained)?;
            let front = FrozenFrontEnd::from_config(&run.config)?;
            let cache = common.cache_dir.as_deref();
            let (bundle, report) = match &split {
                Some(plan_path) => {
                    run.input(plan_path)?;
                    let plan = read_split_plan(plan_path)?;
                    fit_on_split(&ds, &plan, repeat, &weights, &run.config, &front, common.seed, cache)?
                }
                None => fit(&ds, &weights, &run.config, &front, common.seed, cache)?,
            };
            let dir = run.output("bundle");
            save_bundle(&bundle, &dir)?;
            let report_path = run.output("fit_report.json");
            write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            run.summary = serde_json::json!({
                "diffusion_eval": report.diffusion_eval,
                "decoder_eval": report.decoder_eval,
            });
            log::info!("wrote bundle to {}", dir.display());
            run.finish()
        }
        Command::Generate { common, bundle, n } => {
            let mut run = Run::start("generate", &common)?;
            run.input(&bundle)?;
            let mut loaded = load_bundle(&bundle)?;
            if common.config.is_some() {
                // only sampling keys may differ from the fitted configuration
                loaded.config.reverse_steps = run.config.reverse_steps;
                loaded.config.decode_mode = run.config.decode_mode.clone();
                loaded.config.temperature = run.config.temperature;
            }
            run.config = loaded.config.clone();
            let table = generate(&loaded, n as usize, common.seed)?;
            let path = run.output("synthetic.csv");
            write_csv(&path, &table)?;
            log::info!("wrote {n} rows to {}", path.display());
            run.finish()
        }
        Command::Evaluate {
            common,
            real,
            synth,
            holdout,
            schema,
        } => {
            let mut run = Run::start("evaluate", &common)?;
            let real_ds = load_table(&mut run, &real, schema.as_deref())?;
            run.input(&synth)?;
            let synth_ds = load_csv_with_schema(&synth, &real_ds.schema)?;
            let holdout_ds = match &holdout {
                Some(p) => {
                    run.input(p)?;
                    Some(load_csv_with_schema(p, &real_ds.schema)?)
                }
                None => None,
            };
            let state = fit_preprocess(&real_ds)?;
            let report = evaluate(&real_ds, &synth_ds, &state, holdout_ds.as_ref())?;
            let csv_path = run.output("report.csv");
            write_atomic(&csv_path, report.to_csv().as_bytes())?;
            let json_path = run.output("report.json");
            let body = match &holdout_ds {
                Some(h) => serde_json::to_value(overfit_report(&real_ds, h, &synth_ds, &state)?)?,
                None => serde_json::to_value(&report)?,
            };
            write_atomic(&json_path, serde_json::to_string_pretty(&body)?.as_bytes())?;
            for (name, value) in report.flat().iter().take(5) {
                println!("{name}\t{value:.6}");
            }
            run.summary = serde_json::json!({
                "shape": report.shape,
                "trend": report.trend,
                "dcr_raw": report.dcr_raw,
                "dcr_score": report.dcr_score,
                "authenticity": report.authenticity,
            });
            run.finish()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 for usage errors and 0 for --help/--version
            e.exit();
        }
    };
    match execute(cli.command) {
        Ok(manifest) => {
            log::info!("manifest {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
