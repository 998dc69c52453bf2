//! Multi-dataset pretraining, fitting to an unseen table, generation and
//! bundle persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{fit_preprocess, transform, FeatureSchema, PreprocessState, SplitPlan, TableDataset};
use crate::decoder::{decode_to_table, decoder_inputs, decoder_loss, decoder_train_step, DecoderTransformer, Detokenizer};
use crate::diffusion::{
    diffusion_loss, draw_noise, reverse_sample, sample_batch_rows, train_step, DenoiserNetwork, EdmDenoiser,
};
use crate::encoder::{cache_latents, EncoderConfig, FrozenEncoder, LatentCache};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::optim::{Optimizer, Plateau, TrainState};
use crate::rng::{self, Rng};
use crate::store::{write_atomic, DType, Tensor, TensorFile, TensorMap};
use crate::tokenizer::TokenizerParams;

pub const BUNDLE_VERSION: u32 = 1;
const CHECKPOINT_KIND: &str = "pretrain-checkpoint";
const PRETRAINED_KIND: &str = "pretrained";

/// The frozen front end: tokenizer and encoder.
pub struct FrozenFrontEnd {
    pub encoder: FrozenEncoder,
    pub tokenizer: TokenizerParams,
}

impl FrozenFrontEnd {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            encoder: FrozenEncoder::build_surrogate(cfg.encoder())?,
            tokenizer: TokenizerParams::new(cfg.latent_dim, cfg.encoder_seed, cfg.perturbation_seed)?,
        })
    }

    pub fn with_encoder(cfg: &RunConfig, encoder: FrozenEncoder) -> Result<Self> {
        if encoder.config().latent_dim != cfg.latent_dim {
            return Err(Error::Config(format!(
                "encoder latent dim {} differs from configured {}",
                encoder.config().latent_dim,
                cfg.latent_dim
            )));
        }
        Ok(Self {
            encoder,
            tokenizer: TokenizerParams::new(cfg.latent_dim, cfg.encoder_seed, cfg.perturbation_seed)?,
        })
    }
}

/// A dataset after preprocessing and latent extraction.
pub struct PreparedDataset {
    pub name: String,
    pub state: PreprocessState,
    /// Standardised values and codes, the reconstruction target.
    pub x: Array2<f64>,
    pub cache: LatentCache,
    pub z0: Array3<f64>,
}

impl PreparedDataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.state.schema
    }
}

pub fn prepare_dataset(
    name: &str,
    raw: &TableDataset,
    cfg: &RunConfig,
    front: &FrozenFrontEnd,
    cache_dir: Option<&Path>,
) -> Result<PreparedDataset> {
    let state = fit_preprocess(raw)?;
    let pre = transform(raw, &state)?;
    let cache = cache_latents(&pre, &front.encoder, &front.tokenizer, cfg.fold_seed, cache_dir)?;
    let z0 = cache.normalized();
    Ok(PreparedDataset {
        name: name.to_string(),
        state,
        x: pre.values,
        cache,
        z0,
    })
}

/// Prepares every dataset, attributing any failure to the dataset's name.
pub fn prepare_datasets(
    raw: &[(String, TableDataset)],
    cfg: &RunConfig,
    front: &FrozenFrontEnd,
    cache_dir: Option<&Path>,
) -> Result<Vec<PreparedDataset>> {
    raw.iter()
        .map(|(name, ds)| {
            prepare_dataset(name, ds, cfg, front, cache_dir).map_err(|e| Error::Pretrain {
                dataset: name.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

fn diffusion_state(cfg: &RunConfig, lr: f64) -> TrainState {
    TrainState::new(
        Optimizer::adamw(lr, cfg.diffusion_weight_decay),
        Plateau::new(cfg.plateau_factor, cfg.plateau_patience),
        cfg.gradient_clipping,
    )
}

fn decoder_state(cfg: &RunConfig, lr: f64) -> TrainState {
    TrainState::new(
        Optimizer::sgd(lr, cfg.decoder_weight_decay),
        Plateau::new(cfg.plateau_factor, cfg.plateau_patience),
        cfg.gradient_clipping,
    )
}

fn param_names<P: Params>(p: &P) -> Vec<String> {
    p.params().into_iter().map(|v| v.name).collect()
}

/// Denoiser and decoder transformer shared across datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedWeights {
    pub config: RunConfig,
    pub denoiser: DenoiserNetwork,
    pub decoder: DecoderTransformer,
}

impl PretrainedWeights {
    /// Freshly initialised weights, the starting point of pretraining.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config: cfg.clone(),
            denoiser: DenoiserNetwork::new(cfg.denoiser(), rng::derive_seed(seed, &[0xd1]))?,
            decoder: DecoderTransformer::new(cfg.decoder(), rng::derive_seed(seed, &[0xd2]))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::new()
            .with_meta("kind", PRETRAINED_KIND)
            .with_meta("config", &self.config);
        f.insert_all("denoiser.", self.denoiser.to_tensors());
        f.insert_all("decoder.", self.decoder.to_tensors());
        f.write(path, DType::F32)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::read(path)?;
        if f.meta_str("kind") != Some(PRETRAINED_KIND) {
            return Err(Error::Binding(format!("{} is not a pretrained-weights file", path.display())));
        }
        let config: RunConfig = serde_json::from_value(f.meta.get("config").cloned().unwrap_or_default())?;
        let mut w = Self::init(&config, 0)?;
        w.denoiser.load_tensors(&f.subset("denoiser."))?;
        w.decoder.load_tensors(&f.subset("decoder."))?;
        Ok(w)
    }
}

/// Round-robin pretraining state; everything needed to resume exactly.
pub struct Pretrainer {
    pub config: RunConfig,
    pub seed: u64,
    pub denoiser: DenoiserNetwork,
    pub decoder: DecoderTransformer,
    /// Per-dataset heads, created on first visit and never exported.
    pub detokenizers: BTreeMap<usize, Detokenizer>,
    pub diffusion: TrainState,
    pub decoding: TrainState,
    pub rounds_done: usize,
    dataset_keys: Vec<String>,
}

fn dataset_keys(datasets: &[PreparedDataset]) -> Vec<String> {
    datasets.iter().map(|d| format!("{}:{}", d.name, d.cache.source_hash)).collect()
}

impl Pretrainer {
    pub fn new(cfg: &RunConfig, seed: u64, datasets: &[PreparedDataset]) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("pretraining needs at least one dataset".into()));
        }
        let w = PretrainedWeights::init(cfg, seed)?;
        Ok(Self {
            config: cfg.clone(),
            seed,
            denoiser: w.denoiser,
            decoder: w.decoder,
            detokenizers: BTreeMap::new(),
            diffusion: diffusion_state(cfg, cfg.diffusion_learning_rate),
            decoding: decoder_state(cfg, cfg.decoder_learning_rate),
            rounds_done: 0,
            dataset_keys: dataset_keys(datasets),
        })
    }

    fn check_datasets(&self, datasets: &[PreparedDataset]) -> Result<()> {
        if dataset_keys(datasets) != self.dataset_keys {
            return Err(Error::Binding("datasets differ from those the pretraining state was built with".into()));
        }
        Ok(())
    }

    fn order(&self, round: usize, m: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..m).collect();
        if self.config.shuffle_datasets {
            let mut r = rng::rng_from(self.seed, &[0x0dde, round as u64]);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        }
        order
    }

    /// One full pass: for each dataset, the diffusion steps then the decoder
    /// steps.
    pub fn run_round(&mut self, datasets: &[PreparedDataset]) -> Result<()> {
        self.check_datasets(datasets)?;
        let round = self.rounds_done;
        let cfg = self.config.clone();
        let (precond, schedule) = (cfg.preconditioner(), cfg.schedule());
        for m in self.order(round, datasets.len()) {
            let d = &datasets[m];
            let batch = cfg.batch_size.min(d.n_rows());
            let mut r = rng::rng_from(self.seed, &[0x9e7, round as u64, m as u64]);
            for _ in 0..cfg.diffusion_steps_per_dataset {
                let rows = sample_batch_rows(d.n_rows(), batch, &mut r);
                let z = d.z0.select(Axis(0), &rows);
                train_step(&mut self.diffusion, &mut self.denoiser, precond, &schedule, &z, &mut r)?;
            }
            log::info!(
                "round {} dataset {}: diffusion step {} loss {:.5}",
                round + 1,
                d.name,
                self.diffusion.step,
                self.diffusion.losses.last().copied().unwrap_or(f64::NAN)
            );
            let det = self.detokenizers.entry(m).or_insert_with(|| {
                Detokenizer::new(d.schema(), cfg.latent_dim, rng::derive_seed(self.seed, &[0xe7a, m as u64]))
            });
            let before = self.denoiser.content_hash();
            let den = EdmDenoiser::new(&self.denoiser, precond);
            for _ in 0..cfg.decoder_steps_per_dataset {
                let rows = sample_batch_rows(d.n_rows(), batch, &mut r);
                let target = d.x.select(Axis(0), &rows);
                decoder_train_step(
                    &mut self.decoding,
                    &mut self.decoder,
                    det,
                    &den,
                    &schedule,
                    &d.cache,
                    &rows,
                    &target,
                    cfg.latent_source,
                    &mut r,
                )?;
            }
            if self.denoiser.content_hash() != before {
                return Err(Error::Frozen("denoiser changed during decoder training".into()));
            }
            log::info!(
                "round {} dataset {}: decoder step {} loss {:.5}",
                round + 1,
                d.name,
                self.decoding.step,
                self.decoding.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        self.rounds_done += 1;
        Ok(())
    }

    /// Runs the remaining rounds, checkpointing after each when a path is
    /// given.
    pub fn run(&mut self, datasets: &[PreparedDataset], checkpoint: Option<&Path>) -> Result<()> {
        while self.rounds_done < self.config.rounds {
            self.run_round(datasets)?;
            if let Some(path) = checkpoint {
                self.save_checkpoint(path)?;
            }
        }
        Ok(())
    }

    /// Shared weights rounded to storage precision.
    pub fn weights(&self) -> PretrainedWeights {
        let mut w = PretrainedWeights {
            config: self.config.clone(),
            denoiser: self.denoiser.clone(),
            decoder: self.decoder.clone(),
        };
        w.denoiser.round_to_f32();
        w.decoder.round_to_f32();
        w
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::new()
            .with_meta("kind", CHECKPOINT_KIND)
            .with_meta("config", &self.config)
            .with_meta("seed", self.seed.to_string())
            .with_meta("rounds_done", self.rounds_done)
            .with_meta("datasets", &self.dataset_keys)
            .with_meta("detokenizers", self.detokenizers.keys().collect::<Vec<_>>());
        f.insert_all("denoiser.", self.denoiser.to_tensors());
        f.insert_all("decoder.", self.decoder.to_tensors());
        for (m, det) in &self.detokenizers {
            f.insert_all(&format!("detok{m}."), det.to_tensors());
        }
        f.insert_all("diffusion_state.", self.diffusion.to_tensors());
        f.insert_all("decoder_state.", self.decoding.to_tensors());
        f.write(path, DType::F64)
    }

    pub fn resume(path: &Path, datasets: &[PreparedDataset]) -> Result<Self> {
        let f = TensorFile::read(path)?;
        if f.meta_str("kind") != Some(CHECKPOINT_KIND) {
            return Err(Error::Binding(format!("{} is not a pretraining checkpoint", path.display())));
        }
        let meta = |k: &str| {
            f.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Corrupt { path: path.to_path_buf(), message: format!("missing `{k}`") })
        };
        let config: RunConfig = serde_json::from_value(meta("config")?)?;
        let seed: u64 = meta("seed")?
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Corrupt { path: path.to_path_buf(), message: "bad seed".into() })?;
        let mut p = Self::new(&config, seed, datasets)?;
        let keys: Vec<String> = serde_json::from_value(meta("datasets")?)?;
        if keys != p.dataset_keys {
            return Err(Error::Binding("checkpoint was written for different datasets".into()));
        }
        p.rounds_done = serde_json::from_value(meta("rounds_done")?)?;
        p.denoiser.load_tensors(&f.subset("denoiser."))?;
        p.decoder.load_tensors(&f.subset("decoder."))?;
        let dets: Vec<usize> = serde_json::from_value(meta("detokenizers")?)?;
        for m in dets {
            let d = datasets
                .get(m)
                .ok_or_else(|| Error::Binding(format!("checkpoint references dataset {m}")))?;
            let mut det = Detokenizer::new(d.schema(), config.latent_dim, 0);
            det.load_tensors(&f.subset(&format!("detok{m}.")))?;
            p.detokenizers.insert(m, det);
        }
        p.diffusion.load_tensors(&f.subset("diffusion_state."), &param_names(&p.denoiser))?;
        p.decoding.load_tensors(&f.subset("decoder_state."), &[])?;
        Ok(p)
    }
}

/// Pretrains from scratch, or resumes from `checkpoint` when it exists.
pub fn pretrain(
    datasets: &[PreparedDataset],
    cfg: &RunConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<Pretrainer> {
    let mut p = match checkpoint {
        Some(path) if path.exists() => {
            let p = Pretrainer::resume(path, datasets)?;
            if p.seed != seed || p.config != *cfg {
                return Err(Error::Config("checkpoint was written with a different seed or config".into()));
            }
            log::info!("resuming after round {}", p.rounds_done);
            p
        }
        _ => Pretrainer::new(cfg, seed, datasets)?,
    };
    p.run(datasets, checkpoint)?;
    Ok(p)
}

/// Everything needed to generate; no encoder required.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorBundle {
    pub config: RunConfig,
    pub denoiser: DenoiserNetwork,
    pub decoder: DecoderTransformer,
    pub detokenizer: Detokenizer,
    pub mu: Array2<f64>,
    pub sd: Array2<f64>,
    pub tokenizer: TokenizerParams,
    pub encoder_hash: String,
    pub encoder_config: EncoderConfig,
    pub preprocess: PreprocessState,
}

impl GeneratorBundle {
    pub fn schema(&self) -> &[FeatureSchema] {
        &self.preprocess.schema
    }
}

/// Loss trajectories and hash trail of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub diffusion_losses: Vec<f64>,
    pub decoder_losses: Vec<f64>,
    /// Losses on a fixed evaluation batch before and after each stage.
    pub diffusion_eval: (f64, f64),
    pub decoder_eval: (f64, f64),
    pub denoiser_hash_initial: String,
    pub denoiser_hash_after_diffusion: String,
    pub denoiser_hash_after_decoder: String,
    pub train_rows: Vec<usize>,
}

fn eval_batch(n: usize, cfg: &RunConfig, seed: u64) -> (Vec<usize>, Rng) {
    let mut r = rng::rng_from(seed, &[0xe7a1]);
    let rows = sample_batch_rows(n, cfg.batch_size.min(n), &mut r);
    (rows, r)
}

/// Logs roughly ten progress lines per stage.
fn log_progress(stage: &str, step: usize, total: usize, loss: f64) {
    if step.is_multiple_of((total / 10).max(1)) || step == total {
        log::info!("{stage} step {step}/{total} loss {loss:.5}");
    }
}

/// Fits pretrained weights to one training table and assembles a bundle.
pub fn fit(
    train: &TableDataset,
    pretrained: &PretrainedWeights,
    cfg: &RunConfig,
    front: &FrozenFrontEnd,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<(GeneratorBundle, FitReport)> {
    cfg.validate()?;
    if train.schema.len() < 2 || train.values.ncols() != train.schema.len() {
        return Err(Error::Fit(format!("need at least two columns, got {}", train.schema.len())));
    }
    let arch = |c: &RunConfig| (c.latent_dim, c.diffusion_layers, c.diffusion_heads, c.decoder_layers, c.decoder_heads);
    if arch(cfg) != arch(&pretrained.config) {
        return Err(Error::Config("architecture keys differ from the pretrained weights".into()));
    }
    front.encoder.verify_frozen()?;
    let d = prepare_dataset("train", train, cfg, front, cache_dir)?;
    let (precond, schedule) = (cfg.preconditioner(), cfg.schedule());
    let n = d.n_rows();
    let batch = cfg.batch_size.min(n);

    let mut denoiser = pretrained.denoiser.clone();
    let hash0 = denoiser.content_hash();
    let (eval_rows, mut er) = eval_batch(n, cfg, seed);
    let eval_z = d.z0.select(Axis(0), &eval_rows);
    let (eval_sig, eval_noise) = draw_noise(&schedule, eval_z.dim(), &mut er);
    let diff_before = diffusion_loss(&denoiser, precond, &eval_z, &eval_sig, &eval_noise)?;
    let mut st = diffusion_state(cfg, cfg.fit_learning_rate);
    let mut r = rng::rng_from(seed, &[0xf17, 1]);
    for step in 1..=cfg.fit_diffusion_steps {
        let rows = sample_batch_rows(n, batch, &mut r);
        let z = d.z0.select(Axis(0), &rows);
        let loss = train_step(&mut st, &mut denoiser, precond, &schedule, &z, &mut r)?;
        log_progress("fit diffusion", step, cfg.fit_diffusion_steps, loss);
    }
    denoiser.round_to_f32();
    let diff_after = diffusion_loss(&denoiser, precond, &eval_z, &eval_sig, &eval_noise)?;
    let hash1 = denoiser.content_hash();
    log::info!("fit diffusion: {} steps, eval loss {diff_before:.5} -> {diff_after:.5}", cfg.fit_diffusion_steps);

    let den = EdmDenoiser::new(&denoiser, precond);
    let mut decoder = pretrained.decoder.clone();
    let mut det = Detokenizer::new(d.schema(), cfg.latent_dim, rng::derive_seed(seed, &[0xf17, 2]));
    let eval_target = d.x.select(Axis(0), &eval_rows);
    let eval_h = decoder_inputs(&den, &schedule, &d.cache, &eval_rows, cfg.latent_source, &mut er)?;
    let dec_before = decoder_loss(&decoder, &det, &eval_h, &eval_target)?;
    let mut dst = decoder_state(cfg, cfg.fit_decoder_lr());
    for step in 1..=cfg.fit_decoder_steps {
        let rows = sample_batch_rows(n, batch, &mut r);
        let target = d.x.select(Axis(0), &rows);
        let loss = decoder_train_step(&mut dst, &mut decoder, &mut det, &den, &schedule, &d.cache, &rows, &target, cfg.latent_source, &mut r)?;
        log_progress("fit decoder", step, cfg.fit_decoder_steps, loss);
    }
    decoder.round_to_f32();
    det.round_to_f32();
    let dec_after = decoder_loss(&decoder, &det, &eval_h, &eval_target)?;
    let hash2 = denoiser.content_hash();
    if hash2 != hash1 {
        return Err(Error::Frozen("denoiser changed during decoder fitting".into()));
    }
    log::info!("fit decoder: {} steps, eval loss {dec_before:.5} -> {dec_after:.5}", cfg.fit_decoder_steps);

    let bundle = GeneratorBundle {
        config: cfg.clone(),
        denoiser,
        decoder,
        detokenizer: det,
        mu: d.cache.mu.clone(),
        sd: d.cache.sd.clone(),
        tokenizer: front.tokenizer.clone(),
        encoder_hash: front.encoder.weight_hash().to_string(),
        encoder_config: front.encoder.config().clone(),
        preprocess: d.state,
    };
    let report = FitReport {
        diffusion_losses: st.losses,
        decoder_losses: dst.losses,
        diffusion_eval: (diff_before, diff_after),
        decoder_eval: (dec_before, dec_after),
        denoiser_hash_initial: hash0,
        denoiser_hash_after_diffusion: hash1,
        denoiser_hash_after_decoder: hash2,
        train_rows: (0..n).collect(),
    };
    Ok((bundle, report))
}

/// Fits on the training part of one split repeat; `train_rows` in the
/// report are indices into `ds`.
#[allow(clippy::too_many_arguments)]
pub fn fit_on_split(
    ds: &TableDataset,
    plan: &SplitPlan,
    repeat: usize,
    pretrained: &PretrainedWeights,
    cfg: &RunConfig,
    front: &FrozenFrontEnd,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<(GeneratorBundle, FitReport)> {
    if plan.n_rows != ds.n_rows() {
        return Err(Error::Split(format!("plan covers {} rows, dataset has {}", plan.n_rows, ds.n_rows())));
    }
    let rep = plan
        .repeats
        .get(repeat)
        .ok_or_else(|| Error::Split(format!("repeat {repeat} not in plan of {}", plan.repeats.len())))?;
    let train = ds.select_rows(&rep.train);
    let (bundle, mut report) = fit(&train, pretrained, cfg, front, seed, cache_dir)?;
    report.train_rows = report.train_rows.iter().map(|&i| rep.train[i]).collect();
    Ok((bundle, report))
}

/// Draws `n` synthetic rows from the bundle.
pub fn generate(bundle: &GeneratorBundle, n: usize, seed: u64) -> Result<TableDataset> {
    if n == 0 {
        return Err(Error::Argument("number of rows must be positive".into()));
    }
    let mode = bundle.config.decode()?;
    let den = EdmDenoiser::new(&bundle.denoiser, bundle.config.preconditioner());
    let mut r = rng::rng_from(seed, &[0x6e4]);
    let (t, k) = bundle.mu.dim();
    let z = reverse_sample(&den, &bundle.config.schedule(), n, t, k, &mut r)?;
    let mut dr = rng::rng_from(seed, &[0x6e4, 1]);
    decode_to_table(&bundle.decoder, &bundle.detokenizer, &z, &bundle.mu, &bundle.sd, &bundle.preprocess, mode, &mut dr)
}

/// Like [`generate`], but refuses when `schema` is not the bound schema.
pub fn generate_for_schema(bundle: &GeneratorBundle, schema: &[FeatureSchema], n: usize, seed: u64) -> Result<TableDataset> {
    if schema != bundle.schema() {
        return Err(Error::Binding(format!(
            "bundle is bound to {} columns, request has {}",
            bundle.schema().len(),
            schema.len()
        )));
    }
    generate(bundle, n, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub config: RunConfig,
    pub encoder_hash: String,
    pub encoder_config: EncoderConfig,
    pub hashes: BTreeMap<String, String>,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes the bundle directory; the manifest is written last.
pub fn save_bundle(bundle: &GeneratorBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensor_file = |prefix: &str, t: TensorMap| {
        let mut f = TensorFile::new();
        f.insert_all(prefix, t);
        f.to_bytes(DType::F32)
    };
    let mut stats = TensorMap::new();
    for (name, a) in [("mu", &bundle.mu), ("sd", &bundle.sd)] {
        stats.insert(name.into(), Tensor::new(a.shape().to_vec(), a.iter().copied().collect()));
    }
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("denoiser.tensors", tensor_file("", bundle.denoiser.to_tensors())),
        ("decoder.tensors", tensor_file("", bundle.decoder.to_tensors())),
        ("detokenizer.tensors", tensor_file("", bundle.detokenizer.to_tensors())),
        ("latent_stats.tensors", tensor_file("", stats)),
        ("tokenizer.tensors", tensor_file("", bundle.tokenizer.to_tensors())),
        ("schema.json", serde_json::to_vec_pretty(bundle.schema())?),
        ("preprocess.json", serde_json::to_vec_pretty(&bundle.preprocess)?),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha_hex(bytes));
    }
    let hashes = BTreeMap::from([
        ("denoiser".to_string(), bundle.denoiser.content_hash()),
        ("decoder".to_string(), bundle.decoder.content_hash()),
        ("detokenizer".to_string(), bundle.detokenizer.content_hash()),
        ("tokenizer".to_string(), bundle.tokenizer.hash().to_string()),
    ]);
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        config: bundle.config.clone(),
        encoder_hash: bundle.encoder_hash.clone(),
        encoder_config: bundle.encoder_config.clone(),
        hashes,
        files: checksums,
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn bundle_manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn load_bundle(dir: &Path) -> Result<GeneratorBundle> {
    let mpath = bundle_manifest_path(dir);
    let raw = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|e| corrupt(&mpath, e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(BUNDLE_VERSION as u64) {
        return Err(Error::Version {
            found: version.map_or("none".into(), |v| v.to_string()),
            expected: BUNDLE_VERSION.to_string(),
        });
    }
    let manifest: BundleManifest = serde_json::from_value(value).map_err(|e| corrupt(&mpath, e.to_string()))?;
    let read = |name: &str| -> Result<(PathBuf, Vec<u8>)> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = manifest
            .files
            .get(name)
            .ok_or_else(|| corrupt(&mpath, format!("no checksum for {name}")))?;
        if sha_hex(&bytes) != *expected {
            return Err(corrupt(&path, "checksum mismatch"));
        }
        Ok((path, bytes))
    };
    let tensors = |name: &str| -> Result<TensorMap> {
        let (path, bytes) = read(name)?;
        Ok(TensorFile::from_bytes(&bytes, &path)?.tensors)
    };
    let json = |name: &str| -> Result<serde_json::Value> {
        let (path, bytes) = read(name)?;
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string()))
    };
    let cfg = manifest.config.clone();
    let preprocess: PreprocessState = serde_json::from_value(json("preprocess.json")?)?;
    let schema: Vec<FeatureSchema> = serde_json::from_value(json("schema.json")?)?;
    if schema != preprocess.schema {
        return Err(corrupt(&mpath, "schema.json disagrees with preprocess.json"));
    }
    let mut denoiser = DenoiserNetwork::new(cfg.denoiser(), 0)?;
    denoiser.load_tensors(&tensors("denoiser.tensors")?)?;
    let mut decoder = DecoderTransformer::new(cfg.decoder(), 0)?;
    decoder.load_tensors(&tensors("decoder.tensors")?)?;
    let mut detokenizer = Detokenizer::new(&schema, cfg.latent_dim, 0);
    detokenizer.load_tensors(&tensors("detokenizer.tensors")?)?;
    let stats = tensors("latent_stats.tensors")?;
    let stat = |name: &str| -> Result<Array2<f64>> {
        let t = stats.get(name).ok_or_else(|| corrupt(&mpath, format!("missing latent stat `{name}`")))?;
        if t.shape.len() != 2 {
            return Err(corrupt(&mpath, format!("latent stat `{name}` must be 2-D")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|e| Error::Shape(e.to_string()))
    };
    let (mu, sd) = (stat("mu")?, stat("sd")?);
    if mu.dim() != (schema.len(), cfg.latent_dim) || sd.dim() != mu.dim() {
        return Err(corrupt(&mpath, "latent statistics do not match schema and latent_dim"));
    }
    let tokenizer = TokenizerParams::from_tensors(&tensors("tokenizer.tensors")?, cfg.perturbation_seed)?;
    let bundle = GeneratorBundle {
        config: cfg,
        denoiser,
        decoder,
        detokenizer,
        mu,
        sd,
        tokenizer,
        encoder_hash: manifest.encoder_hash.clone(),
        encoder_config: manifest.encoder_config.clone(),
        preprocess,
    };
    let check = |what: &str, got: &str| -> Result<()> {
        match manifest.hashes.get(what) {
            Some(h) if h == got => Ok(()),
            _ => Err(corrupt(&mpath, format!("{what} weights do not match the manifest hash"))),
        }
    };
    check("denoiser", &bundle.denoiser.content_hash())?;
    check("decoder", &bundle.decoder.content_hash())?;
    check("detokenizer", &bundle.detokenizer.content_hash())?;
    check("tokenizer", bundle.tokenizer.hash())?;
    Ok(bundle)
}
