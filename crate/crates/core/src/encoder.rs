//! Frozen feature encoder and the latent cache built from it.
//!
//! The encoder is a stack of two-way attention layers: attention across the
//! feature tokens of each row, then attention across rows within each
//! feature. Latents for a table are extracted leave-one-fold-out: each fold's
//! rows are queries contextualised by the remaining rows.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TableDataset;
use crate::error::{Error, Result};
use crate::nn::{gelu, Attention, LayerNorm, Linear, ParamMut, ParamView, Params};
use crate::nn::params::{prefixed, prefixed_mut};
use crate::rng;
use crate::store::{DType, Tensor, TensorFile};
use crate::tokenizer::{TokenTensor, TokenizerParams};

/// Added to the latent variance before the square root.
pub const LATENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    /// Same weights serve both tasks; only recorded for checkpoint import.
    #[default]
    Shared,
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub latent_dim: usize,
    pub n_heads: usize,
    pub weight_seed: u64,
    pub n_folds: usize,
    #[serde(default)]
    pub variant: EncoderVariant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            latent_dim: 192,
            n_heads: 6,
            weight_seed: 0,
            n_folds: 5,
            variant: EncoderVariant::Shared,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.latent_dim < 2 || self.n_heads == 0 || !self.latent_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "latent_dim {} must be divisible by n_heads {}",
                self.latent_dim, self.n_heads
            )));
        }
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder layer: feature attention, masked row attention, feedforward,
/// each pre-normed with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub feature_norm: LayerNorm,
    pub feature_attn: Attention,
    pub row_norm: LayerNorm,
    pub row_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayer {
    fn new(r: &mut rng::Rng, k: usize, heads: usize, residual_scale: f64) -> Self {
        let mut layer = Self {
            feature_norm: LayerNorm::new(k),
            feature_attn: Attention::new(r, k, heads),
            row_norm: LayerNorm::new(k),
            row_attn: Attention::new(r, k, heads),
            ff_norm: LayerNorm::new(k),
            ff_in: Linear::new(r, k, 4 * k),
            ff_out: Linear::new(r, 4 * k, k),
        };
        layer.feature_attn.output.weight *= residual_scale;
        layer.row_attn.output.weight *= residual_scale;
        layer.ff_out.weight *= residual_scale;
        layer
    }

    /// `x` is `(rows * features, k)` in row-major token order; the first
    /// `n_context` rows are context.
    fn forward(&self, x: &Array2<f64>, n_rows: usize, n_features: usize, n_context: usize) -> Array2<f64> {
        let (h, _) = self.feature_norm.forward(x);
        let (a, _) = self.feature_attn.forward(&h, n_features);
        let x = x + &a;
        let (h, _) = self.row_norm.forward(&x);
        let a = masked_row_attention(&self.row_attn, &h, n_rows, n_features, n_context);
        let x = x + &a;
        let (h, _) = self.ff_norm.forward(&x);
        let f = self.ff_out.forward(&self.ff_in.forward(&h).mapv(gelu));
        x + &f
    }
}

/// Row attention within each feature: context rows attend to all context
/// rows, query rows attend to the context rows and themselves only.
fn masked_row_attention(
    attn: &Attention,
    h: &Array2<f64>,
    n_rows: usize,
    n_features: usize,
    n_context: usize,
) -> Array2<f64> {
    let k = h.ncols();
    let heads = attn.n_heads;
    let dh = k / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = attn.query.forward(h);
    let kk = attn.key.forward(h);
    let v = attn.value.forward(h);

    let per_feature: Vec<Array2<f64>> = (0..n_features)
        .into_par_iter()
        .map(|j| {
            let rows_of = |m: &Array2<f64>| -> Array2<f64> {
                m.slice(s![j..; n_features, ..]).to_owned()
            };
            let (qj, kj, vj) = (rows_of(&q), rows_of(&kk), rows_of(&v));
            let mut out = Array2::<f64>::zeros((n_rows, k));
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let qh = qj.slice(cols);
                let kh = kj.slice(cols);
                let vh = vj.slice(cols);
                let kc = kh.slice(s![..n_context, ..]);
                let vc = vh.slice(s![..n_context, ..]);
                let mut scores = qh.dot(&kc.t()) * scale;
                for i in 0..n_rows {
                    let self_score = if i >= n_context {
                        Some(scale * qh.row(i).dot(&kh.row(i)))
                    } else {
                        None
                    };
                    let mut row = scores.row_mut(i);
                    let max = row
                        .iter()
                        .copied()
                        .chain(self_score)
                        .fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - max).exp());
                    let self_w = self_score.map(|s| (s - max).exp()).unwrap_or(0.0);
                    let z = row.sum() + self_w;
                    row.mapv_inplace(|s| s / z);
                    let mut o = out.slice_mut(s![i, hd * dh..(hd + 1) * dh]);
                    if self_w > 0.0 {
                        o.scaled_add(self_w / z, &vh.row(i));
                    }
                    o += &row.dot(&vc);
                }
            }
            out
        })
        .collect();

    let mut mixed = Array2::<f64>::zeros((n_rows * n_features, k));
    for (j, out) in per_feature.into_iter().enumerate() {
        mixed.slice_mut(s![j..; n_features, ..]).assign(&out);
    }
    attn.output.forward(&mixed)
}

impl Params for EncoderLayer {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("feature_norm", self.feature_norm.params());
        v.extend(prefixed("feature_attn", self.feature_attn.params()));
        v.extend(prefixed("row_norm", self.row_norm.params()));
        v.extend(prefixed("row_attn", self.row_attn.params()));
        v.extend(prefixed("ff_norm", self.ff_norm.params()));
        v.extend(prefixed("ff_in", self.ff_in.params()));
        v.extend(prefixed("ff_out", self.ff_out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = prefixed_mut("feature_norm", self.feature_norm.params_mut());
        v.extend(prefixed_mut("feature_attn", self.feature_attn.params_mut()));
        v.extend(prefixed_mut("row_norm", self.row_norm.params_mut()));
        v.extend(prefixed_mut("row_attn", self.row_attn.params_mut()));
        v.extend(prefixed_mut("ff_norm", self.ff_norm.params_mut()));
        v.extend(prefixed_mut("ff_in", self.ff_in.params_mut()));
        v.extend(prefixed_mut("ff_out", self.ff_out.params_mut()));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderWeights {
    layers: Vec<EncoderLayer>,
}

impl Params for EncoderWeights {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&format!("layers.{i}"), l.params_mut()))
            .collect()
    }
}

/// Frozen encoder. Weights are private; the hash recorded at construction is
/// re-checked before every extraction.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    weights: EncoderWeights,
    weight_hash: String,
    forward_passes: Arc<AtomicUsize>,
}

impl FrozenEncoder {
    /// Seeded random stand-in for a pretrained backbone.
    pub fn build_surrogate(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_from(config.weight_seed, &[0xe4c]);
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::new(&mut r, config.latent_dim, config.n_heads, residual_scale))
            .collect();
        let mut weights = EncoderWeights { layers };
        weights.round_to_f32();
        Ok(Self::from_weights(config, weights))
    }

    fn from_weights(config: EncoderConfig, weights: EncoderWeights) -> Self {
        let weight_hash = weights.content_hash();
        Self {
            config,
            weights,
            weight_hash,
            forward_passes: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Loads externally exported weights stored as named tensors
    /// (`layers.{i}.{module}.{param}`), with the config in the file metadata.
    pub fn import_checkpoint(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        let config: EncoderConfig = serde_json::from_value(
            file.meta
                .get("encoder_config")
                .cloned()
                .ok_or_else(|| Error::Binding("checkpoint lacks `encoder_config`".into()))?,
        )?;
        config.validate()?;
        let mut r = rng::rng_from(0, &[]);
        let mut weights = EncoderWeights {
            layers: (0..config.n_layers)
                .map(|_| EncoderLayer::new(&mut r, config.latent_dim, config.n_heads, 1.0))
                .collect(),
        };
        weights.load_tensors(&file.tensors)?;
        Ok(Self::from_weights(config, weights))
    }

    pub fn export_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = TensorFile::new().with_meta("encoder_config", &self.config);
        file.insert_all("", self.weights.to_tensors());
        file.write(path, DType::F32)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn weight_hash(&self) -> &str {
        &self.weight_hash
    }

    /// Number of extraction passes run so far (shared across clones).
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.weights.content_hash();
        if now != self.weight_hash {
            return Err(Error::Frozen(format!(
                "encoder weight hash {now} != recorded {}",
                self.weight_hash
            )));
        }
        Ok(())
    }

    /// Runs the layers over `context` rows followed by `query` rows and
    /// returns the final tokens of the query rows.
    fn encode_queries(&self, tokens: &TokenTensor, context: &[usize], query: &[usize]) -> Array3<f64> {
        let (_, f, k) = tokens.dim();
        let order: Vec<usize> = context.iter().chain(query).copied().collect();
        let n = order.len();
        let gathered = tokens.select(Axis(0), &order);
        let mut x = gathered
            .into_shape_with_order((n * f, k))
            .expect("contiguous gather");
        for layer in &self.weights.layers {
            x = layer.forward(&x, n, f, context.len());
        }
        let x = x.into_shape_with_order((n, f, k)).expect("shape");
        x.slice(s![context.len().., .., ..]).to_owned()
    }

    /// Leave-one-fold-out extraction; rows come back in their original order.
    pub fn extract_leave_one_fold_out(&self, tokens: &TokenTensor, fold_seed: u64) -> Result<Array3<f64>> {
        self.verify_frozen()?;
        let (n, f, k) = tokens.dim();
        if k != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "tokens have dim {k}, encoder expects {}",
                self.config.latent_dim
            )));
        }
        let folds = fold_assignment(n, self.config.n_folds, fold_seed)?;
        self.forward_passes.fetch_add(1, Ordering::SeqCst);
        let mut h = Array3::<f64>::zeros((n, f, k));
        for fold in &folds {
            let mut in_fold = vec![false; n];
            fold.iter().for_each(|&i| in_fold[i] = true);
            let context: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
            let out = self.encode_queries(tokens, &context, fold);
            for (q, &row) in fold.iter().enumerate() {
                h.slice_mut(s![row, .., ..]).assign(&out.slice(s![q, .., ..]));
            }
        }
        Ok(h)
    }
}

/// Seeded shuffle split into `n_folds` near-equal folds.
pub fn fold_assignment(n: usize, n_folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < n_folds {
        return Err(Error::Fold(format!("{n} rows cannot fill {n_folds} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng_from(seed, &[0xf01d]));
    Ok((0..n_folds)
        .map(|f| perm[f * n / n_folds..(f + 1) * n / n_folds].to_vec())
        .collect())
}

/// Per-(feature, dim) mean and epsilon-guarded population std over rows.
pub fn compute_stats(h: &Array3<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, f, k) = h.dim();
    let mut mu = Array2::zeros((f, k));
    let mut sd = Array2::zeros((f, k));
    for j in 0..f {
        for a in 0..k {
            let col = h.slice(s![.., j, a]);
            // shifted sums keep constant columns exact
            let pivot = col[0];
            let m = pivot + col.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            mu[[j, a]] = m;
            sd[[j, a]] = (var + LATENT_EPS).sqrt();
        }
    }
    (mu, sd)
}

pub fn normalize(h: &Array3<f64>, mu: &Array2<f64>, sd: &Array2<f64>) -> Array3<f64> {
    (h - mu) / sd
}

pub fn denormalize(z: &Array3<f64>, mu: &Array2<f64>, sd: &Array2<f64>) -> Array3<f64> {
    z * sd + mu
}

/// Frozen latents of one table plus their normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    pub h: Array3<f64>,
    pub mu: Array2<f64>,
    pub sd: Array2<f64>,
    pub source_hash: String,
    pub fold_seed: u64,
}

impl LatentCache {
    pub fn n_rows(&self) -> usize {
        self.h.dim().0
    }

    pub fn n_features(&self) -> usize {
        self.h.dim().1
    }

    pub fn latent_dim(&self) -> usize {
        self.h.dim().2
    }

    /// Normalised clean latents `Z0`.
    pub fn normalized(&self) -> Array3<f64> {
        normalize(&self.h, &self.mu, &self.sd)
    }

    fn to_file(&self) -> TensorFile {
        let (n, f, k) = self.h.dim();
        let mut file = TensorFile::new()
            .with_meta("source_hash", &self.source_hash)
            .with_meta("fold_seed", self.fold_seed)
            .with_meta("eps", LATENT_EPS)
            .with_meta("shape", [n, f, k]);
        file.tensors.insert("H".into(), Tensor::new(vec![n, f, k], self.h.iter().copied().collect()));
        file.tensors.insert("mu".into(), Tensor::new(vec![f, k], self.mu.iter().copied().collect()));
        file.tensors.insert("s".into(), Tensor::new(vec![f, k], self.sd.iter().copied().collect()));
        file
    }

    fn from_file(file: &TensorFile, expected_hash: &str, path: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::Cache(format!("{}: {m}", path.display()));
        if file.meta_str("source_hash") != Some(expected_hash) {
            return Err(corrupt("source hash mismatch"));
        }
        let fold_seed = file
            .meta
            .get("fold_seed")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing fold_seed"))?;
        let h = file.get("H")?;
        let mu = file.get("mu")?;
        let sd = file.get("s")?;
        if h.shape.len() != 3 || mu.shape != h.shape[1..] || sd.shape != h.shape[1..] {
            return Err(corrupt("inconsistent shapes"));
        }
        let (n, f, k) = (h.shape[0], h.shape[1], h.shape[2]);
        Ok(Self {
            h: Array3::from_shape_vec((n, f, k), h.data.clone()).map_err(|e| corrupt(&e.to_string()))?,
            mu: Array2::from_shape_vec((f, k), mu.data.clone()).map_err(|e| corrupt(&e.to_string()))?,
            sd: Array2::from_shape_vec((f, k), sd.data.clone()).map_err(|e| corrupt(&e.to_string()))?,
            source_hash: expected_hash.to_string(),
            fold_seed,
        })
    }
}

/// Hash identifying a latent cache: table contents, encoder and tokenizer
/// weights, fold count and fold seed.
pub fn source_hash(ds: &TableDataset, enc: &FrozenEncoder, tok: &TokenizerParams, fold_seed: u64) -> String {
    let schema = serde_json::to_vec(&ds.schema).expect("schema serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&schema);
    bytes.extend_from_slice(&(ds.n_rows() as u64).to_le_bytes());
    for v in ds.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(enc.weight_hash().as_bytes());
    bytes.extend_from_slice(tok.hash().as_bytes());
    bytes.extend_from_slice(&tok.perturbation_seed.to_le_bytes());
    bytes.extend_from_slice(&(enc.config().n_folds as u64).to_le_bytes());
    bytes.extend_from_slice(&fold_seed.to_le_bytes());
    rng::hash_bytes(&bytes)
}

pub fn cache_path(dir: &Path, source_hash: &str) -> PathBuf {
    dir.join(format!("{source_hash}.latents"))
}

/// Tokenizes, extracts and computes statistics, reusing `cache_dir/<hash>.latents`
/// when present. Arrays are rounded to `f32` so a cache read reproduces a
/// fresh computation exactly. A corrupt cache file is replaced.
pub fn cache_latents(
    ds: &TableDataset,
    enc: &FrozenEncoder,
    tok: &TokenizerParams,
    fold_seed: u64,
    cache_dir: Option<&Path>,
) -> Result<LatentCache> {
    if ds.has_missing() {
        return Err(Error::Cache("dataset must be preprocessed (no missing cells)".into()));
    }
    tok.verify_frozen()?;
    let key = source_hash(ds, enc, tok, fold_seed);
    if let Some(dir) = cache_dir {
        let path = cache_path(dir, &key);
        if path.exists() {
            match TensorFile::read(&path).and_then(|f| LatentCache::from_file(&f, &key, &path)) {
                Ok(c) => return Ok(c),
                Err(e) => log::warn!("discarding latent cache {}: {e}", path.display()),
            }
        }
    }
    let r = tok.build_perturbations(ds.n_features());
    let tokens = tok.tokenize(&ds.values, &r)?;
    let mut h = enc.extract_leave_one_fold_out(&tokens, fold_seed)?;
    h.mapv_inplace(rng::to_f32_precision);
    let (mut mu, mut sd) = compute_stats(&h);
    mu.mapv_inplace(rng::to_f32_precision);
    sd.mapv_inplace(rng::to_f32_precision);
    let cache = LatentCache {
        h,
        mu,
        sd,
        source_hash: key.clone(),
        fold_seed,
    };
    if let Some(dir) = cache_dir {
        cache.to_file().write(&cache_path(dir, &key), DType::F32)?;
    }
    Ok(cache)
}
