//! Decoder transformer, per-dataset detokeniser and the mixed-type
//! reconstruction objective.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{inverse_transform, FeatureSchema, PreprocessState, TableDataset};
use crate::diffusion::{draw_noise, Denoise, NoiseSchedule};
use crate::encoder::{denormalize, LatentCache};
use crate::error::{Error, Result};
use crate::nn::params::{prefixed, prefixed_mut};
use crate::nn::{ParamMut, ParamView, Params, Stack, StackCache};
use crate::optim::{collect_grads, TrainState};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub latent_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            latent_dim: 192,
        }
    }
}

/// Refines denormalised latent tokens; shared across datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTransformer {
    pub config: DecoderConfig,
    pub stack: Stack,
}

impl DecoderTransformer {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        if config.n_heads == 0 || !config.latent_dim.is_multiple_of(config.n_heads) {
            return Err(Error::Config(format!(
                "latent_dim {} must be divisible by n_heads {}",
                config.latent_dim, config.n_heads
            )));
        }
        let mut r = rng::rng_from(seed, &[0xdec]);
        let stack = Stack::new(&mut r, config.n_layers, config.latent_dim, config.n_heads);
        Ok(Self { config, stack })
    }

    pub fn refine(&self, h: &Array3<f64>) -> Array3<f64> {
        self.forward(h).0
    }

    fn forward(&self, h: &Array3<f64>) -> (Array3<f64>, StackCache) {
        let (b, t, k) = h.dim();
        let x = h.as_standard_layout().into_owned().into_shape_with_order((b * t, k)).expect("contiguous");
        let (y, cache) = self.stack.forward(&x, t);
        (y.into_shape_with_order((b, t, k)).expect("shape"), cache)
    }

    fn backward(&self, cache: &StackCache, du: &Array3<f64>, grad: &mut DecoderTransformer) {
        let (b, t, k) = du.dim();
        let d = du.to_owned().into_shape_with_order((b * t, k)).expect("contiguous");
        self.stack.backward(cache, &d, &mut grad.stack);
    }
}

impl Params for DecoderTransformer {
    fn params(&self) -> Vec<ParamView<'_>> {
        prefixed("stack", self.stack.params())
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        prefixed_mut("stack", self.stack.params_mut())
    }
}

/// One head per feature: a `1 x k` row for numericals, `C x k` plus a bias
/// for categoricals.
#[derive(Debug, Clone, PartialEq)]
pub struct Detokenizer {
    pub schema: Vec<FeatureSchema>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Detokenizer {
    pub fn new(schema: &[FeatureSchema], latent_dim: usize, seed: u64) -> Self {
        let mut r = rng::rng_from(seed, &[0xde70]);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let mut weights = Vec::with_capacity(schema.len());
        let mut biases = Vec::with_capacity(schema.len());
        for f in schema {
            let rows = if f.is_categorical() { f.cardinality() } else { 1 };
            let w = rng::normal_vec(&mut r, rows * latent_dim).into_iter().map(|v| v * scale).collect();
            weights.push(Array2::from_shape_vec((rows, latent_dim), w).expect("shape"));
            biases.push(Array1::zeros(if f.is_categorical() { rows } else { 0 }));
        }
        Self {
            schema: schema.to_vec(),
            weights,
            biases,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.ncols())
    }

    pub fn check_binding(&self, schema: &[FeatureSchema]) -> Result<()> {
        if self.schema != schema {
            return Err(Error::Binding(format!(
                "detokenizer bound to {} features, asked to decode {}",
                self.schema.len(),
                schema.len()
            )));
        }
        Ok(())
    }
}

impl Params for Detokenizer {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = Vec::new();
        for (j, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            v.push(ParamView {
                name: format!("head{j}.weight"),
                shape: w.shape().to_vec(),
                data: w.as_slice().expect("contiguous"),
            });
            if !b.is_empty() {
                v.push(ParamView {
                    name: format!("head{j}.bias"),
                    shape: b.shape().to_vec(),
                    data: b.as_slice().expect("contiguous"),
                });
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = Vec::new();
        for (j, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            v.push(ParamMut {
                name: format!("head{j}.weight"),
                shape: w.shape().to_vec(),
                data: w.as_slice_mut().expect("contiguous"),
            });
            if !b.is_empty() {
                v.push(ParamMut {
                    name: format!("head{j}.bias"),
                    shape: b.shape().to_vec(),
                    data: b.as_slice_mut().expect("contiguous"),
                });
            }
        }
        v
    }
}

/// Per-feature outputs in schema order: one column for numericals, `C`
/// logits for categoricals.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconOutput {
    pub heads: Vec<Array2<f64>>,
    pub categorical: Vec<bool>,
}

impl ReconOutput {
    pub fn n_rows(&self) -> usize {
        self.heads.first().map_or(0, |h| h.nrows())
    }

    pub fn numerical(&self, j: usize) -> Option<Array1<f64>> {
        (!self.categorical[j]).then(|| self.heads[j].column(0).to_owned())
    }

    pub fn logits(&self, j: usize) -> Option<ArrayView2<'_, f64>> {
        self.categorical[j].then(|| self.heads[j].view())
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(|h| h.iter().all(|v| v.is_finite()))
    }
}

pub fn detokenize(det: &Detokenizer, u: &Array3<f64>, schema: &[FeatureSchema]) -> Result<ReconOutput> {
    det.check_binding(schema)?;
    let (_, t, k) = u.dim();
    if t != schema.len() || k != det.latent_dim() {
        return Err(Error::Shape(format!(
            "tokens {:?} do not match {} features of width {}",
            u.dim(),
            schema.len(),
            det.latent_dim()
        )));
    }
    let heads = (0..t)
        .map(|j| {
            let mut o = u.index_axis(Axis(1), j).dot(&det.weights[j].t());
            if !det.biases[j].is_empty() {
                o += &det.biases[j];
            }
            o
        })
        .collect();
    Ok(ReconOutput {
        heads,
        categorical: schema.iter().map(FeatureSchema::is_categorical).collect(),
    })
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Per-sample squared error over numericals plus cross-entropy per
/// categorical, averaged over samples. `target` holds standardised values
/// and integer codes in schema order.
pub fn recon_loss(out: &ReconOutput, target: &Array2<f64>) -> Result<f64> {
    Ok(recon_loss_impl(out, target, false)?.0)
}

/// Loss and its gradient with respect to every head output.
pub fn recon_loss_and_grad(out: &ReconOutput, target: &Array2<f64>) -> Result<(f64, Vec<Array2<f64>>)> {
    recon_loss_impl(out, target, true)
}

fn recon_loss_impl(out: &ReconOutput, target: &Array2<f64>, want_grad: bool) -> Result<(f64, Vec<Array2<f64>>)> {
    let n = out.n_rows();
    if target.dim() != (n, out.heads.len()) {
        return Err(Error::Shape(format!(
            "target {:?} vs output {} rows x {} features",
            target.dim(),
            n,
            out.heads.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::new();
    for (j, head) in out.heads.iter().enumerate() {
        let mut g = Array2::zeros(head.dim());
        if out.categorical[j] {
            let c = head.ncols();
            for i in 0..n {
                let code = target[[i, j]];
                if !(code >= 0.0 && code.fract() == 0.0 && (code as usize) < c) {
                    return Err(Error::Label(format!("code {code} out of range for feature {j} with {c} classes")));
                }
                let ls = log_softmax_row(head.row(i));
                loss -= ls[code as usize];
                if want_grad {
                    let mut gr = g.row_mut(i);
                    gr.assign(&ls.mapv(|v| v.exp() * inv_n));
                    gr[code as usize] -= inv_n;
                }
            }
        } else {
            for i in 0..n {
                let d = head[[i, 0]] - target[[i, j]];
                loss += d * d;
                g[[i, 0]] = 2.0 * d * inv_n;
            }
        }
        if want_grad {
            grads.push(g);
        }
    }
    Ok((loss * inv_n, grads))
}

/// Backpropagates head-output gradients into the detokeniser and returns the
/// gradient with respect to the refined tokens.
fn detokenize_backward(det: &Detokenizer, u: &Array3<f64>, dheads: &[Array2<f64>], grad: &mut Detokenizer) -> Array3<f64> {
    let mut du = Array3::zeros(u.dim());
    for (j, dh) in dheads.iter().enumerate() {
        let uj = u.index_axis(Axis(1), j);
        grad.weights[j] += &dh.t().dot(&uj);
        if !grad.biases[j].is_empty() {
            grad.biases[j] += &dh.sum_axis(Axis(0));
        }
        du.index_axis_mut(Axis(1), j).assign(&dh.dot(&det.weights[j]));
    }
    du
}

/// Loss and gradients of the decoder pair for given denormalised tokens.
pub fn decoder_loss_and_grad(
    dec: &DecoderTransformer,
    det: &Detokenizer,
    h_hat: &Array3<f64>,
    target: &Array2<f64>,
) -> Result<(f64, DecoderTransformer, Detokenizer)> {
    let (u, cache) = dec.forward(h_hat);
    let out = detokenize(det, &u, &det.schema)?;
    let (loss, dheads) = recon_loss_and_grad(&out, target)?;
    let mut gdet = det.zeroed();
    let du = detokenize_backward(det, &u, &dheads, &mut gdet);
    let mut gdec = dec.zeroed();
    dec.backward(&cache, &du, &mut gdec);
    Ok((loss, gdec, gdet))
}

/// Loss of the decoder pair on given denormalised tokens.
pub fn decoder_loss(dec: &DecoderTransformer, det: &Detokenizer, h_hat: &Array3<f64>, target: &Array2<f64>) -> Result<f64> {
    let out = detokenize(det, &dec.refine(h_hat), &det.schema)?;
    recon_loss(&out, target)
}

/// Which latents feed the decoder during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    /// Freshly noised latents passed through the fitted denoiser.
    #[default]
    Denoised,
    /// Clean encoder latents, bypassing the denoiser.
    Clean,
}

/// Builds the decoder input for a batch: normalised latents, optionally
/// noised and denoised, then mapped back to the encoder scale.
pub fn decoder_inputs(
    den: &impl Denoise,
    schedule: &NoiseSchedule,
    cache: &LatentCache,
    rows: &[usize],
    source: LatentSource,
    r: &mut Rng,
) -> Result<Array3<f64>> {
    let z0 = crate::encoder::normalize(&cache.h.select(Axis(0), rows), &cache.mu, &cache.sd);
    let z_hat = match source {
        LatentSource::Clean => z0,
        LatentSource::Denoised => {
            let (sigmas, noise) = draw_noise(schedule, z0.dim(), r);
            let mut z = z0;
            for (i, &sg) in sigmas.iter().enumerate() {
                z.slice_mut(s![i, .., ..]).scaled_add(sg, &noise.slice(s![i, .., ..]));
            }
            den.denoise(&z, &sigmas)?
        }
    };
    Ok(denormalize(&z_hat, &cache.mu, &cache.sd))
}

/// One joint momentum-free SGD step on the decoder and detokeniser.
/// `target` rows align with `rows`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_train_step(
    state: &mut TrainState,
    dec: &mut DecoderTransformer,
    det: &mut Detokenizer,
    den: &impl Denoise,
    schedule: &NoiseSchedule,
    cache: &LatentCache,
    rows: &[usize],
    target: &Array2<f64>,
    source: LatentSource,
    r: &mut Rng,
) -> Result<f64> {
    let h_hat = decoder_inputs(den, schedule, cache, rows, source, r)?;
    let (loss, gdec, gdet) = decoder_loss_and_grad(dec, det, &h_hat, target)?;
    let mut grads = collect_grads(&gdec.params());
    grads.extend(collect_grads(&gdet.params()));
    let mut params = dec.params_mut();
    params.extend(det.params_mut());
    state.apply(params, grads, loss)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    #[default]
    Argmax,
    Sample { temperature: f64 },
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_logits(row: ndarray::ArrayView1<'_, f64>, temperature: f64, r: &mut Rng) -> usize {
    let scaled = row.mapv(|v| v / temperature);
    let probs = log_softmax_row(scaled.view()).mapv(f64::exp);
    let u: f64 = rand::Rng::random(r);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    argmax(row)
}

/// Maps head outputs to a standardised table: numericals as predicted,
/// categoricals chosen by `mode`.
pub fn choose_values(out: &ReconOutput, mode: DecodeMode, r: &mut Rng) -> Result<Array2<f64>> {
    let n = out.n_rows();
    let mut x = Array2::zeros((n, out.heads.len()));
    for (j, head) in out.heads.iter().enumerate() {
        for i in 0..n {
            x[[i, j]] = if out.categorical[j] {
                let row = head.row(i);
                (match mode {
                    DecodeMode::Argmax => argmax(row),
                    DecodeMode::Sample { temperature } => {
                        if temperature.is_nan() || temperature <= 0.0 {
                            return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
                        }
                        sample_logits(row, temperature, r)
                    }
                }) as f64
            } else {
                head[[i, 0]]
            };
        }
    }
    Ok(x)
}

/// Decodes normalised latents into a table on the original scale.
#[allow(clippy::too_many_arguments)]
pub fn decode_to_table(
    dec: &DecoderTransformer,
    det: &Detokenizer,
    z_hat: &Array3<f64>,
    mu: &Array2<f64>,
    sd: &Array2<f64>,
    state: &PreprocessState,
    mode: DecodeMode,
    r: &mut Rng,
) -> Result<TableDataset> {
    det.check_binding(&state.schema)?;
    let h_hat = denormalize(z_hat, mu, sd);
    let out = detokenize(det, &dec.refine(&h_hat), &state.schema)?;
    if !out.is_finite() {
        return Err(Error::Decode("decoder produced non-finite outputs".into()));
    }
    let x = choose_values(&out, mode, r)?;
    let standardized = TableDataset {
        values: x,
        schema: state.schema.clone(),
    };
    inverse_transform(&standardized, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<FeatureSchema> {
        vec![
            FeatureSchema::numerical("a"),
            FeatureSchema::categorical("b", vec!["x".into(), "y".into(), "z".into()]),
        ]
    }

    fn perturbed<P: Params>(mut p: P, seed: u64) -> P {
        let mut r = rng::rng_from(seed, &[77]);
        for v in p.params_mut() {
            for x in v.data.iter_mut() {
                *x += 0.2 * rng::normal(&mut r);
            }
        }
        p
    }

    #[test]
    fn refine_preserves_shape() {
        let dec = DecoderTransformer::new(DecoderConfig { n_layers: 1, n_heads: 2, latent_dim: 4 }, 0).unwrap();
        for t in [2, 10, 60] {
            let h = Array3::from_elem((3, t, 4), 0.5);
            assert_eq!(dec.refine(&h).dim(), (3, t, 4));
            assert_eq!(dec.refine(&h), dec.refine(&h));
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let dec = DecoderTransformer::new(DecoderConfig { n_layers: 0, n_heads: 2, latent_dim: 4 }, 0).unwrap();
        let mut r = rng::rng_from(0, &[]);
        let h = Array3::from_shape_vec((2, 3, 4), rng::normal_vec(&mut r, 24)).unwrap();
        assert_eq!(dec.refine(&h), h);
    }

    #[test]
    fn numerical_head_is_dot_product() {
        let s = vec![FeatureSchema::numerical("a"), FeatureSchema::numerical("b")];
        let mut det = Detokenizer::new(&s, 3, 0);
        det.weights[0] = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let mut u = Array3::zeros((1, 2, 3));
        u[[0, 0, 0]] = 1.0;
        let out = detokenize(&det, &u, &s).unwrap();
        assert_eq!(out.numerical(0).unwrap()[0], 1.0);
    }

    #[test]
    fn categorical_head_constant_logits() {
        let s = vec![FeatureSchema::numerical("a"), FeatureSchema::categorical("b", vec!["p".into(), "q".into()])];
        let mut det = Detokenizer::new(&s, 3, 0);
        det.weights[1].fill(0.0);
        det.biases[1] = Array1::from(vec![1.0, 0.0]);
        let mut r = rng::rng_from(1, &[]);
        let u = Array3::from_shape_vec((4, 2, 3), rng::normal_vec(&mut r, 24)).unwrap();
        let out = detokenize(&det, &u, &s).unwrap();
        for row in out.logits(1).unwrap().rows() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn high_cardinality_and_binding() {
        let cats: Vec<String> = (0..37).map(|i| format!("c{i}")).collect();
        let s = vec![FeatureSchema::numerical("a"), FeatureSchema::categorical("b", cats)];
        let det = Detokenizer::new(&s, 4, 0);
        assert_eq!(det.weights[1].dim(), (37, 4));
        let u = Array3::zeros((2, 2, 4));
        assert_eq!(detokenize(&det, &u, &s).unwrap().heads[1].dim(), (2, 37));
        assert!(matches!(detokenize(&det, &u, &schema()), Err(Error::Binding(_))));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let out = ReconOutput {
            heads: vec![Array2::from_elem((3, 1), 0.5), Array2::zeros((3, 5))],
            categorical: vec![false, true],
        };
        let target = Array2::from_shape_vec((3, 2), vec![0.5, 0.0, 0.5, 3.0, 0.5, 4.0]).unwrap();
        assert!((recon_loss(&out, &target).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let mut logits = Array2::zeros((2, 3));
        logits[[0, 1]] = 20.0;
        logits[[1, 2]] = 20.0;
        let out = ReconOutput {
            heads: vec![logits],
            categorical: vec![true],
        };
        let target = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        assert!(recon_loss(&out, &target).unwrap() < 1e-3);
        let bad = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        assert!(matches!(recon_loss(&out, &bad), Err(Error::Label(_))));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let s = schema();
        let dec = perturbed(DecoderTransformer::new(DecoderConfig { n_layers: 1, n_heads: 2, latent_dim: 4 }, 1).unwrap(), 1);
        let det = perturbed(Detokenizer::new(&s, 4, 2), 2);
        let mut r = rng::rng_from(3, &[]);
        let h = Array3::from_shape_vec((3, 2, 4), rng::normal_vec(&mut r, 24)).unwrap();
        let target = Array2::from_shape_vec((3, 2), vec![0.3, 0.0, -1.0, 2.0, 0.8, 1.0]).unwrap();
        let (_, gdec, gdet) = decoder_loss_and_grad(&dec, &det, &h, &target).unwrap();
        let check = |ti: usize, idx: usize, analytic: f64, on_dec: bool| {
            let eps = 1e-6;
            let (mut dp, mut dm) = (dec.clone(), dec.clone());
            let (mut tp, mut tm) = (det.clone(), det.clone());
            if on_dec {
                dp.params_mut()[ti].data[idx] += eps;
                dm.params_mut()[ti].data[idx] -= eps;
            } else {
                tp.params_mut()[ti].data[idx] += eps;
                tm.params_mut()[ti].data[idx] -= eps;
            }
            let fp = decoder_loss(&dp, &tp, &h, &target).unwrap();
            let fm = decoder_loss(&dm, &tm, &h, &target).unwrap();
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - analytic).abs() <= 1e-5 * (1.0 + num.abs()), "{on_dec} {ti} {idx}: {num} vs {analytic}");
        };
        for (ti, g) in collect_grads(&gdec.params()).iter().enumerate() {
            for idx in [0, g.len() / 2, g.len() - 1] {
                check(ti, idx, g[idx], true);
            }
        }
        for (ti, g) in collect_grads(&gdet.params()).iter().enumerate() {
            for (idx, &gi) in g.iter().enumerate() {
                check(ti, idx, gi, false);
            }
        }
    }

    #[test]
    fn argmax_ties_and_cold_sampling() {
        assert_eq!(argmax(Array1::from(vec![0.5, 0.5, 0.5]).view()), 0);
        assert_eq!(argmax(Array1::from(vec![0.1, 0.7, 0.7]).view()), 1);
        let mut r = rng::rng_from(5, &[]);
        let logits = Array2::from_shape_vec((100, 4), rng::normal_vec(&mut r, 400)).unwrap();
        let out = ReconOutput {
            heads: vec![logits],
            categorical: vec![true],
        };
        let a = choose_values(&out, DecodeMode::Argmax, &mut r).unwrap();
        let b = choose_values(&out, DecodeMode::Sample { temperature: 1e-6 }, &mut r).unwrap();
        assert_eq!(a, b);
        assert!(choose_values(&out, DecodeMode::Sample { temperature: 0.0 }, &mut r).is_err());
    }
}
