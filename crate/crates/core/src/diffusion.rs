//! Score-based diffusion over normalised latent feature tokens with EDM
//! preconditioning and a probability-flow Euler sampler.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{prefixed, prefixed_mut};
use crate::nn::{LayerNorm, LayerNormCache, Linear, ParamMut, ParamView, Params, Stack, StackCache};
use crate::optim::{collect_grads, TrainState};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub p_mean: f64,
    pub p_std: f64,
    /// Stored for completeness; no sampler or loss reads it.
    pub sigma_init: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 10,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_init: 0.1,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.rho <= 0.0 {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.n_steps < 2 {
            return Err(Error::Config(format!("need at least 2 reverse steps, got {}", self.n_steps)));
        }
        Ok(())
    }
}

/// `sigma = exp(p_mean + p_std * eps)` for a standard normal draw `eps`.
pub fn sample_sigma(schedule: &NoiseSchedule, unit_normal: f64) -> f64 {
    (schedule.p_mean + schedule.p_std * unit_normal).exp()
}

/// `Z_sigma = Z0 + sigma * E`.
pub fn add_noise(z0: &Array3<f64>, sigma: f64, noise: &Array3<f64>) -> Result<Array3<f64>> {
    if z0.dim() != noise.dim() {
        return Err(Error::Shape(format!("latents {:?} vs noise {:?}", z0.dim(), noise.dim())));
    }
    Ok(z0 + &(noise * sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self { sigma_data: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioner {
    pub fn coefficients(&self, sigma: f64) -> Result<Coefficients> {
        if sigma.is_nan() || sigma <= 0.0 || sigma.is_infinite() {
            return Err(Error::Domain(format!("sigma must be positive and finite, got {sigma}")));
        }
        let sd2 = self.sigma_data * self.sigma_data;
        let total = sigma * sigma + sd2;
        // sqrt of the reciprocal is correctly rounded, so sigma = sigma_data
        // gives exactly 1/sqrt(2)
        let c_in = (1.0 / total).sqrt();
        Ok(Coefficients {
            c_skip: sd2 / total,
            c_out: sigma * self.sigma_data * c_in,
            c_in,
            c_noise: sigma.ln() / 4.0,
        })
    }

    /// `lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        (sigma * sigma + sd2) / (sigma * sigma * sd2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub latent_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            latent_dim: 192,
        }
    }
}

/// The raw network `F_theta`: noise embedding added to every token, a
/// transformer over feature tokens, then a zero-initialised output head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNetwork {
    pub config: DenoiserConfig,
    pub noise_embed: Linear,
    pub stack: Stack,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
}

pub struct DenoiserCache {
    embed_in: Array2<f64>,
    stack: StackCache,
    norm: LayerNormCache,
    normed: Array2<f64>,
    tokens: usize,
}

/// Sinusoidal features of a scalar with geometric frequencies in `[1, 64]`.
pub fn noise_features(c_noise: f64, width: usize) -> Array1<f64> {
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for i in 0..half {
        let freq = if half > 1 { 64f64.powf(i as f64 / (half - 1) as f64) } else { 1.0 };
        out[i] = (c_noise * freq).sin();
        out[half + i] = (c_noise * freq).cos();
    }
    out
}

impl DenoiserNetwork {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let k = config.latent_dim;
        if config.n_heads == 0 || !k.is_multiple_of(config.n_heads) {
            return Err(Error::Config(format!(
                "latent_dim {k} must be divisible by n_heads {}",
                config.n_heads
            )));
        }
        let mut r = rng::rng_from(seed, &[0xd1f]);
        let noise_embed = Linear::new(&mut r, k, k);
        let stack = Stack::new(&mut r, config.n_layers, k, config.n_heads);
        Ok(Self {
            noise_embed,
            stack,
            out_norm: LayerNorm::new(k),
            out_proj: Linear::zeros(k, k),
            config,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `x` is `(B*T, k)`; `c_noise` has one entry per sample.
    pub fn forward(&self, x: &Array2<f64>, c_noise: &[f64], tokens: usize) -> (Array2<f64>, DenoiserCache) {
        let k = self.latent_dim();
        let mut embed_in = Array2::zeros((c_noise.len(), k));
        for (b, &c) in c_noise.iter().enumerate() {
            embed_in.row_mut(b).assign(&noise_features(c, k));
        }
        let emb = self.noise_embed.forward(&embed_in);
        let mut h0 = x.clone();
        for (b, e) in emb.rows().into_iter().enumerate() {
            let mut blk = h0.slice_mut(s![b * tokens..(b + 1) * tokens, ..]);
            blk += &e;
        }
        let (h, stack) = self.stack.forward(&h0, tokens);
        let (normed, norm) = self.out_norm.forward(&h);
        let out = self.out_proj.forward(&normed);
        (
            out,
            DenoiserCache {
                embed_in,
                stack,
                norm,
                normed,
                tokens,
            },
        )
    }

    /// Parameter gradients only; the input gradient is not needed.
    pub fn backward(&self, cache: &DenoiserCache, dout: &Array2<f64>, grad: &mut DenoiserNetwork) {
        let dnormed = self.out_proj.backward(&cache.normed, dout, &mut grad.out_proj);
        let dh = self.out_norm.backward(&cache.norm, &dnormed, &mut grad.out_norm);
        let dh0 = self.stack.backward(&cache.stack, &dh, &mut grad.stack);
        let b = cache.embed_in.nrows();
        let demb = dh0
            .into_shape_with_order((b, cache.tokens, self.latent_dim()))
            .expect("shape")
            .sum_axis(Axis(1));
        self.noise_embed.backward(&cache.embed_in, &demb, &mut grad.noise_embed);
    }
}

impl Params for DenoiserNetwork {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("noise_embed", self.noise_embed.params());
        v.extend(prefixed("stack", self.stack.params()));
        v.extend(prefixed("out_norm", self.out_norm.params()));
        v.extend(prefixed("out_proj", self.out_proj.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = prefixed_mut("noise_embed", self.noise_embed.params_mut());
        v.extend(prefixed_mut("stack", self.stack.params_mut()));
        v.extend(prefixed_mut("out_norm", self.out_norm.params_mut()));
        v.extend(prefixed_mut("out_proj", self.out_proj.params_mut()));
        v
    }
}

/// Anything that maps noisy latents at a noise level to clean estimates.
pub trait Denoise {
    /// `z` is `(B, T, k)`; one sigma per sample.
    fn denoise(&self, z: &Array3<f64>, sigmas: &[f64]) -> Result<Array3<f64>>;
}

/// `G(Z, sigma) = c_skip Z + c_out F(c_in Z, c_noise)`.
#[derive(Debug, Clone, Copy)]
pub struct EdmDenoiser<'a> {
    pub net: &'a DenoiserNetwork,
    pub precond: Preconditioner,
}

impl<'a> EdmDenoiser<'a> {
    pub fn new(net: &'a DenoiserNetwork, precond: Preconditioner) -> Self {
        Self { net, precond }
    }

    fn forward_with_cache(
        &self,
        z: &Array3<f64>,
        sigmas: &[f64],
    ) -> Result<(Array3<f64>, Vec<Coefficients>, DenoiserCache)> {
        let (b, t, k) = z.dim();
        if sigmas.len() != b {
            return Err(Error::Shape(format!("{b} samples but {} noise levels", sigmas.len())));
        }
        if k != self.net.latent_dim() {
            return Err(Error::Shape(format!(
                "latent dim {k} but denoiser expects {}",
                self.net.latent_dim()
            )));
        }
        let coeffs = sigmas
            .iter()
            .map(|&s| self.precond.coefficients(s))
            .collect::<Result<Vec<_>>>()?;
        let mut scaled = z.clone();
        for (i, c) in coeffs.iter().enumerate() {
            scaled.slice_mut(s![i, .., ..]).mapv_inplace(|v| v * c.c_in);
        }
        let c_noise: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
        let x = scaled.into_shape_with_order((b * t, k)).expect("contiguous");
        let (f, cache) = self.net.forward(&x, &c_noise, t);
        let f = f.into_shape_with_order((b, t, k)).expect("shape");
        let mut out = Array3::zeros((b, t, k));
        for (i, c) in coeffs.iter().enumerate() {
            let mut o = out.slice_mut(s![i, .., ..]);
            o.assign(&z.slice(s![i, .., ..]));
            o.mapv_inplace(|v| v * c.c_skip);
            o.scaled_add(c.c_out, &f.slice(s![i, .., ..]));
        }
        Ok((out, coeffs, cache))
    }
}

impl Denoise for EdmDenoiser<'_> {
    fn denoise(&self, z: &Array3<f64>, sigmas: &[f64]) -> Result<Array3<f64>> {
        if z.dim().0 == 0 {
            return Ok(z.clone());
        }
        Ok(self.forward_with_cache(z, sigmas)?.0)
    }
}

/// Score estimate `(G - Z) / sigma^2` for a single shared sigma.
pub fn score(den: &impl Denoise, z: &Array3<f64>, sigma: f64) -> Result<Array3<f64>> {
    let g = den.denoise(z, &vec![sigma; z.dim().0])?;
    Ok((g - z) / (sigma * sigma))
}

/// Probability-flow direction `(Z - G) / sigma`.
pub fn ode_direction(den: &impl Denoise, z: &Array3<f64>, sigma: f64) -> Result<Array3<f64>> {
    let g = den.denoise(z, &vec![sigma; z.dim().0])?;
    Ok((z - &g) / sigma)
}

/// Weighted denoising loss: per-sample `lambda(sigma_i) * ||G - Z0||^2`
/// (sum over tokens and dims), averaged over samples.
pub fn diffusion_loss(
    net: &DenoiserNetwork,
    precond: Preconditioner,
    z0: &Array3<f64>,
    sigmas: &[f64],
    noise: &Array3<f64>,
) -> Result<f64> {
    Ok(diffusion_loss_impl(net, precond, z0, sigmas, noise, false)?.0)
}

/// The same weighted objective for an arbitrary denoiser.
pub fn weighted_loss(
    den: &impl Denoise,
    precond: Preconditioner,
    z0: &Array3<f64>,
    sigmas: &[f64],
    noise: &Array3<f64>,
) -> Result<f64> {
    let b = z0.dim().0;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let z = noisy_batch(z0, sigmas, noise)?;
    let g = den.denoise(&z, sigmas)?;
    let mut loss = 0.0;
    for (i, &sigma) in sigmas.iter().enumerate() {
        let r = &g.slice(s![i, .., ..]) - &z0.slice(s![i, .., ..]);
        loss += precond.loss_weight(sigma) * r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(loss / b as f64)
}

/// Loss and parameter gradient.
pub fn diffusion_loss_and_grad(
    net: &DenoiserNetwork,
    precond: Preconditioner,
    z0: &Array3<f64>,
    sigmas: &[f64],
    noise: &Array3<f64>,
) -> Result<(f64, DenoiserNetwork)> {
    let (loss, grad) = diffusion_loss_impl(net, precond, z0, sigmas, noise, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn noisy_batch(z0: &Array3<f64>, sigmas: &[f64], noise: &Array3<f64>) -> Result<Array3<f64>> {
    if z0.dim() != noise.dim() {
        return Err(Error::Shape(format!("latents {:?} vs noise {:?}", z0.dim(), noise.dim())));
    }
    if sigmas.len() != z0.dim().0 {
        return Err(Error::Shape(format!("{} samples but {} noise levels", z0.dim().0, sigmas.len())));
    }
    let mut z = z0.clone();
    for (i, &sg) in sigmas.iter().enumerate() {
        z.slice_mut(s![i, .., ..]).scaled_add(sg, &noise.slice(s![i, .., ..]));
    }
    Ok(z)
}

fn diffusion_loss_impl(
    net: &DenoiserNetwork,
    precond: Preconditioner,
    z0: &Array3<f64>,
    sigmas: &[f64],
    noise: &Array3<f64>,
    want_grad: bool,
) -> Result<(f64, Option<DenoiserNetwork>)> {
    let (b, t, k) = z0.dim();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let z = noisy_batch(z0, sigmas, noise)?;
    let den = EdmDenoiser::new(net, precond);
    let (g, coeffs, cache) = den.forward_with_cache(&z, sigmas)?;
    let resid = &g - z0;
    let mut loss = 0.0;
    let mut dout = Array3::<f64>::zeros((b, t, k));
    for i in 0..b {
        let w = precond.loss_weight(sigmas[i]);
        let r = resid.slice(s![i, .., ..]);
        loss += w * r.iter().map(|v| v * v).sum::<f64>();
        if want_grad {
            // dL/dF = dL/dG * c_out
            let scale = 2.0 * w * coeffs[i].c_out / b as f64;
            dout.slice_mut(s![i, .., ..]).assign(&(&r * scale));
        }
    }
    loss /= b as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad = net.zeroed();
    let dout = dout.into_shape_with_order((b * t, k)).expect("contiguous");
    net.backward(&cache, &dout, &mut grad);
    Ok((loss, Some(grad)))
}

/// Draws a uniform random subset of `batch` rows (all rows when `batch >= n`).
pub fn sample_batch_rows(n: usize, batch: usize, r: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let m = batch.min(n);
    let (chosen, _) = rand::seq::SliceRandom::partial_shuffle(idx.as_mut_slice(), r, m);
    chosen.to_vec()
}

/// Per-sample noise levels and Gaussian noise for a batch.
pub fn draw_noise(schedule: &NoiseSchedule, shape: (usize, usize, usize), r: &mut Rng) -> (Vec<f64>, Array3<f64>) {
    let sigmas = (0..shape.0).map(|_| sample_sigma(schedule, rng::normal(r))).collect();
    let noise = Array3::from_shape_vec(shape, rng::normal_vec(r, shape.0 * shape.1 * shape.2)).expect("shape");
    (sigmas, noise)
}

/// One AdamW step on a batch of clean normalised latents. Fresh sigmas and
/// noise are drawn from `r`.
pub fn train_step(
    state: &mut TrainState,
    net: &mut DenoiserNetwork,
    precond: Preconditioner,
    schedule: &NoiseSchedule,
    z0: &Array3<f64>,
    r: &mut Rng,
) -> Result<f64> {
    let (sigmas, noise) = draw_noise(schedule, z0.dim(), r);
    let (loss, grad) = diffusion_loss_and_grad(net, precond, z0, &sigmas, &noise)?;
    let grads = collect_grads(&grad.params());
    state.apply(net.params_mut(), grads, loss)?;
    Ok(loss)
}

/// Karras-style decreasing noise levels from `sigma_max` to `sigma_min`.
pub fn karras_schedule(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.validate()?;
    let t = schedule.n_steps;
    let inv = 1.0 / schedule.rho;
    let (hi, lo) = (schedule.sigma_max.powf(inv), schedule.sigma_min.powf(inv));
    Ok((0..t)
        .map(|i| match i {
            0 => schedule.sigma_max,
            _ if i == t - 1 => schedule.sigma_min,
            _ => (hi + i as f64 / (t - 1) as f64 * (lo - hi)).powf(schedule.rho),
        })
        .collect())
}

/// Euler integration of the probability-flow ODE from pure noise at
/// `sigma_max` down to `sigma_min`, processed in independent chunks.
pub fn reverse_sample(
    den: &impl Denoise,
    schedule: &NoiseSchedule,
    n: usize,
    n_features: usize,
    latent_dim: usize,
    r: &mut Rng,
) -> Result<Array3<f64>> {
    let sigmas = karras_schedule(schedule)?;
    let shape = (n, n_features, latent_dim);
    let init = Array3::from_shape_vec(shape, rng::normal_vec(r, n * n_features * latent_dim))
        .expect("shape")
        * schedule.sigma_max;
    euler_from(den, &sigmas, init)
}

/// Runs the Euler steps from a given starting tensor at `sigmas[0]`.
pub fn euler_from(den: &impl Denoise, sigmas: &[f64], init: Array3<f64>) -> Result<Array3<f64>> {
    const CHUNK: usize = 1024;
    let n = init.dim().0;
    let mut out = init;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut z = out.slice(s![start..end, .., ..]).to_owned();
        for w in sigmas.windows(2) {
            let (cur, next) = (w[0], w[1]);
            let g = den.denoise(&z, &vec![cur; end - start])?;
            let d = (&z - &g) / cur;
            z.scaled_add(next - cur, &d);
        }
        out.slice_mut(s![start..end, .., ..]).assign(&z);
        start = end;
    }
    Ok(out)
}
