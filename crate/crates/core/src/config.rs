//! Flat run configuration. Keys follow the published hyperparameter tables;
//! every key has a default, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeMode, DecoderConfig, LatentSource};
use crate::diffusion::{DenoiserConfig, NoiseSchedule, Preconditioner};
use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // architecture
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_variant: EncoderVariant,
    pub latent_dim: usize,
    pub diffusion_layers: usize,
    pub diffusion_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub n_folds: usize,
    pub encoder_seed: u64,
    pub perturbation_seed: u64,
    pub fold_seed: u64,

    // diffusion and inference
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_init: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub reverse_steps: usize,
    pub decode_mode: String,
    pub temperature: f64,

    // optimisation
    pub rounds: usize,
    pub diffusion_learning_rate: f64,
    pub diffusion_weight_decay: f64,
    pub diffusion_steps_per_dataset: usize,
    pub decoder_learning_rate: f64,
    pub decoder_weight_decay: f64,
    pub decoder_steps_per_dataset: usize,
    pub batch_size: usize,
    pub gradient_clipping: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub shuffle_datasets: bool,
    pub fit_learning_rate: f64,
    /// Overrides `fit_learning_rate` for the decoder stage of fitting.
    pub fit_decoder_learning_rate: Option<f64>,
    pub fit_diffusion_steps: usize,
    pub fit_decoder_steps: usize,
    pub latent_source: LatentSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 12,
            encoder_heads: 6,
            encoder_variant: EncoderVariant::Shared,
            latent_dim: 192,
            diffusion_layers: 4,
            diffusion_heads: 4,
            decoder_layers: 4,
            decoder_heads: 4,
            n_folds: 5,
            encoder_seed: 0,
            perturbation_seed: 0,
            fold_seed: 0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_init: 0.1,
            rho: 7.0,
            sigma_data: 1.0,
            p_mean: -1.2,
            p_std: 1.2,
            reverse_steps: 10,
            decode_mode: "argmax".into(),
            temperature: 1.0,
            rounds: 10,
            diffusion_learning_rate: 1e-3,
            diffusion_weight_decay: 1e-5,
            diffusion_steps_per_dataset: 5000,
            decoder_learning_rate: 1e-1,
            decoder_weight_decay: 5e-5,
            decoder_steps_per_dataset: 5000,
            batch_size: 3172,
            gradient_clipping: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 50,
            shuffle_datasets: false,
            fit_learning_rate: 1e-6,
            fit_decoder_learning_rate: None,
            fit_diffusion_steps: 100,
            fit_decoder_steps: 100,
            latent_source: LatentSource::Denoised,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.schedule().validate()?;
        let positive = [
            ("rounds", self.rounds),
            ("diffusion_steps_per_dataset", self.diffusion_steps_per_dataset),
            ("decoder_steps_per_dataset", self.decoder_steps_per_dataset),
            ("batch_size", self.batch_size),
            ("fit_diffusion_steps", self.fit_diffusion_steps),
            ("fit_decoder_steps", self.fit_decoder_steps),
            ("diffusion_heads", self.diffusion_heads),
            ("decoder_heads", self.decoder_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        for (name, h) in [("diffusion_heads", self.diffusion_heads), ("decoder_heads", self.decoder_heads)] {
            if !self.latent_dim.is_multiple_of(h) {
                return Err(Error::Config(format!("latent_dim {} not divisible by {name} {h}", self.latent_dim)));
            }
        }
        if self.sigma_data.is_nan() || self.sigma_data <= 0.0 {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        let rates = [
            self.diffusion_learning_rate,
            self.decoder_learning_rate,
            self.fit_learning_rate,
            self.fit_decoder_learning_rate.unwrap_or(0.0),
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        self.decode()?;
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.encoder_depth,
            latent_dim: self.latent_dim,
            n_heads: self.encoder_heads,
            weight_seed: self.encoder_seed,
            n_folds: self.n_folds,
            variant: self.encoder_variant,
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            n_steps: self.reverse_steps,
            p_mean: self.p_mean,
            p_std: self.p_std,
            sigma_init: self.sigma_init,
        }
    }

    pub fn preconditioner(&self) -> Preconditioner {
        Preconditioner {
            sigma_data: self.sigma_data,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            n_layers: self.diffusion_layers,
            n_heads: self.diffusion_heads,
            latent_dim: self.latent_dim,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.decoder_layers,
            n_heads: self.decoder_heads,
            latent_dim: self.latent_dim,
        }
    }

    pub fn decode(&self) -> Result<DecodeMode> {
        match self.decode_mode.as_str() {
            "argmax" => Ok(DecodeMode::Argmax),
            "sample" if self.temperature > 0.0 => Ok(DecodeMode::Sample {
                temperature: self.temperature,
            }),
            "sample" => Err(Error::Config("temperature must be positive".into())),
            other => Err(Error::Config(format!("unknown decode_mode `{other}` (argmax | sample)"))),
        }
    }

    pub fn fit_decoder_lr(&self) -> f64 {
        self.fit_decoder_learning_rate.unwrap_or(self.fit_learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_tables() {
        let c = RunConfig::default();
        assert_eq!((c.encoder_depth, c.latent_dim), (12, 192));
        assert_eq!((c.diffusion_layers, c.diffusion_heads, c.decoder_layers), (4, 4, 4));
        assert_eq!((c.sigma_min, c.sigma_max, c.sigma_init, c.rho, c.sigma_data), (0.002, 80.0, 0.1, 7.0, 1.0));
        assert_eq!(c.reverse_steps, 10);
        assert_eq!((c.rounds, c.diffusion_steps_per_dataset, c.decoder_steps_per_dataset), (10, 5000, 5000));
        assert_eq!((c.diffusion_learning_rate, c.diffusion_weight_decay), (1e-3, 1e-5));
        assert_eq!((c.decoder_learning_rate, c.decoder_weight_decay), (1e-1, 5e-5));
        assert_eq!((c.batch_size, c.fit_learning_rate), (3172, 1e-6));
        assert_eq!((c.fit_diffusion_steps, c.fit_decoder_steps), (100, 100));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = RunConfig::from_toml("latent_dim = 16\nencoder_heads = 2\ndiffusion_heads = 2\ndecoder_heads = 2\nrounds = 2\n").unwrap();
        assert_eq!((p.latent_dim, p.rounds, p.sigma_max), (16, 2, 80.0));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("lattent_dim = 3").is_err());
        assert!(RunConfig::from_toml("rounds = 0").is_err());
        assert!(RunConfig::from_toml("latent_dim = 10").is_err());
        assert!(RunConfig::from_toml("decode_mode = \"greedy\"").is_err());
        assert!(RunConfig::from_toml("sigma_min = 100.0").is_err());
    }
}
