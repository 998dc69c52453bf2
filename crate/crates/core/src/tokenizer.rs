//! Metadata-free per-feature tokenization: the cell value scales a shared
//! base vector plus a low-rank, feature-specific perturbation.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::{Tensor, TensorMap};

/// `N x F x k` feature tokens.
pub type TokenTensor = Array3<f64>;

/// Frozen tokenizer parameters: base vector `u` (length `k`), projection
/// `W` (`k x k'`), and the seed for the random `k' x F` matrix `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams {
    pub base: Array1<f64>,
    pub projection: Array2<f64>,
    pub perturbation_seed: u64,
    hash: String,
}

impl TokenizerParams {
    /// Draws `u` and `W` from a seeded standard normal scaled by `1/sqrt(k)`,
    /// rounded to `f32` so persisted copies are exact.
    /// The reduced dimension is `k/4` (at least 1).
    pub fn new(latent_dim: usize, weight_seed: u64, perturbation_seed: u64) -> Result<Self> {
        if latent_dim < 2 {
            return Err(Error::Config(format!("latent_dim must be at least 2, got {latent_dim}")));
        }
        let reduced = (latent_dim / 4).max(1);
        let mut r = rng::rng_from(weight_seed, &[0x70c]);
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let draw = |r: &mut rng::Rng, n: usize| -> Vec<f64> {
            rng::normal_vec(r, n)
                .into_iter()
                .map(|v| rng::to_f32_precision(v * scale))
                .collect()
        };
        let base = Array1::from(draw(&mut r, latent_dim));
        let projection = Array2::from_shape_vec((latent_dim, reduced), draw(&mut r, latent_dim * reduced)).expect("shape");
        Self::from_parts(base, projection, perturbation_seed)
    }

    pub fn from_parts(base: Array1<f64>, projection: Array2<f64>, perturbation_seed: u64) -> Result<Self> {
        let (k, kr) = projection.dim();
        if base.len() != k {
            return Err(Error::Shape(format!("base vector has length {}, projection has {k} rows", base.len())));
        }
        if kr == 0 || kr >= k {
            return Err(Error::Config(format!("reduced dim {kr} must satisfy 0 < k' < k = {k}")));
        }
        let hash = content_hash(&base, &projection);
        Ok(Self {
            base,
            projection,
            perturbation_seed,
            hash,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.base.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Hash recorded when the parameters were built.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let now = content_hash(&self.base, &self.projection);
        if now != self.hash {
            return Err(Error::Frozen(format!("tokenizer hash {now} != recorded {}", self.hash)));
        }
        Ok(())
    }

    /// Per-feature perturbation rows `r_j`, i.e. `(W P)^T` as an `F x k`
    /// matrix. `P` is drawn from a stream keyed by `(perturbation_seed, F)`.
    pub fn build_perturbations(&self, n_features: usize) -> Array2<f64> {
        let kr = self.reduced_dim();
        let mut r = rng::rng_from(self.perturbation_seed, &[0x9e7, n_features as u64]);
        let p = Array2::from_shape_vec((kr, n_features), rng::normal_vec(&mut r, kr * n_features)).expect("shape");
        self.projection.dot(&p).reversed_axes().as_standard_layout().into_owned()
    }

    /// `t_ij = x_ij (u + r_j)`.
    pub fn tokenize(&self, x: &Array2<f64>, perturbations: &Array2<f64>) -> Result<TokenTensor> {
        let (n, f) = x.dim();
        let k = self.latent_dim();
        if perturbations.dim() != (f, k) {
            return Err(Error::Shape(format!(
                "table has {f} columns but perturbations are {:?}, expected ({f}, {k})",
                perturbations.dim()
            )));
        }
        let directions = perturbations + &self.base;
        let mut out = Array3::zeros((n, f, k));
        for i in 0..n {
            for j in 0..f {
                let v = x[[i, j]];
                for (o, d) in out.slice_mut(ndarray::s![i, j, ..]).iter_mut().zip(directions.row(j)) {
                    *o = v * d;
                }
            }
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("base".into(), Tensor::new(vec![self.latent_dim()], self.base.to_vec()));
        m.insert(
            "projection".into(),
            Tensor::new(
                vec![self.latent_dim(), self.reduced_dim()],
                self.projection.iter().copied().collect(),
            ),
        );
        m
    }

    pub fn from_tensors(t: &TensorMap, perturbation_seed: u64) -> Result<Self> {
        let base = t.get("base").ok_or_else(|| Error::Binding("missing tokenizer `base`".into()))?;
        let proj = t
            .get("projection")
            .ok_or_else(|| Error::Binding("missing tokenizer `projection`".into()))?;
        if proj.shape.len() != 2 {
            return Err(Error::Shape("tokenizer projection must be 2-D".into()));
        }
        let projection = Array2::from_shape_vec((proj.shape[0], proj.shape[1]), proj.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_parts(Array1::from(base.data.clone()), projection, perturbation_seed)
    }

}

fn content_hash(base: &Array1<f64>, projection: &Array2<f64>) -> String {
    let p: Vec<f64> = projection.iter().copied().collect();
    rng::hash_slices([base.as_slice().expect("contiguous"), p.as_slice()])
}
