use ndarray::{Array1, Array2, Axis};

use super::params::{ParamMut, ParamView, Params};
use crate::rng::{self, Rng};

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w = rng::normal_vec(rng, fan_in * fan_out)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Self {
            weight: Array2::from_shape_vec((fan_in, fan_out), w).expect("shape"),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "weight".into(),
                shape: self.weight.shape().to_vec(),
                data: self.weight.as_slice().expect("contiguous"),
            },
            ParamView {
                name: "bias".into(),
                shape: self.bias.shape().to_vec(),
                data: self.bias.as_slice().expect("contiguous"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let ws = self.weight.shape().to_vec();
        let bs = self.bias.shape().to_vec();
        vec![
            ParamMut {
                name: "weight".into(),
                shape: ws,
                data: self.weight.as_slice_mut().expect("contiguous"),
            },
            ParamMut {
                name: "bias".into(),
                shape: bs,
                data: self.bias.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learnable gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let width = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / width;
            *istd = 1.0 / (var + LN_EPS).sqrt();
            let s = *istd;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let width = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &istd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / width;
            let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / width;
            for (d, &h) in row.iter_mut().zip(xh.iter()) {
                *d = istd * (*d - mean_d - h * mean_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "gamma".into(),
                shape: vec![self.gamma.len()],
                data: self.gamma.as_slice().expect("contiguous"),
            },
            ParamView {
                name: "beta".into(),
                shape: vec![self.beta.len()],
                data: self.beta.as_slice().expect("contiguous"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let n = self.gamma.len();
        vec![
            ParamMut {
                name: "gamma".into(),
                shape: vec![n],
                data: self.gamma.as_slice_mut().expect("contiguous"),
            },
            ParamMut {
                name: "beta".into(),
                shape: vec![n],
                data: self.beta.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU, written as `x * sigmoid(2u)` which equals
/// `0.5 x (1 + tanh u)` and needs a single `exp`.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
