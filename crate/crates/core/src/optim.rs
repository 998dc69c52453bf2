//! Optimizers, global-norm clipping and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamMut, ParamView};
use crate::store::{Tensor, TensorMap};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

pub(crate) fn collect_grads(views: &[ParamView<'_>]) -> Vec<Vec<f64>> {
    views.iter().map(|p| p.data.to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// Decoupled-weight-decay optimizer state (AdamW or momentum-free SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adamw(lr, weight_decay)
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: Vec<ParamMut<'_>>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let lr = self.lr;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, gv) in p.data.iter_mut().zip(g) {
                        *w = *w * decay - lr * gv;
                    }
                }
            }
            OptimizerKind::AdamW => {
                if self.moments.len() != grads.len() {
                    self.moments = params
                        .iter()
                        .map(|p| (p.name.clone(), vec![0.0; p.data.len()], vec![0.0; p.data.len()]))
                        .collect();
                }
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for ((p, g), (_, m, v)) in params.into_iter().zip(grads).zip(self.moments.iter_mut()) {
                    for (((w, gv), mm), vv) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mm = b1 * *mm + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let update = (*mm / c1) / ((*vv / c2).sqrt() + self.eps);
                        *w = *w * decay - lr * update;
                    }
                }
            }
        }
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, m, v) in &self.moments {
            out.insert(format!("m.{name}"), Tensor::new(vec![m.len()], m.clone()));
            out.insert(format!("v.{name}"), Tensor::new(vec![v.len()], v.clone()));
        }
        out
    }

    /// Restores moments saved by [`Self::to_tensors`] for the given
    /// parameter names, in order.
    pub fn load_moments(&mut self, names: &[String], src: &TensorMap) -> Result<()> {
        if src.is_empty() {
            self.moments.clear();
            return Ok(());
        }
        let mut moments = Vec::with_capacity(names.len());
        for name in names {
            let get = |k: String| {
                src.get(&k)
                    .map(|t| t.data.clone())
                    .ok_or_else(|| Error::Binding(format!("missing optimizer tensor `{k}`")))
            };
            moments.push((name.clone(), get(format!("m.{name}"))?, get(format!("v.{name}"))?));
        }
        self.moments = moments;
        Ok(())
    }
}

/// Halves the learning rate when a smoothed training loss stops improving.
///
/// The monitored value is an exponential moving average of the per-step loss
/// (per-step losses are too noisy to compare directly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub smoothing: f64,
    pub ema: Option<f64>,
    pub best: f64,
    pub bad_steps: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            min_lr: 0.0,
            smoothing: 0.9,
            ema: None,
            best: f64::INFINITY,
            bad_steps: 0,
        }
    }

    /// Feeds one loss; returns the new learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        let ema = match self.ema {
            Some(e) => self.smoothing * e + (1.0 - self.smoothing) * loss,
            None => loss,
        };
        self.ema = Some(ema);
        if ema < self.best * (1.0 - self.threshold) {
            self.best = ema;
            self.bad_steps = 0;
            return lr;
        }
        self.bad_steps += 1;
        if self.bad_steps > self.patience {
            self.bad_steps = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Optimizer plus schedule, clipping threshold and loss log for one
/// training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub optimizer: Optimizer,
    pub plateau: Plateau,
    pub clip_norm: f64,
    pub step: u64,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(optimizer: Optimizer, plateau: Plateau, clip_norm: f64) -> Self {
        Self {
            optimizer,
            plateau,
            clip_norm,
            step: 0,
            losses: Vec::new(),
        }
    }

    /// Clip, update, advance the schedule and log the loss.
    pub fn apply(&mut self, params: Vec<ParamMut<'_>>, mut grads: Vec<Vec<f64>>, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss} at step {} (lr {})",
                self.step, self.optimizer.lr
            )));
        }
        let norm = clip_global_norm(&mut grads, self.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm at step {}", self.step)));
        }
        self.optimizer.step(params, &grads);
        self.optimizer.lr = self.plateau.observe(loss, self.optimizer.lr);
        self.step += 1;
        self.losses.push(loss);
        Ok(())
    }
}

impl TrainState {
    /// Everything needed to continue training exactly: scalars, loss log and
    /// optimizer moments.
    pub fn to_tensors(&self) -> TensorMap {
        let scalars = vec![
            self.optimizer.lr,
            self.optimizer.t as f64,
            self.step as f64,
            self.plateau.ema.unwrap_or(f64::NAN),
            self.plateau.best,
            self.plateau.bad_steps as f64,
        ];
        let mut out = self.optimizer.to_tensors();
        out.insert("scalars".into(), Tensor::new(vec![scalars.len()], scalars));
        out.insert("losses".into(), Tensor::new(vec![self.losses.len()], self.losses.clone()));
        out
    }

    pub fn load_tensors(&mut self, src: &TensorMap, param_names: &[String]) -> Result<()> {
        let get = |k: &str| src.get(k).ok_or_else(|| Error::Binding(format!("missing train-state tensor `{k}`")));
        let sc = &get("scalars")?.data;
        if sc.len() != 6 {
            return Err(Error::Binding("malformed train-state scalars".into()));
        }
        self.optimizer.lr = sc[0];
        self.optimizer.t = sc[1] as u64;
        self.step = sc[2] as u64;
        self.plateau.ema = (!sc[3].is_nan()).then_some(sc[3]);
        self.plateau.best = sc[4];
        self.plateau.bad_steps = sc[5] as usize;
        self.losses = get("losses")?.data.clone();
        let moments: TensorMap = src
            .iter()
            .filter(|(k, _)| k.starts_with("m.") || k.starts_with("v."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.optimizer.load_moments(param_names, &moments)
    }
}
