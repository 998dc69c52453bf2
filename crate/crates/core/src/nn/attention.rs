use ndarray::Array2;

use super::layers::Linear;
use super::params::{prefixed, prefixed_mut, ParamMut, ParamView, Params};
use crate::rng::Rng;

/// Multi-head self-attention inside each group of `tokens` consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<f64>,
    mixed: Array2<f64>,
    tokens: usize,
}

impl Attention {
    pub fn new(rng: &mut Rng, width: usize, n_heads: usize) -> Self {
        assert!(n_heads > 0 && width.is_multiple_of(n_heads), "width must split evenly across heads");
        Self {
            n_heads,
            query: Linear::new(rng, width, width),
            key: Linear::new(rng, width, width),
            value: Linear::new(rng, width, width),
            output: Linear::new(rng, width, width),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, tokens: usize) -> (Array2<f64>, AttentionCache) {
        let rows = x.nrows();
        let width = x.ncols();
        assert!(tokens > 0 && rows.is_multiple_of(tokens), "rows must be a multiple of the token count");
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let groups = rows / tokens;
        let dh = width / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * self.n_heads * tokens * tokens];
        let mut mixed = Array2::<f64>::zeros((rows, width));
        {
            let qs = q.as_slice().expect("contiguous");
            let ks = k.as_slice().expect("contiguous");
            let vs = v.as_slice().expect("contiguous");
            let ms = mixed.as_slice_mut().expect("contiguous");
            for g in 0..groups {
                let base = g * tokens;
                for h in 0..self.n_heads {
                    let off = h * dh;
                    let p = &mut probs[(g * self.n_heads + h) * tokens * tokens..][..tokens * tokens];
                    for i in 0..tokens {
                        let qi = &qs[(base + i) * width + off..][..dh];
                        let row = &mut p[i * tokens..(i + 1) * tokens];
                        let mut max = f64::NEG_INFINITY;
                        for (j, s) in row.iter_mut().enumerate() {
                            let kj = &ks[(base + j) * width + off..][..dh];
                            *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                            max = max.max(*s);
                        }
                        let mut z = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        for s in row.iter_mut() {
                            *s /= z;
                        }
                        let out = &mut ms[(base + i) * width + off..][..dh];
                        for (j, &pij) in row.iter().enumerate() {
                            let vj = &vs[(base + j) * width + off..][..dh];
                            for (o, &vv) in out.iter_mut().zip(vj) {
                                *o += pij * vv;
                            }
                        }
                    }
                }
            }
        }
        let y = self.output.forward(&mixed);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            mixed,
            tokens,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, grad: &mut Attention) -> Array2<f64> {
        let dmixed = self.output.backward(&cache.mixed, dy, &mut grad.output);
        let rows = dy.nrows();
        let width = dy.ncols();
        let tokens = cache.tokens;
        let groups = rows / tokens;
        let dh = width / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::<f64>::zeros((rows, width));
        let mut dk = Array2::<f64>::zeros((rows, width));
        let mut dv = Array2::<f64>::zeros((rows, width));
        {
            let qs = cache.q.as_slice().expect("contiguous");
            let ks = cache.k.as_slice().expect("contiguous");
            let vs = cache.v.as_slice().expect("contiguous");
            let dms = dmixed.as_slice().expect("contiguous");
            let dqs = dq.as_slice_mut().expect("contiguous");
            let dks = dk.as_slice_mut().expect("contiguous");
            let dvs = dv.as_slice_mut().expect("contiguous");
            let mut dp = vec![0.0; tokens];
            for g in 0..groups {
                let base = g * tokens;
                for h in 0..self.n_heads {
                    let off = h * dh;
                    let p = &cache.probs[(g * self.n_heads + h) * tokens * tokens..][..tokens * tokens];
                    for i in 0..tokens {
                        let doi = &dms[(base + i) * width + off..][..dh];
                        let prow = &p[i * tokens..(i + 1) * tokens];
                        let mut dot = 0.0;
                        for j in 0..tokens {
                            let vj = &vs[(base + j) * width + off..][..dh];
                            dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            dot += dp[j] * prow[j];
                            let dvj = &mut dvs[(base + j) * width + off..][..dh];
                            for (d, &o) in dvj.iter_mut().zip(doi) {
                                *d += prow[j] * o;
                            }
                        }
                        let qi = &qs[(base + i) * width + off..][..dh];
                        for j in 0..tokens {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &ks[(base + j) * width + off..][..dh];
                            let dqi = &mut dqs[(base + i) * width + off..][..dh];
                            for (d, &kk) in dqi.iter_mut().zip(kj) {
                                *d += ds * kk;
                            }
                            let dkj = &mut dks[(base + j) * width + off..][..dh];
                            for (d, &qq) in dkj.iter_mut().zip(qi) {
                                *d += ds * qq;
                            }
                        }
                    }
                }
            }
        }
        let mut dx = self.query.backward(&cache.x, &dq, &mut grad.query);
        dx += &self.key.backward(&cache.x, &dk, &mut grad.key);
        dx += &self.value.backward(&cache.x, &dv, &mut grad.value);
        dx
    }
}

impl Params for Attention {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("query", self.query.params());
        v.extend(prefixed("key", self.key.params()));
        v.extend(prefixed("value", self.value.params()));
        v.extend(prefixed("output", self.output.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = prefixed_mut("query", self.query.params_mut());
        v.extend(prefixed_mut("key", self.key.params_mut()));
        v.extend(prefixed_mut("value", self.value.params_mut()));
        v.extend(prefixed_mut("output", self.output.params_mut()));
        v
    }
}
