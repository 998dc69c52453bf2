use ndarray::Array2;

use super::attention::{Attention, AttentionCache};
use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use super::params::{prefixed, prefixed_mut, ParamMut, ParamView, Params};
use crate::rng::Rng;

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a
/// GELU feedforward of width `4k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new(rng: &mut Rng, width: usize, n_heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(width),
            attn: Attention::new(rng, width, n_heads),
            norm2: LayerNorm::new(width),
            ff_in: Linear::new(rng, width, 4 * width),
            ff_out: Linear::new(rng, 4 * width, width),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, tokens: usize) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&h1, tokens);
        let x1 = x + &a;
        let (h2, ln2) = self.norm2.forward(&x1);
        let pre_act = self.ff_in.forward(&h2);
        let act = pre_act.mapv(gelu);
        let f = self.ff_out.forward(&act);
        let y = x1 + &f;
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let dact = self.ff_out.backward(&cache.act, dy, &mut grad.ff_out);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.ff_in.backward(&cache.h2, &dpre, &mut grad.ff_in);
        let dx1 = dy + &self.norm2.backward(&cache.ln2, &dh2, &mut grad.norm2);
        let dh1 = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        dx1 + &self.norm1.backward(&cache.ln1, &dh1, &mut grad.norm1)
    }
}

impl Params for Block {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = prefixed("norm1", self.norm1.params());
        v.extend(prefixed("attn", self.attn.params()));
        v.extend(prefixed("norm2", self.norm2.params()));
        v.extend(prefixed("ff_in", self.ff_in.params()));
        v.extend(prefixed("ff_out", self.ff_out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = prefixed_mut("norm1", self.norm1.params_mut());
        v.extend(prefixed_mut("attn", self.attn.params_mut()));
        v.extend(prefixed_mut("norm2", self.norm2.params_mut()));
        v.extend(prefixed_mut("ff_in", self.ff_in.params_mut()));
        v.extend(prefixed_mut("ff_out", self.ff_out.params_mut()));
        v
    }
}

/// A sequence of blocks; zero blocks is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

pub struct StackCache {
    blocks: Vec<BlockCache>,
}

impl Stack {
    pub fn new(rng: &mut Rng, n_layers: usize, width: usize, n_heads: usize) -> Self {
        Self {
            blocks: (0..n_layers).map(|_| Block::new(rng, width, n_heads)).collect(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, tokens: usize) -> (Array2<f64>, StackCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, tokens);
            h = y;
            caches.push(c);
        }
        (h, StackCache { blocks: caches })
    }

    pub fn backward(&self, cache: &StackCache, dy: &Array2<f64>, grad: &mut Stack) -> Array2<f64> {
        let mut d = dy.clone();
        for ((b, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            d = b.backward(c, &d, g);
        }
        d
    }
}

impl Params for Stack {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("blocks.{i}"), b.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| prefixed_mut(&format!("blocks.{i}"), b.params_mut()))
            .collect()
    }
}
