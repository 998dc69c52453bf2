use crate::error::{Error, Result};
use crate::store::{Tensor, TensorMap};

pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Uniform access to a module's trainable arrays, in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<ParamView<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    /// A copy with every parameter set to zero, used as a gradient buffer.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.data.fill(0.0);
        }
        g
    }

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn content_hash(&self) -> String {
        crate::rng::hash_slices(self.params().iter().map(|p| p.data))
    }

    fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            crate::rng::round_slice_f32(p.data);
        }
    }

    fn to_tensors(&self) -> TensorMap {
        self.params()
            .into_iter()
            .map(|p| {
                let t = Tensor {
                    shape: p.shape,
                    data: p.data.to_vec(),
                };
                (p.name, t)
            })
            .collect()
    }

    /// Copies values from a name → (shape, data) map; every parameter must
    /// be present with a matching shape.
    fn load_tensors(&mut self, src: &TensorMap) -> Result<()> {
        for p in self.params_mut() {
            let Tensor { shape, data } = src
                .get(&p.name)
                .ok_or_else(|| Error::Binding(format!("missing tensor `{}`", p.name)))?;
            if *shape != p.shape {
                return Err(Error::Binding(format!(
                    "tensor `{}` has shape {shape:?}, expected {:?}",
                    p.name, p.shape
                )));
            }
            p.data.copy_from_slice(data);
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<ParamView<'a>>) -> Vec<ParamView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, views: Vec<ParamMut<'a>>) -> Vec<ParamMut<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}
