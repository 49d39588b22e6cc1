//! Dense layers built on the parameter store.

use crate::error::Result;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Affine map over the last axis: `x W + b` with `W` of shape `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, `U(-b, b)` with `b = sqrt(6 / (in + out))`,
    /// and zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim).max(1) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| bound * (2.0 * rng.uniform() - 1.0))
            .collect();
        Linear {
            w: store.add(format!("{name}.w"), group, Tensor::from_parts(vec![in_dim, out_dim], w)),
            b: store.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), group, Tensor::zeros(&[in_dim, out_dim])),
            b: store.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }

    /// Forward pass with the weight matrix multiplied elementwise by `mask`.
    pub fn forward_masked<'t>(&self, p: &Bound<'t>, x: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
        let w = p.get(self.w).mul(x.tape().constant(mask.clone()))?;
        x.matmul(w)?.add(p.get(self.b))
    }
}

/// Normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), group, Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim])),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let last = shape.len() - 1;
        let mean = x.mean_axis(last)?.unsqueeze(last)?.expand(&shape)?;
        let centered = x.sub(mean)?;
        let var = centered
            .square()?
            .mean_axis(last)?
            .add_scalar(self.eps)?
            .sqrt()?
            .unsqueeze(last)?
            .expand(&shape)?;
        centered
            .div(var)?
            .mul(p.get(self.gain))?
            .add(p.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", ParamGroup::Encoder, 4);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let x = tape.constant(Tensor::new(vec![2, 4], vec![1., 2., 3., 4., -1., 0., 5., 2.]).unwrap());
        let y = ln.forward(&p, x).unwrap().value();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_applies_over_leading_axes() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", ParamGroup::Encoder, 3, 2, &mut Rng::new(0));
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let x = tape.constant(Tensor::ones(&[5, 4, 3]));
        assert_eq!(lin.forward(&p, x).unwrap().shape(), vec![5, 4, 2]);
    }
}
