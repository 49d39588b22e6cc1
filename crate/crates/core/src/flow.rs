//! Conditional normalizing flow: a context-driven affine block followed by a
//! masked autoregressive layer.
//!
//! The affine block computes `z = shift(c) + L(c) u` with `L` diagonal or
//! lower triangular. The autoregressive layer computes
//! `y_d = mu_d(z_<d, c) + sigma_d(z_<d, c) z_d`, so sampling is a single
//! pass while the inverse runs one dimension at a time. Every map that feeds
//! a shift or a scale starts at zero, making a fresh flow the identity.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{softplus_inv, Var};
use crate::tensor::Tensor;

/// Lower bound added to every scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineKind {
    Diagonal,
    Triangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub affine: AffineKind,
    /// Hidden layer widths of the autoregressive conditioner; empty drops
    /// the autoregressive layer.
    pub maf_hidden: Vec<usize>,
}

/// `softplus(raw + c) + floor` with `c` chosen so that `raw = 0` gives 1.
fn positive_scale<'t>(raw: Var<'t>) -> Result<Var<'t>> {
    raw.add_scalar(softplus_inv(1.0 - SCALE_FLOOR))?
        .softplus()?
        .add_scalar(SCALE_FLOOR)
}

#[derive(Clone, Debug)]
struct Made {
    input: Linear,
    input_mask: Tensor,
    context_w: ParamId,
    hidden: Vec<(Linear, Tensor)>,
    out: Linear,
    out_mask: Tensor,
}

/// MADE-style masks. Latent input `i` has degree `i + 1`; hidden units
/// cycle through degrees `0..S`, where degree 0 sees only the context;
/// output `d` may read hidden units of degree at most `d`.
fn made_masks(s: usize, hidden: &[usize]) -> (Tensor, Vec<Tensor>, Tensor) {
    let deg = |width: usize| -> Vec<usize> { (0..width).map(|k| k % s).collect() };
    let mut prev: Vec<usize> = (1..=s).collect();
    let mut masks = Vec::new();
    for &h in hidden {
        let cur = deg(h);
        let mut m = Vec::with_capacity(prev.len() * h);
        for &p in &prev {
            for &c in &cur {
                m.push(if c >= p { 1.0 } else { 0.0 });
            }
        }
        masks.push(Tensor::from_parts(vec![prev.len(), h], m));
        prev = cur;
    }
    let mut out = Vec::with_capacity(prev.len() * 2 * s);
    for &p in &prev {
        for _ in 0..2 {
            for d in 0..s {
                out.push(if p <= d { 1.0 } else { 0.0 });
            }
        }
    }
    let input_mask = masks.remove(0);
    (input_mask, masks, Tensor::from_parts(vec![prev.len(), 2 * s], out))
}

impl Made {
    fn new(store: &mut ParamStore, name: &str, s: usize, ctx: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let g = ParamGroup::Maf;
        let (input_mask, hidden_masks, out_mask) = made_masks(s, hidden);
        let input = Linear::new(store, &format!("{name}.in"), g, s, hidden[0], rng);
        let bound = 1.0 / ((s + ctx) as f64).sqrt();
        let cw: Vec<f64> = (0..ctx * hidden[0])
            .map(|_| bound * (2.0 * rng.uniform() - 1.0))
            .collect();
        let context_w = store.add(
            format!("{name}.ctx.w"),
            g,
            Tensor::from_parts(vec![ctx, hidden[0]], cw),
        );
        let hidden: Vec<(Linear, Tensor)> = hidden
            .windows(2)
            .zip(hidden_masks)
            .enumerate()
            .map(|(i, (w, m))| (Linear::new(store, &format!("{name}.h{i}"), g, w[0], w[1], rng), m))
            .collect();
        let last = hidden.last().map_or(input.out_dim, |(l, _)| l.out_dim);
        let out = Linear::zeros(store, &format!("{name}.out"), g, last, 2 * s);
        Made {
            input,
            input_mask,
            context_w,
            hidden,
            out,
            out_mask,
        }
    }

    /// Shift and positive scale for every latent dimension.
    fn conditioner<'t>(&self, p: &Bound<'t>, z: Var<'t>, ctx: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = z.shape()[1];
        let mut h = self
            .input
            .forward_masked(p, z, &self.input_mask)?
            .add(ctx.matmul(p.get(self.context_w))?)?
            .tanh()?;
        for (layer, mask) in &self.hidden {
            h = layer.forward_masked(p, h, mask)?.tanh()?;
        }
        let o = self.out.forward_masked(p, h, &self.out_mask)?;
        let mu = o.slice(1, 0, s)?;
        let sigma = positive_scale(o.slice(1, s, s)?)?;
        Ok((mu, sigma))
    }
}

#[derive(Clone, Debug)]
pub struct ConditionalFlow {
    pub latent: usize,
    pub context: usize,
    pub affine: AffineKind,
    shift: Linear,
    diag: Linear,
    offdiag: Option<Linear>,
    tri_index: Arc<Vec<Option<usize>>>,
    made: Option<Made>,
}

impl ConditionalFlow {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        context: usize,
        spec: &FlowSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        if latent == 0 || context == 0 {
            return Err(Error::config("flow needs positive latent and context sizes"));
        }
        if spec.maf_hidden.contains(&0) {
            return Err(Error::config("autoregressive hidden widths must be positive"));
        }
        let shift = Linear::zeros(store, &format!("{name}.affine.shift"), ParamGroup::AffineShift, context, latent);
        let diag = Linear::zeros(store, &format!("{name}.affine.diag"), ParamGroup::AffineScale, context, latent);
        let n_off = latent * (latent - 1) / 2;
        let offdiag = (spec.affine == AffineKind::Triangular && n_off > 0).then(|| {
            Linear::zeros(store, &format!("{name}.affine.offdiag"), ParamGroup::AffineScale, context, n_off)
        });
        let mut tri_index = Vec::with_capacity(latent * latent);
        let mut k = latent;
        for i in 0..latent {
            for j in 0..latent {
                tri_index.push(match j.cmp(&i) {
                    std::cmp::Ordering::Equal => Some(i),
                    std::cmp::Ordering::Less => {
                        k += 1;
                        Some(k - 1)
                    }
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let made = (!spec.maf_hidden.is_empty())
            .then(|| Made::new(store, &format!("{name}.maf"), latent, context, &spec.maf_hidden, rng));
        Ok(ConditionalFlow {
            latent,
            context,
            affine: spec.affine,
            shift,
            diag,
            offdiag,
            tri_index: Arc::new(tri_index),
            made,
        })
    }

    fn check(&self, x: Var<'_>, ctx: Var<'_>) -> Result<usize> {
        let (xs, cs) = (x.shape(), ctx.shape());
        if xs.len() != 2 || xs[1] != self.latent || cs.len() != 2 || cs[1] != self.context || cs[0] != xs[0] {
            return Err(Error::config(format!(
                "flow expects (R, {}) values with (R, {}) context, got {xs:?} and {cs:?}",
                self.latent, self.context
            )));
        }
        Ok(xs[0])
    }

    /// The affine shift alone, `z` at `u = 0`.
    pub fn shift<'t>(&self, p: &Bound<'t>, ctx: Var<'t>) -> Result<Var<'t>> {
        self.shift.forward(p, ctx)
    }

    /// Diagonal scales and, for a triangular block, the full `(R, S, S)`
    /// lower-triangular factor.
    fn scale<'t>(&self, p: &Bound<'t>, ctx: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let diag = positive_scale(self.diag.forward(p, ctx)?)?;
        let Some(off) = &self.offdiag else {
            return Ok((diag, None));
        };
        let r = ctx.shape()[0];
        let s = self.latent;
        let entries = ctx.tape().concat(&[diag, off.forward(p, ctx)?], 1)?;
        let l = entries
            .gather_last(self.tri_index.clone())?
            .reshape(&[r, s, s])?;
        Ok((diag, Some(l)))
    }

    /// `u -> z`, returning `z` and the log-determinant per row.
    pub fn forward<'t>(&self, p: &Bound<'t>, u: Var<'t>, ctx: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let r = self.check(u, ctx)?;
        let s = self.latent;
        let (diag, tri) = self.scale(p, ctx)?;
        let scaled = match tri {
            Some(l) => l.matmul(u.reshape(&[r, s, 1])?)?.reshape(&[r, s])?,
            None => diag.mul(u)?,
        };
        let z = self.shift.forward(p, ctx)?.add(scaled)?;
        let mut ldj = diag.log()?.sum_axis(1)?;
        let y = match &self.made {
            Some(m) => {
                let (mu, sigma) = m.conditioner(p, z, ctx)?;
                ldj = ldj.add(sigma.log()?.sum_axis(1)?)?;
                mu.add(sigma.mul(z)?)?
            }
            None => z,
        };
        Ok((y, ldj))
    }

    /// `y -> u`, returning `u` and the inverse log-determinant per row.
    pub fn inverse<'t>(&self, p: &Bound<'t>, y: Var<'t>, ctx: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let r = self.check(y, ctx)?;
        if let Some(i) = y.value().data().iter().position(|v| !v.is_finite()) {
            return Err(Error::domain("flow_inverse", i, "non-finite input"));
        }
        let s = self.latent;
        let tape = y.tape();
        let mut ildj = tape.zeros(&[r]);
        let z = match &self.made {
            Some(m) => {
                let mut cols: Vec<Var<'t>> = Vec::with_capacity(s);
                let mut last_sigma = None;
                for d in 0..s {
                    let mut parts = cols.clone();
                    parts.push(tape.zeros(&[r, s - d]));
                    let partial = tape.concat(&parts, 1)?;
                    let (mu, sigma) = m.conditioner(p, partial, ctx)?;
                    let zd = y
                        .slice(1, d, 1)?
                        .sub(mu.slice(1, d, 1)?)?
                        .div(sigma.slice(1, d, 1)?)?;
                    cols.push(zd);
                    last_sigma = Some(sigma);
                }
                // the final pass saw every column its scales depend on
                let sigma = last_sigma.expect("latent size is positive");
                let z = tape.concat(&cols, 1)?;
                ildj = ildj.sub(sigma.log()?.sum_axis(1)?)?;
                z
            }
            None => y,
        };
        let centered = z.sub(self.shift.forward(p, ctx)?)?;
        let (diag, tri) = self.scale(p, ctx)?;
        let u = match tri {
            Some(l) => l.tri_solve(centered)?,
            None => centered.div(diag)?,
        };
        ildj = ildj.sub(diag.log()?.sum_axis(1)?)?;
        Ok((u, ildj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn spec() -> FlowSpec {
        FlowSpec {
            affine: AffineKind::Triangular,
            maf_hidden: vec![8, 8],
        }
    }

    /// Fills every parameter with small random values so the flow is far
    /// from the identity.
    pub(crate) fn randomize(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
        for i in 0..store.len() {
            let shape = store.params()[i].value.shape().to_vec();
            let v = rng.normals(&shape).map(|x| scale * x);
            store.set_value(i, v).unwrap();
        }
    }

    #[test]
    fn fresh_flow_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let f = ConditionalFlow::new(&mut store, "f", 3, 4, &spec(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let u = tape.constant(rng.normals(&[5, 3]));
        let c = tape.constant(rng.normals(&[5, 4]));
        let (y, ldj) = f.forward(&p, u, c).unwrap();
        assert!(y.value().max_abs_diff(&u.value()) < 1e-12);
        assert!(ldj.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_log_det_cancel() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let f = ConditionalFlow::new(&mut store, "f", 3, 4, &spec(), &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.3);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let u = tape.constant(rng.normals(&[6, 3]));
        let c = tape.constant(rng.normals(&[6, 4]));
        let (y, fwd) = f.forward(&p, u, c).unwrap();
        let (back, inv) = f.inverse(&p, y, c).unwrap();
        assert!(back.value().max_abs_diff(&u.value()) < 1e-10);
        let sum = fwd.add(inv).unwrap().value();
        assert!(sum.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn mismatched_rows_are_rejected() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let f = ConditionalFlow::new(&mut store, "f", 2, 4, &spec(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let u = tape.constant(Tensor::zeros(&[3, 2]));
        let c = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(f.forward(&p, u, c), Err(Error::Config(_))));
    }

    #[test]
    fn conditioner_is_autoregressive() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let s = 4;
        let f = ConditionalFlow::new(&mut store, "f", s, 3, &spec(), &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let made = f.made.as_ref().unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let c = tape.constant(rng.normals(&[1, 3]));
        let z = rng.normals(&[1, s]);
        let (mu, sg) = made.conditioner(&p, tape.constant(z.clone()), c).unwrap();
        for j in 0..s {
            let mut zj = z.clone().into_vec();
            zj[j] = 0.0;
            let zj = tape.constant(Tensor::new(vec![1, s], zj).unwrap());
            let (mu2, sg2) = made.conditioner(&p, zj, c).unwrap();
            for d in 0..=j {
                assert_eq!(mu.value().data()[d], mu2.value().data()[d]);
                assert_eq!(sg.value().data()[d], sg2.value().data()[d]);
            }
        }
    }
}
