//! Permutation-invariant set encoders stacked one per plate.
//!
//! Each [`SetTransformer`] maps a set of `n` vectors to one embedding:
//! induced set attention blocks, attention pooling onto learned seeds, a
//! self-attention block over the seeds and a final linear projection.
//! [`HierarchicalEncoder`] applies one of them per plate rank, contracting
//! the innermost remaining plate at every level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Embedding width shared by every level.
    pub embedding: usize,
    pub heads: usize,
    /// Inducing points per ISAB.
    pub inducing: usize,
    pub isabs: usize,
    pub pma_seeds: usize,
    pub sabs: usize,
    /// Layer norms after each residual sum.
    #[serde(default)]
    pub layer_norm: bool,
}

const G: ParamGroup = ParamGroup::Encoder;

/// Multihead attention block `MAB(Q, K)`:
/// `H = Q' + Wo [heads]`, `out = H + relu(ff H)`, with each sum passed
/// through a layer norm when enabled. Keys and the feed-forward branch
/// start at zero, so a fresh block pools with uniform weights and is
/// affine in its inputs.
#[derive(Clone, Debug)]
struct Mab {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff: Linear,
    norms: Option<(LayerNorm, LayerNorm)>,
    heads: usize,
    d: usize,
}

impl Mab {
    fn new(store: &mut ParamStore, name: &str, dims: (usize, usize), spec: &EncoderSpec, rng: &mut Rng) -> Self {
        let (dq, dk) = dims;
        let d = spec.embedding;
        Mab {
            wq: Linear::new(store, &format!("{name}.q"), G, dq, d, rng),
            wk: Linear::zeros(store, &format!("{name}.k"), G, dk, d),
            wv: Linear::new(store, &format!("{name}.v"), G, dk, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), G, d, d, rng),
            ff: Linear::zeros(store, &format!("{name}.ff"), G, d, d),
            norms: spec.layer_norm.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln1"), G, d),
                    LayerNorm::new(store, &format!("{name}.ln2"), G, d),
                )
            }),
            heads: spec.heads,
            d,
        }
    }

    /// `q` is `(m, dq)` (shared across rows) or `(R, m, dq)`; `k` is
    /// `(R, n, dk)`. Returns `(R, m, d)`.
    fn forward<'t>(&self, p: &Bound<'t>, q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
        let r = k.shape()[0];
        let mut qp = self.wq.forward(p, q)?;
        if qp.shape().len() == 2 {
            let s = qp.shape();
            qp = qp.reshape(&[1, s[0], s[1]])?.expand(&[r, s[0], s[1]])?;
        }
        let kp = self.wk.forward(p, k)?;
        let vp = self.wv.forward(p, k)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.slice(2, h * dh, dh)?;
            let kh = kp.slice(2, h * dh, dh)?.transpose()?;
            let vh = vp.slice(2, h * dh, dh)?;
            let a = qh.matmul(kh)?.scale(scale)?.softmax()?;
            outs.push(a.matmul(vh)?);
        }
        let att = if outs.len() == 1 {
            outs[0]
        } else {
            qp.tape().concat(&outs, 2)?
        };
        let mut h = qp.add(self.wo.forward(p, att)?)?;
        if let Some((ln1, _)) = &self.norms {
            h = ln1.forward(p, h)?;
        }
        let out = h.add(self.ff.forward(p, h)?.relu()?)?;
        match &self.norms {
            Some((_, ln2)) => ln2.forward(p, out),
            None => Ok(out),
        }
    }
}

fn learned_points(store: &mut ParamStore, name: &str, m: usize, d: usize, rng: &mut Rng) -> ParamId {
    let bound = (6.0 / (m + d) as f64).sqrt();
    let v: Vec<f64> = (0..m * d).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
    store.add(name, G, Tensor::from_parts(vec![m, d], v))
}

#[derive(Clone, Debug)]
struct Isab {
    inducing: ParamId,
    to_inducing: Mab,
    from_inducing: Mab,
}

#[derive(Clone, Debug)]
pub struct SetTransformer {
    isabs: Vec<Isab>,
    seeds: ParamId,
    pma: Mab,
    sabs: Vec<Mab>,
    out: Linear,
    n_seeds: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl SetTransformer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, spec: &EncoderSpec, rng: &mut Rng) -> Result<Self> {
        let d = spec.embedding;
        if d == 0 || spec.heads == 0 || !d.is_multiple_of(spec.heads) {
            return Err(Error::config(format!(
                "embedding {d} must be a positive multiple of the head count {}",
                spec.heads
            )));
        }
        if spec.inducing == 0 || spec.pma_seeds == 0 {
            return Err(Error::config("inducing points and seeds must be positive"));
        }
        let mut width = in_dim;
        let mut isabs = Vec::with_capacity(spec.isabs);
        for i in 0..spec.isabs {
            let n = format!("{name}.isab{i}");
            isabs.push(Isab {
                inducing: learned_points(store, &format!("{n}.inducing"), spec.inducing, d, rng),
                to_inducing: Mab::new(store, &format!("{n}.mab0"), (d, width), spec, rng),
                from_inducing: Mab::new(store, &format!("{n}.mab1"), (width, d), spec, rng),
            });
            width = d;
        }
        let seeds = learned_points(store, &format!("{name}.pma.seeds"), spec.pma_seeds, d, rng);
        let pma = Mab::new(store, &format!("{name}.pma"), (d, width), spec, rng);
        let sabs = (0..spec.sabs)
            .map(|i| Mab::new(store, &format!("{name}.sab{i}"), (d, d), spec, rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), G, spec.pma_seeds * d, d, rng);
        Ok(SetTransformer {
            isabs,
            seeds,
            pma,
            sabs,
            out,
            n_seeds: spec.pma_seeds,
            in_dim,
            out_dim: d,
        })
    }

    /// Maps `(R, n, in_dim)` sets to `(R, out_dim)` embeddings.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(Error::config(format!(
                "set encoder expects (R, n, {}), got {s:?}",
                self.in_dim
            )));
        }
        if s[1] == 0 {
            return Err(Error::config("empty plate: sets need at least one element"));
        }
        let r = s[0];
        let mut h = x;
        for isab in &self.isabs {
            let ind = isab.to_inducing.forward(p, p.get(isab.inducing), h)?;
            h = isab.from_inducing.forward(p, h, ind)?;
        }
        let mut z = self.pma.forward(p, p.get(self.seeds), h)?;
        for sab in &self.sabs {
            z = sab.forward(p, z, z)?;
        }
        let z = z.reshape(&[r, self.n_seeds * self.out_dim])?;
        self.out.forward(p, z)
    }
}

/// One set transformer per plate rank.
#[derive(Clone, Debug)]
pub struct HierarchicalEncoder {
    pub levels: Vec<SetTransformer>,
    /// Cardinalities of plates `0..=P`.
    pub cards: Vec<usize>,
    pub embedding: usize,
}

impl HierarchicalEncoder {
    pub fn new(
        store: &mut ParamStore,
        cards: Vec<usize>,
        observed_size: usize,
        spec: &EncoderSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(cards.len());
        let mut width = observed_size;
        for h in 0..cards.len() {
            levels.push(SetTransformer::new(store, &format!("encoder.st{h}"), width, spec, rng)?);
            width = spec.embedding;
        }
        Ok(HierarchicalEncoder {
            levels,
            cards,
            embedding: spec.embedding,
        })
    }

    /// Encodes a batch of observations of shape `(B, B_0..., event...)`.
    /// Entry `h - 1` of the result is `E_h` with shape `(B, B_h..., d)`.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = x.shape();
        let depth = self.cards.len();
        let batch: Vec<usize> = self.cards.iter().rev().copied().collect();
        if s.len() < depth + 1 || s[1..=depth] != batch[..] {
            return Err(Error::config(format!(
                "observations of shape {s:?} do not match plate cardinalities {batch:?}"
            )));
        }
        let width: usize = s[depth + 1..].iter().product();
        if width != self.levels[0].in_dim {
            return Err(Error::config(format!(
                "observed event size {width} differs from the encoder input {}",
                self.levels[0].in_dim
            )));
        }
        let b = s[0];
        let mut cur = x;
        let mut w = width;
        let mut out = Vec::with_capacity(depth);
        for h in 0..depth {
            // remaining batch axes are plates P..=h; the last one is contracted
            let outer: usize = batch[..depth - h - 1].iter().product();
            let n = self.cards[h];
            let e = self.levels[h].forward(p, cur.reshape(&[b * outer, n, w])?)?;
            let mut shape = vec![b];
            shape.extend_from_slice(&batch[..depth - h - 1]);
            shape.push(self.embedding);
            cur = e.reshape(&shape)?;
            if !cur.value().is_finite() {
                return Err(Error::NonFinite(format!("encoding at level {}", h + 1)));
            }
            out.push(cur);
            w = self.embedding;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            embedding: 8,
            heads: 2,
            inducing: 4,
            isabs: 2,
            pma_seeds: 1,
            sabs: 1,
            layer_norm: false,
        }
    }

    #[test]
    fn set_output_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let st = SetTransformer::new(&mut store, "st", 3, &spec(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let x = rng.normals(&[7, 3]);
        let perm = rng.permutation(7);
        let xp = x.gather_rows(&perm).unwrap();
        let a = st.forward(&p, tape.constant(x.reshape(&[1, 7, 3]).unwrap())).unwrap();
        let b = st.forward(&p, tape.constant(xp.reshape(&[1, 7, 3]).unwrap())).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
    }

    #[test]
    fn singleton_and_empty_sets() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let st = SetTransformer::new(&mut store, "st", 2, &spec(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let one = st.forward(&p, tape.constant(Tensor::ones(&[1, 1, 2]))).unwrap();
        assert!(one.value().is_finite());
        let empty = st.forward(&p, tape.constant(Tensor::zeros(&[1, 0, 2])));
        assert!(matches!(empty, Err(Error::Config(_))));
    }
}
