//! Fixed bijections from an unconstrained latent space onto the event space
//! of a random variable.
//!
//! All maps act on a leading row axis: `forward` takes `(R, latent...)` and
//! returns `(R, event...)`, and log-determinants come back as `(R,)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Link {
    Identity,
    Exp,
    Reshape { from: Vec<usize>, to: Vec<usize> },
    /// Appends a zero logit and applies a softmax: `R^(L-1)` onto the open
    /// `L`-simplex.
    SoftmaxCentered,
    /// Elementwise square root of [`Link::SoftmaxCentered`].
    SqrtSoftmaxCentered,
    /// Composition; `links[0]` is applied first in the forward direction.
    Chain { links: Vec<Link> },
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Link::Identity => write!(f, "Identity"),
            Link::Exp => write!(f, "Exp"),
            Link::Reshape { from, to } => write!(f, "Reshape({} -> {})", tuple(from), tuple(to)),
            Link::SoftmaxCentered => write!(f, "SoftmaxCentered"),
            Link::SqrtSoftmaxCentered => write!(f, "SqrtSoftmaxCentered"),
            Link::Chain { links } => {
                let parts: Vec<String> = links.iter().map(|l| l.to_string()).collect();
                write!(f, "Chain[{}]", parts.join(", "))
            }
        }
    }
}

fn tuple(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(|v| v.to_string()).collect();
    if parts.len() == 1 {
        format!("({},)", parts[0])
    } else {
        format!("({})", parts.join(", "))
    }
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

/// Sum over everything but the row axis.
fn row_sum<'t>(x: Var<'t>) -> Result<Var<'t>> {
    if x.shape().len() == 1 {
        return Ok(x);
    }
    x.sum_rows()
}

fn zeros_like_rows<'t>(x: Var<'t>) -> Var<'t> {
    x.tape().zeros(&[x.shape()[0]])
}

fn with_rows(rows: usize, event: &[usize]) -> Vec<usize> {
    let mut s = vec![rows];
    s.extend_from_slice(event);
    s
}

/// `log softmax` of `x` with an appended zero logit; `x` is `(R, L-1)`.
fn centered_log_softmax<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let r = x.shape()[0];
    let tape = x.tape();
    let ext = tape.concat(&[x, tape.zeros(&[r, 1])], 1)?;
    let lse = ext.logsumexp()?.reshape(&[r, 1])?;
    ext.sub(lse.expand(&ext.shape())?)
}

fn require_simplex_interior(y: Var<'_>, op: &'static str) -> Result<()> {
    if let Some(i) = y.value().data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::domain(op, i, "simplex point on the boundary"));
    }
    Ok(())
}

impl Link {
    /// Latent shape that maps onto `event`.
    pub fn latent_shape(&self, event: &[usize]) -> Result<Vec<usize>> {
        match self {
            Link::Identity | Link::Exp => Ok(event.to_vec()),
            Link::Reshape { from, to } => {
                if numel(from) != numel(to) {
                    return Err(Error::config(format!("reshape {from:?} -> {to:?} changes size")));
                }
                if event != to.as_slice() {
                    return Err(Error::config(format!(
                        "reshape link targets {to:?} but the event shape is {event:?}"
                    )));
                }
                Ok(from.clone())
            }
            Link::SoftmaxCentered | Link::SqrtSoftmaxCentered => match event {
                [l] if *l >= 2 => Ok(vec![l - 1]),
                _ => Err(Error::config(format!(
                    "simplex link needs a (L,) event with L >= 2, got {event:?}"
                ))),
            },
            Link::Chain { links } => {
                let mut s = event.to_vec();
                for l in links.iter().rev() {
                    s = l.latent_shape(&s)?;
                }
                Ok(s)
            }
        }
    }

    /// Event shape produced from `latent`.
    pub fn event_shape(&self, latent: &[usize]) -> Result<Vec<usize>> {
        match self {
            Link::Identity | Link::Exp => Ok(latent.to_vec()),
            Link::Reshape { from, to } => {
                if latent != from.as_slice() || numel(from) != numel(to) {
                    return Err(Error::config(format!(
                        "reshape link {from:?} -> {to:?} applied to {latent:?}"
                    )));
                }
                Ok(to.clone())
            }
            Link::SoftmaxCentered | Link::SqrtSoftmaxCentered => match latent {
                [k] => Ok(vec![k + 1]),
                _ => Err(Error::config("simplex link needs a flat latent")),
            },
            Link::Chain { links } => {
                let mut s = latent.to_vec();
                for l in links {
                    s = l.event_shape(&s)?;
                }
                Ok(s)
            }
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_and_log_det(x)?.0)
    }

    pub fn forward_log_det<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_and_log_det(x)?.1)
    }

    /// Image of `x` and `log |det J|` per row.
    pub fn forward_and_log_det<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::config("link input needs a row axis"));
        }
        let r = shape[0];
        match self {
            Link::Identity => Ok((x, zeros_like_rows(x))),
            Link::Exp => Ok((x.exp()?, row_sum(x)?)),
            Link::Reshape { to, .. } => {
                let y = x.reshape(&with_rows(r, to))?;
                Ok((y, zeros_like_rows(x)))
            }
            Link::SoftmaxCentered => {
                let logy = centered_log_softmax(x)?;
                let ldj = logy.sum_axis(1)?;
                Ok((logy.exp()?, ldj))
            }
            Link::SqrtSoftmaxCentered => {
                let logy = centered_log_softmax(x)?;
                let k = shape[1];
                let head = logy.slice(1, 0, k)?.sum_axis(1)?;
                // d sqrt(y_i)/d y_i on the k free coordinates
                let ldj = logy
                    .sum_axis(1)?
                    .sub(head.scale(0.5)?)?
                    .add_scalar(-(k as f64) * LN_2)?;
                Ok((logy.scale(0.5)?.exp()?, ldj))
            }
            Link::Chain { links } => {
                let mut y = x;
                let mut ldj = zeros_like_rows(x);
                for l in links {
                    let (ny, lj) = l.forward_and_log_det(y)?;
                    ldj = ldj.add(lj)?;
                    y = ny;
                }
                Ok((y, ldj))
            }
        }
    }

    pub fn inverse<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        Ok(self.inverse_and_log_det(y)?.0)
    }

    /// Preimage of `y` and the inverse log-determinant per row, which is the
    /// negated forward log-determinant at the preimage.
    pub fn inverse_and_log_det<'t>(&self, y: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = y.shape();
        if shape.is_empty() {
            return Err(Error::config("link input needs a row axis"));
        }
        let r = shape[0];
        match self {
            Link::Identity => Ok((y, zeros_like_rows(y))),
            Link::Exp => {
                if let Some(i) = y.value().data().iter().position(|v| !(*v > 0.0)) {
                    return Err(Error::domain("exp_inverse", i, "value must be positive"));
                }
                let x = y.log()?;
                Ok((x, row_sum(x)?.neg()?))
            }
            Link::Reshape { from, .. } => {
                let x = y.reshape(&with_rows(r, from))?;
                Ok((x, zeros_like_rows(y)))
            }
            Link::SoftmaxCentered => {
                require_simplex_interior(y, "softmax_centered_inverse")?;
                let l = shape[1];
                let logy = y.log()?;
                let last = logy.slice(1, l - 1, 1)?;
                let x = logy
                    .slice(1, 0, l - 1)?
                    .sub(last.expand(&[r, l - 1])?)?;
                Ok((x, logy.sum_axis(1)?.neg()?))
            }
            Link::SqrtSoftmaxCentered => {
                require_simplex_interior(y, "sqrt_softmax_centered_inverse")?;
                let x = Link::SoftmaxCentered.inverse(y.square()?)?;
                let (_, ldj) = self.forward_and_log_det(x)?;
                Ok((x, ldj.neg()?))
            }
            Link::Chain { links } => {
                let mut x = y;
                let mut ildj = zeros_like_rows(y);
                for l in links.iter().rev() {
                    let (nx, lj) = l.inverse_and_log_det(x)?;
                    ildj = ildj.add(lj)?;
                    x = nx;
                }
                Ok((x, ildj))
            }
        }
    }
}
