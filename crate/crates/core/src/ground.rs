//! Grounded templates: ancestral sampling and the joint log density.
//!
//! Every value carries a leading sample axis followed by its batch shape
//! (outermost plate first) and its event shape. Parent values are aligned
//! to a child by inserting the child's extra plate axes and repeating.

use std::collections::BTreeMap;

use crate::distributions::{Dist, DistKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::template::{Descriptors, ParamExpr, Template};
use crate::tensor::Tensor;

/// One draw of every template variable, without a sample axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundSample {
    pub values: BTreeMap<String, Tensor>,
}

impl GroundSample {
    pub fn observed<'a>(&'a self, desc: &Descriptors) -> &'a Tensor {
        &self.values[&desc.observed]
    }
}

struct Ctx<'a, 't> {
    template: &'a Template,
    desc: &'a Descriptors,
    tape: &'t Tape,
    values: &'a BTreeMap<String, Var<'t>>,
    n: usize,
}

impl<'t> Ctx<'_, 't> {
    fn eval(&self, expr: &ParamExpr, child: &str, kind: DistKind) -> Result<Var<'t>> {
        match expr {
            ParamExpr::Value(v) => Ok(self.tape.scalar(*v)),
            ParamExpr::Const(c) => Ok(self.tape.scalar(self.template.constants[c])),
            ParamExpr::Exp(e) => self.eval(e, child, kind)?.exp(),
            ParamExpr::Parent(p) => {
                let v = *self
                    .values
                    .get(p)
                    .ok_or_else(|| Error::config(format!("no value for `{p}`")))?;
                let ev_p = &self.desc.shape[p];
                let target = if kind == DistKind::Mixture {
                    ev_p.clone()
                } else {
                    self.desc.shape[child].clone()
                };
                self.align(v, p, child, &target)
            }
        }
    }

    /// Repeats parent `p` over the child's extra plates and event axes.
    fn align(&self, v: Var<'t>, p: &str, child: &str, event: &[usize]) -> Result<Var<'t>> {
        let bp = self.desc.rv_batch_shape(p);
        let bc = self.desc.rv_batch_shape(child);
        let ep = &self.desc.shape[p];
        if !bc.starts_with(&bp) || !event.ends_with(ep) {
            return Err(Error::config(format!(
                "parent `{p}` with batch {bp:?} and event {ep:?} cannot feed `{child}` (batch {bc:?}, event {event:?})"
            )));
        }
        let mut padded = vec![self.n];
        padded.extend_from_slice(&bp);
        padded.extend(std::iter::repeat_n(1, bc.len() - bp.len() + event.len() - ep.len()));
        padded.extend_from_slice(ep);
        let mut full = vec![self.n];
        full.extend_from_slice(&bc);
        full.extend_from_slice(event);
        v.reshape(&padded)?.expand(&full)
    }

    fn dist(&self, rv: &str) -> Result<Dist<Var<'t>>> {
        let spec = &self
            .template
            .rv(rv)
            .ok_or_else(|| Error::config(format!("unknown random variable `{rv}`")))?
            .dist;
        let params = spec
            .ordered()
            .into_iter()
            .map(|e| self.eval(e, rv, spec.kind))
            .collect::<Result<Vec<_>>>()?;
        Dist::from_kind(spec.kind, params)
    }
}

/// Ancestral sampling of every template variable.
pub fn prior_sample(template: &Template, desc: &Descriptors, rng: &mut Rng) -> Result<GroundSample> {
    let tape = Tape::new();
    let mut vars: BTreeMap<String, Var<'_>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for rv in &desc.rvs {
        let dist = {
            let ctx = Ctx {
                template,
                desc,
                tape: &tape,
                values: &vars,
                n: 1,
            };
            ctx.dist(rv)?
        };
        let dist: Dist<Tensor> = match dist {
            Dist::Normal { loc, scale } => Dist::Normal {
                loc: loc.value(),
                scale: scale.value(),
            },
            Dist::DiagNormal { loc, scale } => Dist::DiagNormal {
                loc: loc.value(),
                scale: scale.value(),
            },
            Dist::Gamma {
                concentration,
                rate,
            } => Dist::Gamma {
                concentration: concentration.value(),
                rate: rate.value(),
            },
            Dist::Laplace { loc, scale } => Dist::Laplace {
                loc: loc.value(),
                scale: scale.value(),
            },
            Dist::Dirichlet { concentration } => Dist::Dirichlet {
                concentration: concentration.value(),
            },
            Dist::Uniform { low, high } => Dist::Uniform {
                low: low.value(),
                high: high.value(),
            },
            Dist::Mixture {
                weights,
                locs,
                scale,
            } => Dist::Mixture {
                weights: weights.value(),
                locs: locs.value(),
                scale: scale.value(),
            },
        };
        let full = desc.full_shape(rv);
        let mut shape = vec![1];
        shape.extend_from_slice(&full);
        let draw = dist.sample(rng, &shape)?;
        vars.insert(rv.clone(), tape.constant(draw.clone()));
        out.insert(rv.clone(), draw.reshape(&full)?);
    }
    Ok(GroundSample { values: out })
}

/// `log p(X, theta)` for `n` joint configurations. Each value has shape
/// `(n, batch..., event...)`; the result has shape `(n,)`.
pub fn joint_log_prob<'t>(
    template: &Template,
    desc: &Descriptors,
    values: &BTreeMap<String, Var<'t>>,
    n: usize,
) -> Result<Var<'t>> {
    let tape = values
        .values()
        .next()
        .ok_or_else(|| Error::config("joint_log_prob needs values"))?
        .tape();
    let ctx = Ctx {
        template,
        desc,
        tape,
        values,
        n,
    };
    let mut total: Option<Var<'t>> = None;
    for rv in &desc.rvs {
        let x = *values
            .get(rv)
            .ok_or_else(|| Error::config(format!("no value for `{rv}`")))?;
        let mut want = vec![n];
        want.extend(desc.full_shape(rv));
        if x.shape() != want {
            return Err(Error::config(format!(
                "value for `{rv}` has shape {:?}, expected {want:?}",
                x.shape()
            )));
        }
        let lp = ctx.dist(rv)?.log_prob(x)?;
        let lp = if lp.shape().len() > 1 { lp.sum_rows()? } else { lp };
        total = Some(match total {
            Some(t) => t.add(lp)?,
            None => lp,
        });
    }
    total.ok_or_else(|| Error::config("template has no random variables"))
}

/// Convenience wrapper evaluating one ground sample off the tape.
pub fn joint_log_prob_value(template: &Template, desc: &Descriptors, sample: &GroundSample) -> Result<f64> {
    let tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (k, v) in &sample.values {
        let mut s = vec![1];
        s.extend_from_slice(v.shape());
        vars.insert(k.clone(), tape.constant(v.reshape(&s)?));
    }
    Ok(joint_log_prob(template, desc, &vars, 1)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn gre_shapes() {
        let t = zoo::gre(3);
        let d = t.validate().unwrap();
        let s = prior_sample(&t, &d, &mut Rng::new(0)).unwrap();
        assert_eq!(s.values["X"].shape(), &[3, 50, 2]);
        assert_eq!(s.values["M^G"].shape(), &[3, 2]);
        assert_eq!(s.values["mu"].shape(), &[2]);
    }

    #[test]
    fn gm_sample_is_finite_and_on_simplex() {
        let t = zoo::gm();
        let d = t.validate().unwrap();
        let s = prior_sample(&t, &d, &mut Rng::new(1)).unwrap();
        assert_eq!(s.values["X"].shape(), &[3, 50, 2]);
        for row in s.values["Pi^G"].data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(joint_log_prob_value(&t, &d, &s).unwrap().is_finite());
    }

    #[test]
    fn gre_all_zero_matches_closed_form() {
        let t = zoo::gre(3);
        let d = t.validate().unwrap();
        let mut values = BTreeMap::new();
        for rv in &d.rvs {
            values.insert(rv.clone(), Tensor::zeros(&d.full_shape(rv)));
        }
        let lp = joint_log_prob_value(&t, &d, &GroundSample { values }).unwrap();
        let log_n0 = |s: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln();
        let want = 2.0 * log_n0(1.0) + 6.0 * log_n0(0.2) + 300.0 * log_n0(0.05);
        assert!((lp - want).abs() < 1e-9, "{lp} vs {want}");
    }
}
