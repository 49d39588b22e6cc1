//! Log densities (on the tape) and samplers (on plain tensors) for the
//! distributions used by the model zoo and the variational baselines.
//!
//! Parameters broadcast against the value by the tape's trailing rule, so
//! callers align batch axes before building a [`Dist`]. Values outside the
//! support yield `-inf` rather than an error.

use std::f64::consts::PI;

use rand_distr::{Distribution as _, Gamma as GammaSampler};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Normal,
    DiagNormal,
    Gamma,
    Laplace,
    Dirichlet,
    Uniform,
    Mixture,
}

impl DistKind {
    /// Parameter names in the order [`Dist::from_kind`] expects them.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            DistKind::Normal | DistKind::DiagNormal | DistKind::Laplace => &["loc", "scale"],
            DistKind::Gamma => &["concentration", "rate"],
            DistKind::Dirichlet => &["concentration"],
            DistKind::Uniform => &["low", "high"],
            DistKind::Mixture => &["weights", "locs", "scale"],
        }
    }

    /// Number of trailing value axes that form one event.
    pub fn event_ndim(self) -> usize {
        match self {
            DistKind::Normal | DistKind::Gamma | DistKind::Laplace | DistKind::Uniform => 0,
            DistKind::DiagNormal | DistKind::Dirichlet | DistKind::Mixture => 1,
        }
    }
}

/// A distribution whose parameters are either tape variables (for log
/// densities) or tensors (for sampling).
#[derive(Clone, Debug)]
pub enum Dist<P> {
    Normal { loc: P, scale: P },
    /// Independent normals over the last axis, treated as one event.
    DiagNormal { loc: P, scale: P },
    Gamma { concentration: P, rate: P },
    Laplace { loc: P, scale: P },
    Dirichlet { concentration: P },
    Uniform { low: P, high: P },
    /// Finite mixture of diagonal normals: `weights` is `(..., L)`, `locs`
    /// is `(..., L, D)` and the value is `(..., D)`.
    Mixture { weights: P, locs: P, scale: P },
}

impl<P: Clone> Dist<P> {
    pub fn from_kind(kind: DistKind, params: Vec<P>) -> Result<Self> {
        let want = kind.param_names().len();
        if params.len() != want {
            return Err(Error::config(format!(
                "{kind:?} takes {want} parameters, got {}",
                params.len()
            )));
        }
        let p = |i: usize| params[i].clone();
        Ok(match kind {
            DistKind::Normal => Dist::Normal { loc: p(0), scale: p(1) },
            DistKind::DiagNormal => Dist::DiagNormal { loc: p(0), scale: p(1) },
            DistKind::Gamma => Dist::Gamma {
                concentration: p(0),
                rate: p(1),
            },
            DistKind::Laplace => Dist::Laplace { loc: p(0), scale: p(1) },
            DistKind::Dirichlet => Dist::Dirichlet { concentration: p(0) },
            DistKind::Uniform => Dist::Uniform { low: p(0), high: p(1) },
            DistKind::Mixture => Dist::Mixture {
                weights: p(0),
                locs: p(1),
                scale: p(2),
            },
        })
    }

    pub fn kind(&self) -> DistKind {
        match self {
            Dist::Normal { .. } => DistKind::Normal,
            Dist::DiagNormal { .. } => DistKind::DiagNormal,
            Dist::Gamma { .. } => DistKind::Gamma,
            Dist::Laplace { .. } => DistKind::Laplace,
            Dist::Dirichlet { .. } => DistKind::Dirichlet,
            Dist::Uniform { .. } => DistKind::Uniform,
            Dist::Mixture { .. } => DistKind::Mixture,
        }
    }
}

fn check_positive(name: &str, t: &Tensor) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::config(format!(
            "{name} must be strictly positive, got {} at index {i}",
            t.data()[i]
        )));
    }
    Ok(())
}

fn check_simplex(t: &Tensor) -> Result<()> {
    let l = *t.shape().last().unwrap_or(&1);
    for (r, row) in t.data().chunks(l.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mixture weights row {r} is not on the simplex (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Replaces `x` where `ok` is false by `safe`, returning the substituted
/// variable and a `0 / -inf` penalty to add after evaluation.
fn guard<'t>(x: Var<'t>, ok: &[bool], safe: f64) -> Result<(Var<'t>, Option<Tensor>)> {
    if ok.iter().all(|&b| b) {
        return Ok((x, None));
    }
    let shape = x.shape();
    let tape = x.tape();
    let mask: Vec<f64> = ok.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let fill: Vec<f64> = ok.iter().map(|&b| if b { 0.0 } else { safe }).collect();
    let penalty: Vec<f64> = ok
        .iter()
        .map(|&b| if b { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let xs = x
        .mul(tape.constant(Tensor::from_parts(shape.clone(), mask)))?
        .add(tape.constant(Tensor::from_parts(shape.clone(), fill)))?;
    Ok((xs, Some(Tensor::from_parts(shape, penalty))))
}

fn add_penalty<'t>(lp: Var<'t>, penalty: Option<Tensor>) -> Result<Var<'t>> {
    match penalty {
        Some(p) => lp.add(lp.tape().constant(p)),
        None => Ok(lp),
    }
}

/// Elementwise normal log density.
pub(crate) fn normal_log_pdf<'t>(x: Var<'t>, loc: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    let z = x.sub(loc)?.div(scale)?;
    z.square()?
        .scale(-0.5)?
        .sub(scale.log()?)?
        .add_scalar(-HALF_LN_2PI)
}

impl<'t> Dist<Var<'t>> {
    /// Log density per event of `x`.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Dist::Normal { loc, scale } => {
                check_positive("normal scale", &scale.value())?;
                normal_log_pdf(x, *loc, *scale)
            }
            Dist::DiagNormal { loc, scale } => {
                check_positive("normal scale", &scale.value())?;
                normal_log_pdf(x, *loc, *scale)?.sum_last()
            }
            Dist::Laplace { loc, scale } => {
                check_positive("laplace scale", &scale.value())?;
                x.sub(*loc)?
                    .abs()?
                    .div(*scale)?
                    .neg()?
                    .sub(scale.scale(2.0)?.log()?)
            }
            Dist::Gamma {
                concentration,
                rate,
            } => {
                check_positive("gamma concentration", &concentration.value())?;
                check_positive("gamma rate", &rate.value())?;
                let ok: Vec<bool> = x.value().data().iter().map(|v| *v > 0.0).collect();
                let (xs, penalty) = guard(x, &ok, 1.0)?;
                let a = *concentration;
                let norm = a.mul(rate.log()?)?.sub(a.lgamma()?)?;
                let lp = a
                    .add_scalar(-1.0)?
                    .mul(xs.log()?)?
                    .sub(rate.mul(xs)?)?
                    .add(norm)?;
                add_penalty(lp, penalty)
            }
            Dist::Uniform { low, high } => {
                let (lo, hi) = (low.value(), high.value());
                let width = high.sub(*low)?;
                check_positive("uniform width", &width.value())?;
                let xv = x.value();
                let ok: Vec<f64> = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let l = lo.data()[i % lo.numel()];
                        let h = hi.data()[i % hi.numel()];
                        if *v >= l && *v <= h {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let tape = x.tape();
                let support = tape.constant(Tensor::from_parts(xv.shape().to_vec(), ok));
                width.log()?.neg()?.add(support)
            }
            Dist::Dirichlet { concentration } => {
                check_positive("dirichlet concentration", &concentration.value())?;
                let shape = x.shape();
                let l = *shape
                    .last()
                    .ok_or_else(|| Error::config("dirichlet value needs an event axis"))?;
                let alpha = concentration.broadcast_to(&shape)?;
                let xv = x.value();
                let mut ok = vec![true; xv.numel()];
                let mut row_ok = Vec::with_capacity(xv.numel() / l.max(1));
                for (r, row) in xv.data().chunks(l.max(1)).enumerate() {
                    let s: f64 = row.iter().sum();
                    let good = row.iter().all(|v| *v > 0.0) && (s - 1.0).abs() <= 1e-6;
                    row_ok.push(good);
                    if !good {
                        ok[r * l..(r + 1) * l].iter_mut().for_each(|b| *b = false);
                    }
                }
                let (xs, _) = guard(x, &ok, 1.0 / l as f64)?;
                let norm = alpha
                    .sum_last()?
                    .lgamma()?
                    .sub(alpha.lgamma()?.sum_last()?)?;
                let lp = alpha
                    .add_scalar(-1.0)?
                    .mul(xs.log()?)?
                    .sum_last()?
                    .add(norm)?;
                let penalty = if row_ok.iter().all(|&b| b) {
                    None
                } else {
                    let p = row_ok
                        .iter()
                        .map(|&b| if b { 0.0 } else { f64::NEG_INFINITY })
                        .collect();
                    Some(Tensor::from_parts(lp.shape(), p))
                };
                add_penalty(lp, penalty)
            }
            Dist::Mixture {
                weights,
                locs,
                scale,
            } => {
                let wv = weights.value();
                check_simplex(&wv)?;
                check_positive("mixture scale", &scale.value())?;
                mixture_log_prob(x, *weights, *locs, *scale)
            }
        }
    }
}

/// `log sum_l w_l N(x; locs_l, scale)` with diagonal normal components,
/// evaluated through log-sum-exp.
pub fn mixture_log_prob<'t>(
    x: Var<'t>,
    weights: Var<'t>,
    locs: Var<'t>,
    scale: Var<'t>,
) -> Result<Var<'t>> {
    let ls = locs.shape();
    if ls.len() < 2 {
        return Err(Error::config("mixture locs need (..., L, D) shape"));
    }
    let xs = x.shape();
    let nd = xs.len();
    if nd == 0 || xs[nd - 1] != ls[ls.len() - 1] {
        return Err(Error::config(format!(
            "mixture value {xs:?} does not match component locs {ls:?}"
        )));
    }
    let mut full = xs[..nd - 1].to_vec();
    full.push(ls[ls.len() - 2]);
    full.push(ls[ls.len() - 1]);
    let locs = locs.broadcast_to(&full)?;
    let xe = x.unsqueeze(nd - 1)?.expand(&full)?;
    let comp = normal_log_pdf(xe, locs, scale)?.sum_last()?;
    let wshape = comp.shape();
    let weights = weights.broadcast_to(&wshape)?;
    let ok: Vec<bool> = weights.value().data().iter().map(|w| *w > 0.0).collect();
    let (ws, penalty) = guard(weights, &ok, 1.0)?;
    let logw = add_penalty(ws.log()?, penalty)?;
    comp.add(logw)?.logsumexp()
}

/// Standard gamma draws `Gamma(alpha, 1)` shaped like `alpha`, with
/// gradients to `alpha` by implicit differentiation of the CDF.
pub fn gamma_rsample<'t>(alpha: Var<'t>, rng: &mut Rng) -> Result<Var<'t>> {
    let a = alpha.value();
    check_positive("gamma concentration", &a)?;
    let mut out = Vec::with_capacity(a.numel());
    let mut dgda = Vec::with_capacity(a.numel());
    for &ai in a.data() {
        let g = standard_gamma(ai, rng).max(f64::MIN_POSITIVE);
        out.push(g);
        dgda.push(gamma_sample_derivative(ai, g));
    }
    alpha
        .tape()
        .reparam(alpha, Tensor::from_parts(a.shape().to_vec(), out), dgda)
}

/// d sample / d alpha for a standard gamma sample `g`, holding the CDF
/// level fixed.
fn gamma_sample_derivative(alpha: f64, g: f64) -> f64 {
    use statrs::function::gamma::{gamma_lr, ln_gamma};
    let h = 1e-5 * alpha.max(1.0);
    let lo = (alpha - h).max(alpha * 0.5);
    let dcdf = (gamma_lr(alpha + h, g) - gamma_lr(lo, g)) / (alpha + h - lo);
    let log_pdf = (alpha - 1.0) * g.ln() - g - ln_gamma(alpha);
    let pdf = log_pdf.exp();
    if pdf <= 0.0 || !pdf.is_finite() {
        return 0.0;
    }
    -dcdf / pdf
}

fn standard_gamma(alpha: f64, rng: &mut Rng) -> f64 {
    GammaSampler::new(alpha, 1.0)
        .expect("concentration checked positive")
        .sample(rng)
}

impl Dist<Tensor> {
    /// Shape of one draw when no sample axis is requested.
    pub fn natural_shape(&self) -> Vec<usize> {
        let longest = |ts: &[&Tensor]| {
            ts.iter()
                .map(|t| t.shape().to_vec())
                .max_by_key(|s| s.len())
                .unwrap_or_default()
        };
        match self {
            Dist::Normal { loc, scale }
            | Dist::DiagNormal { loc, scale }
            | Dist::Laplace { loc, scale } => longest(&[loc, scale]),
            Dist::Gamma {
                concentration,
                rate,
            } => longest(&[concentration, rate]),
            Dist::Uniform { low, high } => longest(&[low, high]),
            Dist::Dirichlet { concentration } => concentration.shape().to_vec(),
            Dist::Mixture { locs, .. } => {
                let mut s = locs.shape().to_vec();
                s.remove(s.len() - 2);
                s
            }
        }
    }

    /// `n` independent draws stacked on a new leading axis.
    pub fn sample_n(&self, rng: &mut Rng, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let mut shape = vec![n];
        shape.extend(self.natural_shape());
        self.sample(rng, &shape)
    }

    /// Draws a tensor of exactly `shape`; parameters broadcast by the
    /// trailing rule.
    pub fn sample(&self, rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let fits = |t: &Tensor| t.numel() == 1 || shape.ends_with(t.shape());
        let at = |t: &Tensor, i: usize| t.data()[i % t.numel()];
        let elementwise = |a: &Tensor, b: &Tensor| -> Result<()> {
            if !fits(a) || !fits(b) {
                return Err(Error::config(format!(
                    "parameters {:?} / {:?} do not broadcast to {shape:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(())
        };
        let data: Vec<f64> = match self {
            Dist::Normal { loc, scale } | Dist::DiagNormal { loc, scale } => {
                elementwise(loc, scale)?;
                check_positive("normal scale", scale)?;
                (0..n)
                    .map(|i| at(loc, i) + at(scale, i) * rng.normal())
                    .collect()
            }
            Dist::Laplace { loc, scale } => {
                elementwise(loc, scale)?;
                check_positive("laplace scale", scale)?;
                (0..n)
                    .map(|i| {
                        let u = rng.open_uniform() - 0.5;
                        at(loc, i) - at(scale, i) * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                    })
                    .collect()
            }
            Dist::Gamma {
                concentration,
                rate,
            } => {
                elementwise(concentration, rate)?;
                check_positive("gamma concentration", concentration)?;
                check_positive("gamma rate", rate)?;
                (0..n)
                    .map(|i| standard_gamma(at(concentration, i), rng) / at(rate, i))
                    .collect()
            }
            Dist::Uniform { low, high } => {
                elementwise(low, high)?;
                (0..n)
                    .map(|i| {
                        let (l, h) = (at(low, i), at(high, i));
                        l + (h - l) * rng.uniform()
                    })
                    .collect()
            }
            Dist::Dirichlet { concentration } => {
                check_positive("dirichlet concentration", concentration)?;
                if !fits(concentration) || shape.is_empty() {
                    return Err(Error::config(format!(
                        "dirichlet concentration {:?} does not fit {shape:?}",
                        concentration.shape()
                    )));
                }
                let l = shape[shape.len() - 1];
                let mut out: Vec<f64> = (0..n)
                    .map(|i| standard_gamma(at(concentration, i), rng))
                    .collect();
                for row in out.chunks_mut(l.max(1)) {
                    let s: f64 = row.iter().sum();
                    if s > 0.0 {
                        row.iter_mut().for_each(|v| *v /= s);
                    } else {
                        let k = rng.below(row.len());
                        row.iter_mut().enumerate().for_each(|(j, v)| *v = (j == k) as u8 as f64);
                    }
                }
                out
            }
            Dist::Mixture {
                weights,
                locs,
                scale,
            } => {
                check_simplex(weights)?;
                check_positive("mixture scale", scale)?;
                let ls = locs.shape();
                if ls.len() < 2 || shape.is_empty() || ls[ls.len() - 1] != shape[shape.len() - 1] {
                    return Err(Error::config(format!(
                        "mixture locs {ls:?} do not fit {shape:?}"
                    )));
                }
                let d = ls[ls.len() - 1];
                let l = ls[ls.len() - 2];
                if *weights.shape().last().unwrap_or(&0) != l {
                    return Err(Error::config("mixture weights and locs disagree on L"));
                }
                let w_rows = weights.numel() / l;
                let loc_rows = locs.numel() / (l * d);
                let mut out = Vec::with_capacity(n);
                for r in 0..n / d.max(1) {
                    let w = &weights.data()[(r % w_rows) * l..(r % w_rows + 1) * l];
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut k = l - 1;
                    for (j, wj) in w.iter().enumerate() {
                        acc += wj;
                        if u < acc {
                            k = j;
                            break;
                        }
                    }
                    // skip zero-weight components that rounding could land on
                    while w[k] == 0.0 {
                        k = (k + l - 1) % l;
                    }
                    let base = (r % loc_rows) * l * d + k * d;
                    for j in 0..d {
                        let s = scale.data()[(base + j) % scale.numel()];
                        out.push(locs.data()[base + j] + s * rng.normal());
                    }
                }
                out
            }
        };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }
}

/// Differential entropy of a scalar normal.
pub fn normal_entropy(scale: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * scale * scale).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use statrs::function::gamma::ln_gamma;

    fn lp(dist: &Dist<Tensor>, x: Tensor) -> Tensor {
        let tape = Tape::new();
        let d = match dist {
            Dist::Normal { loc, scale } => Dist::Normal {
                loc: tape.constant(loc.clone()),
                scale: tape.constant(scale.clone()),
            },
            Dist::Laplace { loc, scale } => Dist::Laplace {
                loc: tape.constant(loc.clone()),
                scale: tape.constant(scale.clone()),
            },
            Dist::Dirichlet { concentration } => Dist::Dirichlet {
                concentration: tape.constant(concentration.clone()),
            },
            Dist::Gamma {
                concentration,
                rate,
            } => Dist::Gamma {
                concentration: tape.constant(concentration.clone()),
                rate: tape.constant(rate.clone()),
            },
            Dist::Mixture {
                weights,
                locs,
                scale,
            } => Dist::Mixture {
                weights: tape.constant(weights.clone()),
                locs: tape.constant(locs.clone()),
                scale: tape.constant(scale.clone()),
            },
            _ => unreachable!(),
        };
        d.log_prob(tape.constant(x)).unwrap().value()
    }

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn normal_at_mean() {
        let d = Dist::Normal { loc: s(0.0), scale: s(1.0) };
        let v = lp(&d, Tensor::from_vec(vec![0.0])).item();
        assert!((v + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn laplace_at_loc() {
        let d = Dist::Laplace { loc: s(0.0), scale: s(0.3) };
        let v = lp(&d, Tensor::from_vec(vec![0.0])).item();
        assert!((v - 0.510_825_6).abs() < 1e-7);
    }

    #[test]
    fn dirichlet_at_centre() {
        let d = Dist::Dirichlet {
            concentration: Tensor::from_vec(vec![2.0, 2.0, 2.0]),
        };
        let x = Tensor::from_vec(vec![1.0 / 3.0; 3]);
        let want = ln_gamma(6.0) - 3.0 * ln_gamma(2.0) + 3.0 * (1.0f64 / 3.0).ln();
        assert!((lp(&d, x).item() - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_is_negative_infinity() {
        let g = Dist::Gamma {
            concentration: s(2.0),
            rate: s(1.0),
        };
        let v = lp(&g, Tensor::from_vec(vec![1.0, -1.0]));
        assert!(v.data()[0].is_finite());
        assert_eq!(v.data()[1], f64::NEG_INFINITY);
        let d = Dist::Dirichlet { concentration: s(1.0) };
        let v = lp(&d, Tensor::from_vec(vec![0.5, 0.6, 0.1]));
        assert_eq!(v.item(), f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let d = Dist::Normal { loc: s(0.0), scale: s(0.0) };
        let mut rng = Rng::new(0);
        assert!(matches!(d.sample_n(&mut rng, 3), Err(Error::Config(_))));
    }

    #[test]
    fn far_mixture_component_is_negligible() {
        let d = Dist::Mixture {
            weights: Tensor::from_vec(vec![0.5, 0.5]),
            locs: Tensor::new(vec![2, 1], vec![-10.0, 10.0]).unwrap(),
            scale: s(1.0),
        };
        let v = lp(&d, Tensor::from_vec(vec![10.0])).item();
        assert!((v - (0.5f64.ln() - HALF_LN_2PI)).abs() < 1e-8);
    }

    #[test]
    fn mixture_matches_naive_sum() {
        let d = Dist::Mixture {
            weights: Tensor::from_vec(vec![0.3, 0.7]),
            locs: Tensor::new(vec![2, 1], vec![-0.5, 1.2]).unwrap(),
            scale: s(0.8),
        };
        let x = 0.4;
        let pdf = |m: f64| (-(x - m) * (x - m) / (2.0 * 0.64)).exp() / (0.8 * (2.0 * PI).sqrt());
        let want = (0.3 * pdf(-0.5) + 0.7 * pdf(1.2)).ln();
        let got = lp(&d, Tensor::from_vec(vec![x])).item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mixture_with_one_hot_weights_samples_component_zero() {
        let d = Dist::Mixture {
            weights: Tensor::from_vec(vec![1.0, 0.0, 0.0]),
            locs: Tensor::new(vec![3, 1], vec![0.0, 100.0, -100.0]).unwrap(),
            scale: s(1.0),
        };
        let x = d.sample_n(&mut Rng::new(3), 500).unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn gamma_sample_mean() {
        let d = Dist::Gamma {
            concentration: s(1.0),
            rate: s(0.5),
        };
        let n = 100_000;
        let x = d.sample_n(&mut Rng::new(11), n).unwrap();
        let mean = x.sum() / n as f64;
        // variance of Gamma(1, 0.5) is 4
        let se = (4.0 / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn normal_self_entropy() {
        let d = Dist::Normal { loc: s(0.3), scale: s(1.7) };
        let x = d.sample_n(&mut Rng::new(5), 100_000).unwrap();
        let avg = lp(&d, x).sum() / 100_000.0;
        let h = normal_entropy(1.7);
        assert!(((-avg) - h).abs() < 0.05 * h);
    }

    #[test]
    fn gamma_reparam_derivative_matches_quantile_shift() {
        // hold the uniform level fixed and move alpha: g(alpha) = F^{-1}(u; alpha)
        use statrs::distribution::{ContinuousCDF, Gamma};
        let (alpha, u) = (2.3, 0.37);
        let q = |a: f64| Gamma::new(a, 1.0).unwrap().inverse_cdf(u);
        let h = 1e-5;
        let fd = (q(alpha + h) - q(alpha - h)) / (2.0 * h);
        let got = gamma_sample_derivative(alpha, q(alpha));
        assert!((got - fd).abs() < 1e-5 * fd.abs().max(1.0), "{got} vs {fd}");
    }
}
