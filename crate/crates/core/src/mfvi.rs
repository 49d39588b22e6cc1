//! Non-amortized mean-field baseline.
//!
//! Every latent gets a factor of its prior's parametric form, fitted to a
//! single observation by stochastic gradient ascent on the Monte Carlo
//! ELBO. Normal factors share one softplus scale per variable, gamma
//! factors carry per-element concentrations and one rate, and Dirichlet
//! factors carry per-element concentrations. Positivity always comes from
//! a softplus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{gamma_rsample, Dist, DistKind};
use crate::error::{Error, Result};
use crate::ground::joint_log_prob;
use crate::optim::Adam;
use crate::oracle::mean_se;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{softplus_inv, Tape, Var};
use crate::template::{Descriptors, Template};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfviConfig {
    pub steps: usize,
    /// Draws per ELBO estimate during optimization.
    pub samples: usize,
    pub learning_rate: f64,
    /// Trailing fraction of steps whose iterates are averaged into the
    /// returned parameters.
    pub average_fraction: f64,
    /// Draws for the final ELBO estimate.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for MfviConfig {
    fn default() -> Self {
        MfviConfig {
            steps: 10_000,
            samples: 32,
            learning_rate: 1e-2,
            average_fraction: 0.2,
            eval_samples: 4096,
            seed: 0,
        }
    }
}

impl MfviConfig {
    pub fn check(&self) -> Result<()> {
        if self.steps == 0 || self.samples == 0 || self.eval_samples < 2 {
            return Err(Error::config("steps and sample sizes must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.average_fraction > 0.0 && self.average_fraction <= 1.0) {
            return Err(Error::config("learning rate must be positive and the averaged fraction in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Factor {
    Normal { loc: ParamId, scale: ParamId },
    Gamma { concentration: ParamId, rate: ParamId },
    Dirichlet { concentration: ParamId },
}

/// Product of one factor per latent variable.
#[derive(Clone, Debug)]
pub struct MfviFamily {
    pub template: Template,
    pub desc: Descriptors,
    pub store: ParamStore,
    factors: BTreeMap<String, Factor>,
}

impl MfviFamily {
    pub fn new(template: &Template) -> Result<Self> {
        let desc = template.validate()?;
        let mut store = ParamStore::new();
        let mut factors = BTreeMap::new();
        let g = ParamGroup::Mfvi;
        let one = softplus_inv(1.0);
        for rv in desc.latents() {
            let shape = desc.full_shape(rv);
            let kind = template
                .rv(rv)
                .ok_or_else(|| Error::config(format!("unknown random variable `{rv}`")))?
                .dist
                .kind;
            let factor = match kind {
                DistKind::Normal | DistKind::DiagNormal => Factor::Normal {
                    loc: store.add(format!("{rv}.loc"), g, Tensor::zeros(&shape)),
                    scale: store.add(format!("{rv}.scale"), g, Tensor::zeros(&[1])),
                },
                DistKind::Gamma => Factor::Gamma {
                    concentration: store.add(format!("{rv}.concentration"), g, Tensor::full(&shape, one)),
                    rate: store.add(format!("{rv}.rate"), g, Tensor::full(&[1], one)),
                },
                DistKind::Dirichlet => Factor::Dirichlet {
                    concentration: store.add(format!("{rv}.concentration"), g, Tensor::full(&shape, one)),
                },
                other => {
                    return Err(Error::config(format!(
                        "no mean-field factor for `{rv}` with a {other:?} prior"
                    )))
                }
            };
            factors.insert(rv.clone(), factor);
        }
        Ok(MfviFamily {
            template: template.clone(),
            desc,
            store,
            factors,
        })
    }

    /// `n` reparameterized draws per latent, shaped `(n, batch..., event...)`,
    /// and their joint `log q` of shape `(n,)`.
    pub fn sample<'t>(&self, p: &Bound<'t>, n: usize, rng: &mut Rng) -> Result<(BTreeMap<String, Var<'t>>, Var<'t>)> {
        let tape = p.tape();
        let mut values = BTreeMap::new();
        let mut log_q: Option<Var<'t>> = None;
        for (rv, factor) in &self.factors {
            let mut shape = vec![n];
            shape.extend(self.desc.full_shape(rv));
            let (value, dist) = match factor {
                Factor::Normal { loc, scale } => {
                    let loc = p.get(*loc).broadcast_to(&shape)?;
                    let scale = p.get(*scale).softplus()?.broadcast_to(&shape)?;
                    let eps = tape.constant(rng.normals(&shape));
                    (loc.add(scale.mul(eps)?)?, Dist::Normal { loc, scale })
                }
                Factor::Gamma { concentration, rate } => {
                    let a = p.get(*concentration).softplus()?.broadcast_to(&shape)?;
                    let r = p.get(*rate).softplus()?.broadcast_to(&shape)?;
                    let g = gamma_rsample(a, rng)?;
                    (
                        g.div(r)?,
                        Dist::Gamma {
                            concentration: a,
                            rate: r,
                        },
                    )
                }
                Factor::Dirichlet { concentration } => {
                    let a = p.get(*concentration).softplus()?.broadcast_to(&shape)?;
                    let g = gamma_rsample(a, rng)?;
                    let total = g.sum_axis(shape.len() - 1)?.unsqueeze(shape.len() - 1)?.expand(&shape)?;
                    (g.div(total)?, Dist::Dirichlet { concentration: a })
                }
            };
            let lq = dist.log_prob(value)?;
            let lq = if lq.shape().len() > 1 { lq.sum_rows()? } else { lq };
            log_q = Some(match log_q {
                Some(t) => t.add(lq)?,
                None => lq,
            });
            values.insert(rv.clone(), value);
        }
        let log_q = log_q.ok_or_else(|| Error::config("template has no latent variables"))?;
        Ok((values, log_q))
    }

    /// Per-draw `log p(x, theta) - log q(theta)`, shape `(n,)`.
    fn elbo_terms<'t>(&self, p: &Bound<'t>, x: &Tensor, n: usize, rng: &mut Rng) -> Result<Var<'t>> {
        let (mut values, log_q) = self.sample(p, n, rng)?;
        let mut one = vec![1];
        one.extend_from_slice(x.shape());
        let mut many = one.clone();
        many[0] = n;
        let xv = p.tape().constant(x.reshape(&one)?).expand(&many)?;
        values.insert(self.desc.observed.clone(), xv);
        joint_log_prob(&self.template, &self.desc, &values, n)?.sub(log_q)
    }

    /// ELBO estimate and its standard error from `n` draws.
    pub fn elbo(&self, x: &Tensor, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, |_| false);
        let terms = self.elbo_terms(&p, x, n, rng)?.value();
        Ok(mean_se(terms.data()))
    }

    /// Current variational parameters after their positivity transforms.
    pub fn summary(&self) -> BTreeMap<String, Tensor> {
        let softplus = |t: &Tensor| t.map(crate::tape::softplus);
        let mut out = BTreeMap::new();
        for (rv, f) in &self.factors {
            let get = |id: &ParamId| &self.store.get(*id).value;
            match f {
                Factor::Normal { loc, scale } => {
                    out.insert(format!("{rv}.loc"), get(loc).clone());
                    out.insert(format!("{rv}.scale"), softplus(get(scale)));
                }
                Factor::Gamma { concentration, rate } => {
                    out.insert(format!("{rv}.concentration"), softplus(get(concentration)));
                    out.insert(format!("{rv}.rate"), softplus(get(rate)));
                }
                Factor::Dirichlet { concentration } => {
                    out.insert(format!("{rv}.concentration"), softplus(get(concentration)));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MfviFit {
    pub family: MfviFamily,
    /// Per-step ELBO estimates; `None` marks a skipped step.
    pub trace: Vec<Option<f64>>,
    pub elbo: f64,
    pub elbo_se: f64,
    pub failed: bool,
}

/// Fits a fresh mean-field family to one observation `x`.
pub fn mfvi_fit(template: &Template, x: &Tensor, cfg: &MfviConfig) -> Result<MfviFit> {
    cfg.check()?;
    let mut family = MfviFamily::new(template)?;
    let want = family.desc.full_shape(&family.desc.observed);
    if x.shape() != want {
        return Err(Error::config(format!(
            "observation has shape {:?}, model expects {want:?}",
            x.shape()
        )));
    }
    let mut rng = Rng::with_stream(cfg.seed, crate::rng::streams::BASELINE);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    let tail_start = cfg.steps - ((cfg.steps as f64 * cfg.average_fraction).ceil() as usize).clamp(1, cfg.steps);
    let mut sums: Vec<Vec<f64>> = family.store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut averaged = 0usize;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = family.store.bind(&tape, |_| true);
        let outcome = family
            .elbo_terms(&p, x, cfg.samples, &mut rng)
            .and_then(|t| {
                let elbo = t.mean()?;
                let v = elbo.value().item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("ELBO evaluated to {v}")));
                }
                let g = tape.backward(elbo.neg()?)?;
                adam.step(&mut family.store, &p.grads(&g), |_| true)?;
                Ok(v)
            });
        match outcome {
            Ok(v) => trace.push(Some(v)),
            Err(e @ (Error::NanGradient { .. } | Error::NonFinite(_) | Error::Domain { .. })) => {
                log::warn!("mean-field step {step} skipped: {e}");
                trace.push(None);
            }
            Err(e) => return Err(e),
        }
        if step >= tail_start {
            for (s, prm) in sums.iter_mut().zip(family.store.params()) {
                for (a, v) in s.iter_mut().zip(prm.value.data()) {
                    *a += v;
                }
            }
            averaged += 1;
        }
    }
    for (i, s) in sums.into_iter().enumerate() {
        let shape = family.store.params()[i].value.shape().to_vec();
        let mean = s.into_iter().map(|v| v / averaged as f64).collect();
        family.store.set_value(i, Tensor::from_parts(shape, mean))?;
    }
    let skipped = trace.iter().filter(|t| t.is_none()).count();
    let (elbo, elbo_se) = family.elbo(x, cfg.eval_samples, &mut rng)?;
    Ok(MfviFit {
        family,
        trace,
        elbo,
        elbo_se,
        failed: 2 * skipped > cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground::prior_sample;
    use crate::oracle::{gre_analytic_posterior, gre_log_evidence, GreConstants};
    use crate::zoo;

    #[test]
    fn factors_follow_prior_forms() {
        let gm = MfviFamily::new(&zoo::gm()).unwrap();
        let s = gm.summary();
        assert_eq!(s["M^L,G.loc"].shape(), &[3, 3, 2]);
        assert_eq!(s["M^L,G.scale"].shape(), &[1]);
        assert_eq!(s["Pi^G.concentration"].shape(), &[3, 3]);
        let nc = MfviFamily::new(&zoo::nc()).unwrap();
        assert_eq!(nc.summary()["a.rate"].shape(), &[1]);
    }

    #[test]
    fn dirichlet_draws_are_on_the_simplex() {
        let fam = MfviFamily::new(&zoo::gm()).unwrap();
        let tape = Tape::new();
        let p = fam.store.bind(&tape, |_| false);
        let (values, lq) = fam.sample(&p, 5, &mut Rng::new(3)).unwrap();
        for row in values["Pi^G"].value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(lq.value().is_finite());
    }

    #[test]
    fn gre_fit_reaches_the_evidence() {
        let t = zoo::gre(3);
        let d = t.validate().unwrap();
        let x = prior_sample(&t, &d, &mut Rng::new(11)).unwrap().values["X"].clone();
        let cfg = MfviConfig {
            steps: 10000,
            ..MfviConfig::default()
        };
        let fit = mfvi_fit(&t, &x, &cfg).unwrap();
        let c = GreConstants::default();
        let evidence = gre_log_evidence(&x, c).unwrap();
        assert!(!fit.failed);
        assert!((fit.elbo - evidence).abs() < 0.5, "{} vs {evidence}", fit.elbo);
        let post = gre_analytic_posterior(&x, c).unwrap();
        let s = fit.family.summary();
        let sd = post.group_var.sqrt();
        for (m, a) in s["M^G.loc"].data().iter().zip(post.group_mean.data()) {
            assert!((m - a).abs() < 3.0 * sd, "{m} vs {a}");
        }
    }
}
