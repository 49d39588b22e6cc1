//! Ground truth for the Gaussian random effects model and Monte Carlo
//! divergence estimates.
//!
//! The group posteriors ignore the prior's pull, `N(mean_n x, s_x^2 / N)`,
//! and the population mean is then updated from the group means. The
//! evidence is exact: per dimension, `X` is jointly Gaussian with
//! covariance `s_x^2 I + s_g^2 (same group) + s_mu^2 (all ones)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::family::DualFamily;
use crate::ground::joint_log_prob;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::template::Template;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreConstants {
    pub sigma_mu: f64,
    pub sigma_g: f64,
    pub sigma_x: f64,
}

impl GreConstants {
    pub fn from_template(t: &Template) -> Result<Self> {
        let get = |k: &str| {
            t.constants
                .get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("template lacks constant `{k}`")))
        };
        Ok(GreConstants {
            sigma_mu: get("sigma_mu")?,
            sigma_g: get("sigma_g")?,
            sigma_x: get("sigma_x")?,
        })
    }
}

impl Default for GreConstants {
    fn default() -> Self {
        GreConstants {
            sigma_mu: 1.0,
            sigma_g: 0.2,
            sigma_x: 0.05,
        }
    }
}

pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (z * z + LN_2PI) - sd.ln()
}

/// Diagonal Gaussian posteriors for `mu` and every group mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GrePosterior {
    /// `(G, D)`.
    pub group_mean: Tensor,
    pub group_var: f64,
    /// `(D,)`.
    pub top_mean: Tensor,
    pub top_var: f64,
}

fn gre_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [g, n, d] if g > 0 && n > 0 && d > 0 => Ok((g, n, d)),
        _ => Err(Error::config(format!(
            "GRE observations must have shape (G, N, D), got {:?}",
            x.shape()
        ))),
    }
}

pub fn gre_analytic_posterior(x: &Tensor, c: GreConstants) -> Result<GrePosterior> {
    let (g, n, d) = gre_dims(x)?;
    let xs = x.data();
    let mut group_mean = vec![0.0; g * d];
    for gi in 0..g {
        for ni in 0..n {
            for di in 0..d {
                group_mean[gi * d + di] += xs[(gi * n + ni) * d + di] / n as f64;
            }
        }
    }
    let prec = 1.0 / c.sigma_mu.powi(2) + g as f64 / c.sigma_g.powi(2);
    let top_var = 1.0 / prec;
    let top_mean = (0..d)
        .map(|di| {
            let mean_of_means = (0..g).map(|gi| group_mean[gi * d + di]).sum::<f64>() / g as f64;
            g as f64 / c.sigma_g.powi(2) * mean_of_means * top_var
        })
        .collect();
    Ok(GrePosterior {
        group_mean: Tensor::from_parts(vec![g, d], group_mean),
        group_var: c.sigma_x.powi(2) / n as f64,
        top_mean: Tensor::from_parts(vec![d], top_mean),
        top_var,
    })
}

impl GrePosterior {
    /// `log p(mu, M^G | X)` under the analytic posterior.
    pub fn log_prob(&self, mu: &[f64], groups: &[f64]) -> f64 {
        let (ts, gs) = (self.top_var.sqrt(), self.group_var.sqrt());
        let top: f64 = mu
            .iter()
            .zip(self.top_mean.data())
            .map(|(v, m)| normal_log_pdf(*v, *m, ts))
            .sum();
        let grp: f64 = groups
            .iter()
            .zip(self.group_mean.data())
            .map(|(v, m)| normal_log_pdf(*v, *m, gs))
            .sum();
        top + grp
    }

    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let (ts, gs) = (self.top_var.sqrt(), self.group_var.sqrt());
        let mu = self.top_mean.data().iter().map(|m| m + ts * rng.normal()).collect();
        let groups = self.group_mean.data().iter().map(|m| m + gs * rng.normal()).collect();
        (mu, groups)
    }
}

/// Exact `log p(X)` for the GRE model.
pub fn gre_log_evidence(x: &Tensor, c: GreConstants) -> Result<f64> {
    let (g, n, d) = gre_dims(x)?;
    let m = g * n;
    let cov = DMatrix::from_fn(m, m, |i, j| {
        let mut v = c.sigma_mu.powi(2);
        if i / n == j / n {
            v += c.sigma_g.powi(2);
        }
        if i == j {
            v += c.sigma_x.powi(2);
        }
        v
    });
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::NonFinite("GRE marginal covariance is not positive definite".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let xs = x.data();
    let mut total = 0.0;
    for di in 0..d {
        let y = nalgebra::DVector::from_fn(m, |i, _| xs[i * d + di]);
        let quad = y.dot(&chol.solve(&y));
        total += -0.5 * (m as f64 * LN_2PI + log_det + quad);
    }
    Ok(total)
}

/// `KL(p || q)` between diagonal Gaussians given by means and variances.
pub fn gaussian_kl(mean_p: &[f64], var_p: &[f64], mean_q: &[f64], var_q: &[f64]) -> Result<f64> {
    let n = mean_p.len();
    if var_p.len() != n || mean_q.len() != n || var_q.len() != n {
        return Err(Error::config("gaussian_kl: mismatched dimensions"));
    }
    Ok((0..n)
        .map(|i| {
            let r = var_p[i] / var_q[i];
            0.5 * (r - 1.0 - r.ln() + (mean_p[i] - mean_q[i]).powi(2) / var_q[i])
        })
        .sum())
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo `KL(q(. | x) || analytic posterior)` for a GRE family, with
/// its standard error.
pub fn gre_kl_to_analytic(
    family: &DualFamily,
    x: &Tensor,
    c: GreConstants,
    draws: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let post = gre_analytic_posterior(x, c)?;
    let d = family.sample_posterior(x, draws, rng)?;
    let mu = d
        .values
        .get("mu")
        .ok_or_else(|| Error::config("family has no `mu` latent"))?;
    let groups = d
        .values
        .get("M^G")
        .ok_or_else(|| Error::config("family has no `M^G` latent"))?;
    let (pm, pg) = (mu.numel() / draws, groups.numel() / draws);
    let terms: Vec<f64> = (0..draws)
        .map(|i| {
            let lp = post.log_prob(&mu.data()[i * pm..(i + 1) * pm], &groups.data()[i * pg..(i + 1) * pg]);
            d.log_q[i] - lp
        })
        .collect();
    Ok(mean_se(&terms))
}

/// Monte Carlo ELBO `E_q[log p(x, theta) - log q(theta | x)]` for one
/// observation, with its standard error.
pub fn elbo_estimate(family: &DualFamily, x: &Tensor, draws: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let d = family.sample_posterior(x, draws, rng)?;
    let joint = log_joint_batch(&family.template, family, x, &d.values, draws)?;
    let terms: Vec<f64> = joint.iter().zip(&d.log_q).map(|(p, q)| p - q).collect();
    Ok(mean_se(&terms))
}

/// `log p(x, theta_k)` for `n` stacked parameter draws sharing one `x`.
pub fn log_joint_batch(
    template: &Template,
    family: &DualFamily,
    x: &Tensor,
    theta: &BTreeMap<String, Tensor>,
    n: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (k, v) in theta {
        vars.insert(k.clone(), tape.constant(v.clone()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let mut full = vec![n];
    full.extend_from_slice(x.shape());
    let xv = tape.constant(x.reshape(&shape)?).expand(&full)?;
    vars.insert(family.desc.observed.clone(), xv);
    Ok(joint_log_prob(template, &family.desc, &vars, n)?.value().into_vec())
}
