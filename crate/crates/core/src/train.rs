//! Simulation-based training of a [`DualFamily`].
//!
//! Training runs an ordered list of stages. Each stage fixes a loss, an
//! epoch count and the parameter groups allowed to move; optimizer state
//! restarts at every stage boundary. Steps whose loss or gradient is not
//! finite are skipped and logged, and a run that skips more than half its
//! steps is reported as failed.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::DualFamily;
use crate::ground::{joint_log_prob, prior_sample};
use crate::optim::Adam;
use crate::params::{Bound, ParamGroup};
use crate::oracle::{elbo_estimate, mean_se};
use crate::rng::{streams, Rng, RngPosition};
use crate::tape::{Tape, Var};
use crate::template::{Descriptors, Template};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-log p(X, theta_hat)` at the deterministic shift-only point.
    Map,
    /// `-log p(X, theta)` with `theta ~ q`.
    UnregularizedElbo,
    /// `log q(theta | X) - log p(X, theta)` with `theta ~ q`.
    ReverseKl,
    /// `-log q(theta | X)` at the simulated parameters.
    ForwardKl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Map => "map",
            LossKind::UnregularizedElbo => "unregularized_elbo",
            LossKind::ReverseKl => "reverse_kl",
            LossKind::ForwardKl => "forward_kl",
        }
    }

    /// Groups trained when a stage does not list its own.
    pub fn default_trainable(self) -> Vec<ParamGroup> {
        match self {
            LossKind::Map => vec![ParamGroup::Encoder, ParamGroup::AffineShift],
            _ => vec![
                ParamGroup::Encoder,
                ParamGroup::AffineShift,
                ParamGroup::AffineScale,
                ParamGroup::Maf,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub loss: LossKind,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<Vec<ParamGroup>>,
}

impl Stage {
    pub fn new(loss: LossKind, epochs: usize) -> Self {
        Stage {
            loss,
            epochs,
            trainable: None,
        }
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.trainable
            .clone()
            .unwrap_or_else(|| self.loss.default_trainable())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_size: usize,
    pub minibatch: usize,
    /// Posterior draws per observation.
    pub theta_draws: usize,
    pub learning_rate: f64,
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.dataset_size == 0 || self.minibatch == 0 || self.theta_draws == 0 {
            return Err(Error::config("dataset size, minibatch and draws must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    /// Samples drawn per optimizer step: minibatch times draws per example.
    pub fn effective_batch(&self) -> usize {
        self.minibatch * self.theta_draws
    }

    pub fn needs_theta(&self) -> bool {
        self.stages.iter().any(|s| s.loss == LossKind::ForwardKl && s.epochs > 0)
    }
}

/// Simulated observations, optionally with the parameters that produced
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(M, B_0..., event...)`.
    pub x: Tensor,
    /// Per latent: `(M, batch..., event...)`.
    pub theta: Option<BTreeMap<String, Tensor>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> Result<Tensor> {
        self.x.row(i)
    }

    pub fn theta_example(&self, i: usize) -> Result<Option<BTreeMap<String, Tensor>>> {
        self.theta
            .as_ref()
            .map(|t| {
                t.iter()
                    .map(|(k, v)| Ok((k.clone(), v.row(i)?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .transpose()
    }

    fn rows(&self, idx: &[usize]) -> Result<(Tensor, Option<BTreeMap<String, Tensor>>)> {
        let x = self.x.gather_rows(idx)?;
        let theta = self
            .theta
            .as_ref()
            .map(|t| {
                t.iter()
                    .map(|(k, v)| Ok((k.clone(), v.gather_rows(idx)?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .transpose()?;
        Ok((x, theta))
    }
}

/// `m` independent prior-predictive draws.
pub fn simulate_dataset(
    template: &Template,
    desc: &Descriptors,
    m: usize,
    keep_theta: bool,
    rng: &mut Rng,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::config("cannot simulate an empty dataset"));
    }
    let mut xs = Vec::with_capacity(m);
    let mut thetas: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for _ in 0..m {
        let s = prior_sample(template, desc, rng)?;
        for (k, v) in s.values {
            if k == desc.observed {
                xs.push(v);
            } else if keep_theta {
                thetas.entry(k).or_default().push(v);
            }
        }
    }
    let theta = keep_theta
        .then(|| {
            thetas
                .into_iter()
                .map(|(k, v)| Ok((k, Tensor::stack(&v)?)))
                .collect::<Result<BTreeMap<_, _>>>()
        })
        .transpose()?;
    Ok(Dataset {
        x: Tensor::stack(&xs)?,
        theta,
    })
}

/// Repeats every observation `k` times along the leading axis.
fn repeat_rows<'t>(x: Var<'t>, k: usize) -> Result<Var<'t>> {
    if k == 1 {
        return Ok(x);
    }
    let s = x.shape();
    let mut one = vec![s[0], 1];
    one.extend_from_slice(&s[1..]);
    let mut many = one.clone();
    many[1] = k;
    let mut flat = vec![s[0] * k];
    flat.extend_from_slice(&s[1..]);
    x.reshape(&one)?.expand(&many)?.reshape(&flat)
}

/// `log q(theta | X)` and `log p(X, theta)` for `k` draws per example,
/// both of shape `(B * K,)`.
pub fn elbo_terms<'t>(
    family: &DualFamily,
    p: &Bound<'t>,
    x: Var<'t>,
    k: usize,
    rng: &mut Rng,
) -> Result<(Var<'t>, Var<'t>)> {
    let b = x.shape()[0];
    let draws = family.sample(p, x, k, rng)?;
    let mut values = draws.values;
    values.insert(family.desc.observed.clone(), repeat_rows(x, k)?);
    let joint = joint_log_prob(&family.template, &family.desc, &values, b * k)?;
    Ok((draws.log_q, joint))
}

fn finite(loss: Var<'_>, what: &str) -> Result<()> {
    let v = loss.value().item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss evaluated to {v}")));
    }
    Ok(())
}

pub fn reverse_kl_loss<'t>(family: &DualFamily, p: &Bound<'t>, x: Var<'t>, k: usize, rng: &mut Rng) -> Result<Var<'t>> {
    let (lq, lp) = elbo_terms(family, p, x, k, rng)?;
    let loss = lq.sub(lp)?.mean()?;
    finite(loss, "reverse KL")?;
    Ok(loss)
}

pub fn unregularized_elbo_loss<'t>(
    family: &DualFamily,
    p: &Bound<'t>,
    x: Var<'t>,
    k: usize,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let (_, lp) = elbo_terms(family, p, x, k, rng)?;
    let loss = lp.mean()?.neg()?;
    finite(loss, "unregularized ELBO")?;
    Ok(loss)
}

pub fn forward_kl_loss<'t>(
    family: &DualFamily,
    p: &Bound<'t>,
    x: Var<'t>,
    theta: &BTreeMap<String, Var<'t>>,
) -> Result<Var<'t>> {
    let loss = family.log_prob(p, x, theta)?.mean()?.neg()?;
    finite(loss, "forward KL")?;
    Ok(loss)
}

pub fn map_loss<'t>(family: &DualFamily, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let b = x.shape()[0];
    let mut values = family.map_point(p, x)?;
    values.insert(family.desc.observed.clone(), x);
    let loss = joint_log_prob(&family.template, &family.desc, &values, b)?
        .mean()?
        .neg()?;
    finite(loss, "MAP")?;
    Ok(loss)
}

/// One record per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub loss_kind: LossKind,
    pub epoch: usize,
    /// `None` for a skipped step.
    pub loss: Option<f64>,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
}

/// Held-out ELBO measured at the end of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: usize,
    pub step: usize,
    pub elbo: f64,
    /// Standard error across examples.
    pub elbo_se: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// More than half of the steps were skipped.
    pub failed: bool,
    pub wall_s: f64,
}

impl Metrics {
    pub fn skipped(&self) -> usize {
        self.records.iter().filter(|r| r.skipped.is_some()).count()
    }

    /// Losses of one stage, skipped steps removed.
    pub fn stage_losses(&self, stage: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .filter_map(|r| r.loss)
            .collect()
    }
}

/// Hooks called during [`train`].
pub trait Observer {
    fn step(&mut self, _record: &StepRecord) {}
    fn eval(&mut self, _record: &EvalRecord) {}
    /// Called after every stage with the training stream's position.
    fn stage_end(&mut self, _stage: usize, _family: &DualFamily, _rng: RngPosition) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Errors that skip a step rather than stop the run.
fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::NanGradient { .. } | Error::NonFinite(_) | Error::Domain { .. }
    )
}

fn step_loss<'t>(
    family: &DualFamily,
    p: &Bound<'t>,
    tape: &'t Tape,
    loss: LossKind,
    x: Tensor,
    theta: Option<BTreeMap<String, Tensor>>,
    k: usize,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let xv = tape.constant(x);
    match loss {
        LossKind::Map => map_loss(family, p, xv),
        LossKind::UnregularizedElbo => unregularized_elbo_loss(family, p, xv, k, rng),
        LossKind::ReverseKl => reverse_kl_loss(family, p, xv, k, rng),
        LossKind::ForwardKl => {
            let theta = theta.ok_or_else(|| Error::config("forward KL needs simulated parameters"))?;
            let vars = theta.into_iter().map(|(k, v)| (k, tape.constant(v))).collect();
            forward_kl_loss(family, p, xv, &vars)
        }
    }
}

/// Runs every stage of `cfg` on `data`, updating `family` in place.
pub fn train(
    family: &mut DualFamily,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<Metrics> {
    train_with_validation(family, data, None, cfg, observer)
}

/// Mean ELBO over the examples of `data`, `k` draws each.
pub fn mean_elbo(family: &DualFamily, data: &Dataset, k: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let elbos = (0..data.len())
        .map(|i| Ok(elbo_estimate(family, &data.example(i)?, k, rng)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_se(&elbos))
}

/// [`train`], additionally estimating the ELBO on `validation` after every
/// stage.
pub fn train_with_validation(
    family: &mut DualFamily,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<Metrics> {
    cfg.check()?;
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    if cfg.needs_theta() && data.theta.is_none() {
        return Err(Error::config("forward KL stage needs a dataset with parameters"));
    }
    let mut rng = Rng::with_stream(cfg.seed, streams::TRAIN);
    let start = Instant::now();
    let mut metrics = Metrics::default();
    let mut step = 0;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let groups = stage.trainable_groups();
        let trainable = |g: ParamGroup| groups.contains(&g);
        let mut adam = Adam::new(cfg.learning_rate);
        for epoch in 0..stage.epochs {
            let perm = rng.permutation(data.len());
            for chunk in perm.chunks(cfg.minibatch) {
                let (x, theta) = data.rows(chunk)?;
                let tape = Tape::new();
                let p = family.store.bind(&tape, trainable);
                let outcome = step_loss(family, &p, &tape, stage.loss, x, theta, cfg.theta_draws, &mut rng)
                    .and_then(|loss| {
                        let g = tape.backward(loss)?;
                        let grads = p.grads(&g);
                        adam.step(&mut family.store, &grads, trainable)?;
                        Ok(loss.value().item())
                    });
                let (loss, skipped) = match outcome {
                    Ok(l) => (Some(l), None),
                    Err(e) if skippable(&e) => {
                        log::warn!("stage {si} step {step}: skipped ({e})");
                        (None, Some(e.to_string()))
                    }
                    Err(e) => return Err(e),
                };
                let rec = StepRecord {
                    step,
                    stage: si,
                    loss_kind: stage.loss,
                    epoch,
                    loss,
                    elapsed_s: start.elapsed().as_secs_f64(),
                    skipped,
                };
                observer.step(&rec);
                metrics.records.push(rec);
                step += 1;
            }
        }
        if let Some(v) = validation.filter(|v| !v.is_empty()) {
            let mut eval_rng = Rng::with_stream(cfg.seed, streams::EVAL);
            let (elbo, elbo_se) = mean_elbo(family, v, cfg.theta_draws, &mut eval_rng)?;
            let rec = EvalRecord {
                stage: si,
                step,
                elbo,
                elbo_se,
                examples: v.len(),
            };
            observer.eval(&rec);
            metrics.evals.push(rec);
        }
        observer.stage_end(si, family, rng.position())?;
    }
    if !metrics.records.is_empty() && 2 * metrics.skipped() > metrics.records.len() {
        metrics.failed = true;
    }
    metrics.wall_s = start.elapsed().as_secs_f64();
    Ok(metrics)
}

/// Moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
