//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check builds a scalar by contracting an operation's output with
//! fixed random weights, then compares the tape gradient against
//! `(f(x + h) - f(x - h)) / 2h` entry by entry. Errors are relative to
//! `max(|analytic|, |numeric|, 1)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::distributions::{gamma_rsample, Dist};
use crate::encoder::{EncoderSpec, SetTransformer};
use crate::error::Result;
use crate::family::{ArchSpec, DualFamily};
use crate::flow::{AffineKind, ConditionalFlow, FlowSpec};
use crate::link::Link;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train;
use crate::zoo;

/// Default tolerance on the relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Weighted sum of `out` with weights drawn from a fixed stream.
fn contract<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let mut rng = Rng::new(0x5eed);
    let w = rng.normals(&out.shape());
    out.mul(out.tape().constant(w))?.sum()
}

/// Checks `f` with respect to every entry of every input.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(contract(f(&tape, &vars)?)?.value().item())
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = contract(f(&tape, &vars)?)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.wrt(&vars[i]);
        for j in 0..x.numel() {
            let h = step(x.data()[j]);
            let mut xs = inputs.to_vec();
            let mut v = x.data().to_vec();
            v[j] += h;
            xs[i] = Tensor::new(x.shape().to_vec(), v.clone())?;
            let up = eval(&xs)?;
            v[j] -= 2.0 * h;
            xs[i] = Tensor::new(x.shape().to_vec(), v)?;
            let down = eval(&xs)?;
            worst = worst.max(rel_err(g.data()[j], (up - down) / (2.0 * h)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.into(),
        entries,
        max_rel_err: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Checks `f` with respect to up to `per_param` entries of every parameter
/// in `store`. `f` must be deterministic given the store.
pub fn check_params<F>(name: &str, store: &ParamStore, per_param: usize, tolerance: f64, f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = store.bind(&tape, |_| true);
    let loss = contract(f(&p)?)?;
    let grads = p.grads(&tape.backward(loss)?);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = store.clone();
    for (pi, param) in store.params().iter().enumerate() {
        let n = param.value.numel();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let base = param.value.data().to_vec();
            let h = step(base[j]);
            let eval = |probe: &mut ParamStore, delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                probe.set_value(pi, Tensor::new(param.value.shape().to_vec(), v)?)?;
                let tape = Tape::new();
                let p = probe.bind(&tape, |_| true);
                Ok(contract(f(&p)?)?.value().item())
            };
            let up = eval(&mut probe, h)?;
            let down = eval(&mut probe, -h)?;
            probe.set_value(pi, param.value.clone())?;
            worst = worst.max(rel_err(grads[pi].data()[j], (up - down) / (2.0 * h)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.into(),
        entries,
        max_rel_err: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn normals(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normals(shape)
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normals(shape).map(|v| 0.5 + v.abs())
}

/// Entries bounded away from zero, for kinks such as relu and abs.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normals(shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn primitive_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let t = TOLERANCE;
    let a = normals(rng, &[3, 4]);
    let b = normals(rng, &[3, 4]);
    let pos = positive(rng, &[3, 4]);
    let mut out = vec![
        check_fn("add", &[a.clone(), b.clone()], t, |_, v| v[0].add(v[1]))?,
        check_fn("add (broadcast row)", &[a.clone(), normals(rng, &[4])], t, |_, v| v[0].add(v[1]))?,
        check_fn("sub", &[a.clone(), b.clone()], t, |_, v| v[0].sub(v[1]))?,
        check_fn("mul", &[a.clone(), b.clone()], t, |_, v| v[0].mul(v[1]))?,
        check_fn("mul (scalar)", &[a.clone(), normals(rng, &[1])], t, |_, v| v[0].mul(v[1]))?,
        check_fn("div", &[a.clone(), pos.clone()], t, |_, v| v[0].div(v[1]))?,
        check_fn("neg", std::slice::from_ref(&a), t, |_, v| v[0].neg())?,
        check_fn("scale", std::slice::from_ref(&a), t, |_, v| v[0].scale(-1.7))?,
        check_fn("exp", std::slice::from_ref(&a), t, |_, v| v[0].exp())?,
        check_fn("log", std::slice::from_ref(&pos), t, |_, v| v[0].log())?,
        check_fn("tanh", std::slice::from_ref(&a), t, |_, v| v[0].tanh())?,
        check_fn("softplus", &[normals(rng, &[3, 4]).map(|x| 3.0 * x)], t, |_, v| v[0].softplus())?,
        check_fn("sigmoid", std::slice::from_ref(&a), t, |_, v| v[0].sigmoid())?,
        check_fn("relu", &[off_zero(rng, &[3, 4])], t, |_, v| v[0].relu())?,
        check_fn("sqrt", std::slice::from_ref(&pos), t, |_, v| v[0].sqrt())?,
        check_fn("square", std::slice::from_ref(&a), t, |_, v| v[0].square())?,
        check_fn("abs", &[off_zero(rng, &[3, 4])], t, |_, v| v[0].abs())?,
        check_fn("lgamma", std::slice::from_ref(&pos), t, |_, v| v[0].lgamma())?,
        check_fn("matmul", &[normals(rng, &[3, 4]), normals(rng, &[4, 2])], t, |_, v| {
            v[0].matmul(v[1])
        })?,
        check_fn(
            "matmul (batched)",
            &[normals(rng, &[2, 3, 4]), normals(rng, &[2, 4, 2])],
            t,
            |_, v| v[0].matmul(v[1]),
        )?,
        check_fn(
            "matmul (shared right)",
            &[normals(rng, &[2, 3, 4]), normals(rng, &[4, 2])],
            t,
            |_, v| v[0].matmul(v[1]),
        )?,
        check_fn("softmax", std::slice::from_ref(&a), t, |_, v| v[0].softmax())?,
        check_fn("logsumexp", std::slice::from_ref(&a), t, |_, v| v[0].logsumexp())?,
        check_fn("sum_axis", &[normals(rng, &[2, 3, 4])], t, |_, v| v[0].sum_axis(1))?,
        check_fn("mean_axis", &[normals(rng, &[2, 3, 4])], t, |_, v| v[0].mean_axis(0))?,
        check_fn("sum_rows", &[normals(rng, &[2, 3, 4])], t, |_, v| v[0].sum_rows())?,
        check_fn("concat", &[a.clone(), normals(rng, &[3, 2])], t, |tape, v| {
            tape.concat(&[v[0], v[1]], 1)
        })?,
        check_fn("slice", &[normals(rng, &[2, 5, 3])], t, |_, v| v[0].slice(1, 1, 3))?,
        check_fn("reshape", std::slice::from_ref(&a), t, |_, v| v[0].reshape(&[2, 6])?.softmax())?,
        check_fn("transpose", &[normals(rng, &[2, 3, 4])], t, |_, v| {
            v[0].transpose()?.softmax()
        })?,
        check_fn("expand", &[normals(rng, &[3, 1, 2])], t, |_, v| v[0].expand(&[3, 4, 2]))?,
        check_fn("broadcast_to", &[normals(rng, &[4])], t, |_, v| v[0].broadcast_to(&[3, 4]))?,
        check_fn("gather_last", std::slice::from_ref(&a), t, |_, v| {
            v[0].gather_last(Arc::new(vec![Some(3), None, Some(0), Some(3)]))
        })?,
    ];
    let mut l = normals(rng, &[2, 3, 3]).map(|x| 0.3 * x);
    {
        let mut v = l.data().to_vec();
        for r in 0..2 {
            for i in 0..3 {
                for j in i + 1..3 {
                    v[r * 9 + i * 3 + j] = 0.0;
                }
                v[r * 9 + i * 3 + i] = 1.0 + v[r * 9 + i * 3 + i].abs();
            }
        }
        l = Tensor::from_parts(vec![2, 3, 3], v);
    }
    out.push(check_fn("tri_solve", &[l, normals(rng, &[2, 3])], t, |_, v| {
        v[0].tri_solve(v[1])
    })?);
    Ok(out)
}

fn link_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let t = TOLERANCE;
    let links = [
        ("identity", Link::Identity, vec![3usize]),
        ("exp", Link::Exp, vec![3]),
        (
            "reshape",
            Link::Reshape {
                from: vec![6],
                to: vec![3, 2],
            },
            vec![6],
        ),
        ("softmax_centered", Link::SoftmaxCentered, vec![3]),
        ("sqrt_softmax_centered", Link::SqrtSoftmaxCentered, vec![3]),
        (
            "chain",
            Link::Chain {
                links: vec![Link::Exp, Link::Identity],
            },
            vec![2],
        ),
    ];
    let mut out = Vec::new();
    for (name, link, latent) in links {
        let mut shape = vec![4];
        shape.extend_from_slice(&latent);
        let x = normals(rng, &shape);
        let l1 = link.clone();
        out.push(check_fn(&format!("link {name} forward"), std::slice::from_ref(&x), t, move |_, v| {
            l1.forward(v[0])
        })?);
        let l2 = link.clone();
        out.push(check_fn(&format!("link {name} log det"), std::slice::from_ref(&x), t, move |_, v| {
            l2.forward_log_det(v[0])
        })?);
        let y = {
            let tape = Tape::new();
            link.forward(tape.constant(x))?.value()
        };
        let l3 = link.clone();
        out.push(check_fn(&format!("link {name} inverse"), &[y], t, move |_, v| {
            let (z, ld) = l3.inverse_and_log_det(v[0])?;
            let n = z.shape()[0];
            z.reshape(&[n, z.value().numel() / n])?.sum_last()?.add(ld)
        })?);
    }
    Ok(out)
}

fn dist_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let t = TOLERANCE;
    let x = normals(rng, &[4, 2]);
    let loc = normals(rng, &[4, 2]);
    let scale = positive(rng, &[4, 2]);
    let mut out = vec![
        check_fn("normal log_prob", &[x.clone(), loc.clone(), scale.clone()], t, |_, v| {
            Dist::Normal { loc: v[1], scale: v[2] }.log_prob(v[0])
        })?,
        check_fn("diag_normal log_prob", &[x.clone(), loc.clone(), scale.clone()], t, |_, v| {
            Dist::DiagNormal { loc: v[1], scale: v[2] }.log_prob(v[0])
        })?,
        check_fn("laplace log_prob", &[off_zero(rng, &[4, 2]), scale.clone()], t, |tape, v| {
            Dist::Laplace {
                loc: tape.scalar(0.0),
                scale: v[1],
            }
            .log_prob(v[0])
        })?,
        check_fn(
            "gamma log_prob",
            &[positive(rng, &[4, 2]), positive(rng, &[4, 2]), positive(rng, &[4, 2])],
            t,
            |_, v| {
                Dist::Gamma {
                    concentration: v[1],
                    rate: v[2],
                }
                .log_prob(v[0])
            },
        )?,
        check_fn("dirichlet log_prob", &[normals(rng, &[4, 3]), positive(rng, &[4, 3])], t, |_, v| {
            Dist::Dirichlet { concentration: v[1] }.log_prob(v[0].softmax()?)
        })?,
        check_fn(
            "uniform log_prob",
            &[Tensor::full(&[4], 0.5), Tensor::full(&[4], -1.0), Tensor::full(&[4], 2.0)],
            t,
            |_, v| Dist::Uniform { low: v[1], high: v[2] }.log_prob(v[0]),
        )?,
        check_fn(
            "mixture log_prob",
            &[
                normals(rng, &[4, 2]),
                normals(rng, &[4, 3]),
                normals(rng, &[4, 3, 2]),
                positive(rng, &[1]),
            ],
            t,
            |_, v| {
                Dist::Mixture {
                    weights: v[1].softmax()?,
                    locs: v[2],
                    scale: v[3],
                }
                .log_prob(v[0])
            },
        )?,
    ];
    // The implicit gradient is itself a finite difference of the CDF, so
    // its accuracy is limited to about 1e-6.
    out.push(gamma_rsample_check(rng)?);
    Ok(out)
}

/// Compares the implicit reparameterization gradient of gamma draws with
/// a finite difference of the inverse CDF at a fixed level.
fn gamma_rsample_check(rng: &mut Rng) -> Result<CheckResult> {
    use statrs::distribution::{ContinuousCDF, Gamma};
    let alphas = positive(rng, &[6]).map(|a| 0.3 + 2.0 * a);
    let tape = Tape::new();
    let a = tape.leaf(alphas.clone());
    let seed = rng.below(1 << 30) as u64;
    let g = gamma_rsample(a, &mut Rng::new(seed))?;
    let gv = g.value();
    let mut worst: f64 = 0.0;
    for j in 0..alphas.numel() {
        let aj = alphas.data()[j];
        let gj = gv.data()[j];
        let dist = |al: f64| Gamma::new(al, 1.0).expect("positive shape");
        let level = dist(aj).cdf(gj);
        let h = 1e-4 * aj;
        let num = (dist(aj + h).inverse_cdf(level) - dist(aj - h).inverse_cdf(level)) / (2.0 * h);
        let grads = tape.backward(g.slice(0, j, 1)?.sum()?)?;
        worst = worst.max(rel_err(grads.wrt(&a).data()[j], num));
    }
    Ok(CheckResult {
        name: "gamma rsample (implicit)".into(),
        entries: alphas.numel(),
        max_rel_err: worst,
        tolerance: 1e-4,
        passed: worst < 1e-4,
    })
}

fn small_encoder() -> EncoderSpec {
    EncoderSpec {
        embedding: 4,
        heads: 2,
        inducing: 3,
        isabs: 1,
        pma_seeds: 1,
        sabs: 1,
        layer_norm: false,
    }
}

fn layer_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let t = TOLERANCE;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", ParamGroup::Encoder, 3, 2, rng);
    let x = normals(rng, &[4, 3]);
    out.push(check_params("linear", &store, 8, t, |p| {
        lin.forward(p, p.tape().constant(x.clone()))
    })?);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", ParamGroup::Encoder, 5);
    let x = normals(rng, &[3, 5]);
    out.push(check_fn("layer norm input", std::slice::from_ref(&x), t, |tape, v| {
        let p = store.bind(tape, |_| false);
        ln.forward(&p, v[0])
    })?);

    for layer_norm in [false, true] {
        let mut store = ParamStore::new();
        let spec = EncoderSpec {
            layer_norm,
            ..small_encoder()
        };
        let st = SetTransformer::new(&mut store, "st", 2, &spec, rng)?;
        perturb(&mut store, rng, 0.3)?;
        let x = normals(rng, &[2, 5, 2]);
        let label = if layer_norm { " with layer norm" } else { "" };
        out.push(check_params(&format!("set transformer{label} params"), &store, 4, t, |p| {
            st.forward(p, p.tape().constant(x.clone()))
        })?);
        out.push(check_fn(&format!("set transformer{label} input"), &[x], t, |tape, v| {
            let p = store.bind(tape, |_| false);
            st.forward(&p, v[0])
        })?);
    }

    for affine in [AffineKind::Diagonal, AffineKind::Triangular] {
        let mut store = ParamStore::new();
        let spec = FlowSpec {
            affine,
            maf_hidden: vec![6, 6],
        };
        let flow = ConditionalFlow::new(&mut store, "f", 3, 4, &spec, rng)?;
        perturb(&mut store, rng, 0.3)?;
        let u = normals(rng, &[5, 3]);
        let c = normals(rng, &[5, 4]);
        let label = format!("{affine:?}").to_lowercase();
        out.push(check_params(&format!("flow ({label}) forward params"), &store, 4, t, |p| {
            let tape = p.tape();
            let (y, ld) = flow.forward(p, tape.constant(u.clone()), tape.constant(c.clone()))?;
            y.sum_last()?.add(ld)
        })?);
        out.push(check_fn(&format!("flow ({label}) inverse"), &[u.clone(), c.clone()], t, |tape, v| {
            let p = store.bind(tape, |_| false);
            let (x, ld) = flow.inverse(&p, v[0], v[1])?;
            x.sum_last()?.add(ld)
        })?);
    }
    Ok(out)
}

/// Adds Gaussian noise to every parameter so that zero-initialized maps
/// carry non-trivial gradients.
pub fn perturb(store: &mut ParamStore, rng: &mut Rng, scale: f64) -> Result<()> {
    for i in 0..store.len() {
        let v = store.params()[i].value.clone();
        let noise = rng.normals(v.shape());
        let nv: Vec<f64> = v.data().iter().zip(noise.data()).map(|(a, b)| a + scale * b).collect();
        store.set_value(i, Tensor::new(v.shape().to_vec(), nv)?)?;
    }
    Ok(())
}

/// A GRE family shrunk to a handful of groups and observations.
fn shrunken_family(rng: &mut Rng) -> Result<(DualFamily, Tensor)> {
    let template = zoo::gre_with(2, 3, 2);
    let arch = ArchSpec {
        encoder: small_encoder(),
        flow: FlowSpec {
            affine: AffineKind::Triangular,
            maf_hidden: vec![4],
        },
    };
    let mut fam = DualFamily::build(&template, &arch, 3)?;
    perturb(&mut fam.store, rng, 0.1)?;
    let x = normals(rng, &[2, 2, 3, 2]).map(|v| 0.3 * v);
    Ok((fam, x))
}

fn loss_checks(rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let (fam, x) = shrunken_family(rng)?;
    let seed = 11;
    let mut out = vec![
        check_params("reverse KL loss", &fam.store, 3, 1e-4, |p| {
            let tape = p.tape();
            train::reverse_kl_loss(&fam, p, tape.constant(x.clone()), 2, &mut Rng::new(seed))
        })?,
        check_params("unregularized ELBO loss", &fam.store, 3, 1e-4, |p| {
            let tape = p.tape();
            train::unregularized_elbo_loss(&fam, p, tape.constant(x.clone()), 2, &mut Rng::new(seed))
        })?,
        check_params("MAP loss", &fam.store, 3, 1e-4, |p| {
            let tape = p.tape();
            train::map_loss(&fam, p, tape.constant(x.clone()))
        })?,
    ];
    let theta: BTreeMap<String, Tensor> = [
        ("mu".to_string(), normals(rng, &[2, 2])),
        ("M^G".to_string(), normals(rng, &[2, 2, 2])),
    ]
    .into_iter()
    .collect();
    out.push(check_params("forward KL loss", &fam.store, 3, 1e-4, |p| {
        let tape = p.tape();
        let th = theta
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        train::forward_kl_loss(&fam, p, tape.constant(x.clone()), &th)
    })?);
    Ok(out)
}

/// Every check: primitives, links, distributions, layers and losses.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = primitive_checks(&mut rng)?;
    out.extend(link_checks(&mut rng)?);
    out.extend(dist_checks(&mut rng)?);
    out.extend(layer_checks(&mut rng)?);
    out.extend(loss_checks(&mut rng)?);
    Ok(out)
}
