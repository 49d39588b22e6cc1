//! Built-in templates: non-conjugate (NC), Gaussian random effects (GRE)
//! and Gaussian mixture with random effects (GM).

use std::collections::BTreeMap;

use crate::distributions::DistKind;
use crate::error::{Error, Result};
use crate::link::Link;
use crate::template::{DistSpec, ParamExpr, Plate, RvTemplate, Template};

fn value(v: f64) -> ParamExpr {
    ParamExpr::Value(v)
}

fn constant(c: &str) -> ParamExpr {
    ParamExpr::Const(c.into())
}

fn parent(p: &str) -> ParamExpr {
    ParamExpr::Parent(p.into())
}

fn dist(kind: DistKind, params: Vec<ParamExpr>) -> DistSpec {
    DistSpec {
        kind,
        params: kind
            .param_names()
            .iter()
            .map(|n| n.to_string())
            .zip(params)
            .collect(),
    }
}

fn rv(name: &str, dist: DistSpec, plates: &[&str], event: &[usize], link: Link) -> RvTemplate {
    RvTemplate {
        name: name.into(),
        dist,
        plates: plates.iter().map(|p| p.to_string()).collect(),
        event_shape: event.to_vec(),
        link,
        observed: false,
    }
}

fn observed(mut r: RvTemplate) -> RvTemplate {
    r.observed = true;
    r
}

fn plate(name: &str, rank: usize, cardinality: usize) -> Plate {
    Plate {
        name: name.into(),
        rank,
        cardinality,
    }
}

fn constants(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `mu ~ N(0, s_mu^2)`, `mu^g ~ N(mu, s_g^2)`, `x^{g,n} ~ N(mu^g, s_x^2)`
/// with `D = 2`, `N = 50` and `G` groups.
pub fn gre(groups: usize) -> Template {
    gre_with(groups, 50, 2)
}

pub fn gre_with(groups: usize, n: usize, d: usize) -> Template {
    Template {
        name: "GRE".into(),
        plates: vec![plate("P0", 0, n), plate("P1", 1, groups)],
        constants: constants(&[("sigma_mu", 1.0), ("sigma_g", 0.2), ("sigma_x", 0.05)]),
        rvs: vec![
            rv(
                "mu",
                dist(DistKind::Normal, vec![value(0.0), constant("sigma_mu")]),
                &[],
                &[d],
                Link::Identity,
            ),
            rv(
                "M^G",
                dist(DistKind::Normal, vec![parent("mu"), constant("sigma_g")]),
                &["P1"],
                &[d],
                Link::Identity,
            ),
            observed(rv(
                "X",
                dist(DistKind::Normal, vec![parent("M^G"), constant("sigma_x")]),
                &["P1", "P0"],
                &[d],
                Link::Identity,
            )),
        ],
    }
}

/// `a ~ Gamma(1, r_a)` (rate), `b^n ~ Laplace(a, s_b)` with `N = 10`,
/// `D = 2`.
pub fn nc() -> Template {
    Template {
        name: "NC".into(),
        plates: vec![plate("P0", 0, 10)],
        constants: constants(&[("r_a", 0.5), ("sigma_b", 0.3)]),
        rvs: vec![
            rv(
                "a",
                dist(DistKind::Gamma, vec![value(1.0), constant("r_a")]),
                &[],
                &[2],
                Link::Exp,
            ),
            observed(rv(
                "B",
                dist(DistKind::Laplace, vec![parent("a"), constant("sigma_b")]),
                &["P0"],
                &[2],
                Link::Identity,
            )),
        ],
    }
}

/// Mixture of `L = 3` Gaussians whose locations and weights vary per group:
/// `G, L, D, N = 3, 3, 2, 50`.
pub fn gm() -> Template {
    let (g, l, d, n) = (3, 3, 2, 50);
    let reshape = Link::Reshape {
        from: vec![l * d],
        to: vec![l, d],
    };
    Template {
        name: "GM".into(),
        plates: vec![plate("P0", 0, n), plate("P1", 1, g)],
        constants: constants(&[
            ("kappa", 1.0),
            ("sigma_mu", 1.0),
            ("sigma_g", 0.2),
            ("sigma_x", 0.05),
        ]),
        rvs: vec![
            rv(
                "M^L",
                dist(DistKind::Normal, vec![value(0.0), constant("sigma_mu")]),
                &[],
                &[l, d],
                reshape.clone(),
            ),
            rv(
                "M^L,G",
                dist(DistKind::Normal, vec![parent("M^L"), constant("sigma_g")]),
                &["P1"],
                &[l, d],
                reshape,
            ),
            rv(
                "Pi^G",
                dist(DistKind::Dirichlet, vec![constant("kappa")]),
                &["P1"],
                &[l],
                Link::SoftmaxCentered,
            ),
            observed(rv(
                "X",
                dist(
                    DistKind::Mixture,
                    vec![parent("Pi^G"), parent("M^L,G"), constant("sigma_x")],
                ),
                &["P1", "P0"],
                &[d],
                Link::Identity,
            )),
        ],
    }
}

pub fn by_name(name: &str) -> Result<Template> {
    match name.to_ascii_lowercase().as_str() {
        "gre" => Ok(gre(3)),
        "nc" => Ok(nc()),
        "gm" => Ok(gm()),
        _ => Err(Error::config(format!("unknown model `{name}` (expected nc, gre or gm)"))),
    }
}
