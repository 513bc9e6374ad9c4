#![allow(dead_code)]

use std::collections::BTreeMap;

use filippov_core::expr::Expr;
use filippov_core::piecewise::{CellId, Override, PiecewiseMap};
use filippov_core::region::{DomainBox, NullSet};

pub fn map(
    lower: &[f64],
    upper: &[f64],
    switches: &[&str],
    branches: &[(&str, &[&str])],
) -> PiecewiseMap {
    let n = lower.len();
    let domain = DomainBox::new(lower.to_vec(), upper.to_vec()).unwrap();
    let switches = switches.iter().map(|s| Expr::parse(s, n).unwrap()).collect();
    let mut b = BTreeMap::new();
    let mut m = 0;
    for (key, exprs) in branches {
        let id: CellId = key.parse().unwrap();
        m = exprs.len();
        b.insert(id, exprs.iter().map(|s| Expr::parse(s, n).unwrap()).collect());
    }
    PiecewiseMap::new(domain, m, switches, b, vec![]).unwrap()
}

pub fn with_point_override(f: &PiecewiseMap, point: &[f64], value: &[f64]) -> PiecewiseMap {
    f.clone()
        .with_override(Override {
            set: NullSet::points(vec![point.to_vec()]),
            value: value.to_vec(),
        })
        .unwrap()
}

/// x' = -sign(x)
pub fn neg_sign() -> PiecewiseMap {
    map(&[-2.0], &[2.0], &["x1"], &[("+", &["-1"]), ("-", &["1"])])
}

/// v' = -sign(v) + 0.5
pub fn dry_friction() -> PiecewiseMap {
    map(&[-3.0], &[3.0], &["x1"], &[("+", &["-0.5"]), ("-", &["1.5"])])
}

/// x1' = x2, x2' = -sign(x1)
pub fn relay() -> PiecewiseMap {
    map(
        &[-3.0, -3.0],
        &[3.0, 3.0],
        &["x1"],
        &[("+", &["x2", "-1"]), ("-", &["x2", "1"])],
    )
}

/// Attracting tilted line with state-dependent branches.
pub fn tilted() -> PiecewiseMap {
    map(
        &[-2.0, -2.0],
        &[2.0, 2.0],
        &["x2 - 0.3*x1"],
        &[
            ("+", &["1", "-1 - 0.5*x1^2"]),
            ("-", &["1 + 0.2*x2", "1 + 0.5*x2^2"]),
        ],
    )
}

/// x' = -(sign(x1), sign(x2)): sliding into the corner.
pub fn corner() -> PiecewiseMap {
    map(
        &[-2.0, -2.0],
        &[2.0, 2.0],
        &["x1", "x2"],
        &[
            ("++", &["-1", "-1"]),
            ("+-", &["-1", "1"]),
            ("-+", &["1", "-1"]),
            ("--", &["1", "1"]),
        ],
    )
}

/// x' = -x
pub fn linear() -> PiecewiseMap {
    map(&[-2.0, -2.0], &[2.0, 2.0], &[], &[("", &["-x1", "-x2"])])
}
