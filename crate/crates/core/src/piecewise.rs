//! Piecewise-continuous maps: continuous branches on the sign cells of finitely
//! many switching surfaces, plus constant overrides on null sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::region::{
    validate_regular_surface, Constraint, DomainBox, NullGenerator, NullSet, Region, RegionError,
    VALIDATION_SAMPLES,
};

/// Default distance to a surface below which a point counts as lying on it.
pub const DEFAULT_SURFACE_TOL: f64 = 1e-9;

/// Seed for load-time validation sampling.
const VALIDATION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("in {context}: {source}")]
    Expr { context: String, source: ExprError },
    #[error("no branch for sign vector `{0}`, whose cell has positive measure (e.g. at {1:?})")]
    MissingBranch(CellId, Vec<f64>),
    #[error("invalid sign vector key `{0}` (expected {1} characters from '+' and '-')")]
    BadKey(String, usize),
    #[error("{what} has length {found}, expected {expected}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("point {0:?} lies outside the domain")]
    OutsideDomain(Vec<f64>),
    #[error("no owned cell is adjacent to {0:?}")]
    NoOwningCell(Vec<f64>),
    #[error("branch `{cell}` cannot be evaluated at {point:?}: {source}")]
    BranchEval {
        cell: CellId,
        point: Vec<f64>,
        source: ExprError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sign {
    /// sigma > 0; written `+`. Sorts first.
    Pos,
    /// sigma < 0; written `-`.
    Neg,
}

/// A sign vector indexing a cell `{x : sign(sigma_i(x)) = s_i}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(pub Vec<Sign>);

impl CellId {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self, i: usize) -> CellId {
        let mut s = self.0.clone();
        s[i] = match s[i] {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        };
        CellId(s)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            f.write_str(match s {
                Sign::Pos => "+",
                Sign::Neg => "-",
            })?;
        }
        Ok(())
    }
}

impl FromStr for CellId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '+' => Ok(Sign::Pos),
                '-' => Ok(Sign::Neg),
                _ => Err(s.to_string()),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(CellId)
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|s| serde::de::Error::custom(format!("invalid sign vector `{s}`")))
    }
}

/// A constant value assigned on a null set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub set: NullSet,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseMap {
    domain: DomainBox,
    codomain_dim: usize,
    switches: Vec<Expr>,
    branches: BTreeMap<CellId, Vec<Expr>>,
    overrides: Vec<Override>,
    surface_tol: f64,
}

impl PiecewiseMap {
    /// Builds and validates a map. Every cell met by sampling must own a
    /// branch, switching surfaces must be regular and branches must evaluate.
    pub fn new(
        domain: DomainBox,
        codomain_dim: usize,
        switches: Vec<Expr>,
        branches: BTreeMap<CellId, Vec<Expr>>,
        overrides: Vec<Override>,
    ) -> Result<Self, MapError> {
        let m = domain.dim();
        let k = switches.len();
        for (i, s) in switches.iter().enumerate() {
            if s.dim() != m {
                return Err(MapError::LengthMismatch {
                    what: format!("switch {}", i + 1),
                    expected: m,
                    found: s.dim(),
                });
            }
            validate_regular_surface(s, &domain, VALIDATION_SEED)?;
        }
        for (cell, exprs) in &branches {
            if cell.len() != k {
                return Err(MapError::BadKey(cell.to_string(), k));
            }
            if exprs.len() != codomain_dim {
                return Err(MapError::LengthMismatch {
                    what: format!("branch `{cell}`"),
                    expected: codomain_dim,
                    found: exprs.len(),
                });
            }
            if let Some(e) = exprs.iter().find(|e| e.dim() != m) {
                return Err(MapError::LengthMismatch {
                    what: format!("state dimension of branch `{cell}`"),
                    expected: m,
                    found: e.dim(),
                });
            }
        }
        let map = PiecewiseMap {
            domain,
            codomain_dim,
            switches,
            branches,
            overrides: vec![],
            surface_tol: DEFAULT_SURFACE_TOL,
        };
        map.validate_coverage()?;
        overrides
            .into_iter()
            .try_fold(map, |map, o| map.with_override(o))
    }

    pub fn with_surface_tol(mut self, tol: f64) -> Self {
        self.surface_tol = tol;
        self
    }

    /// Adds a null-set override, validating its shape.
    pub fn with_override(mut self, o: Override) -> Result<Self, MapError> {
        let m = self.dim();
        if o.value.len() != self.codomain_dim {
            return Err(MapError::LengthMismatch {
                what: "override value".into(),
                expected: self.codomain_dim,
                found: o.value.len(),
            });
        }
        for g in &o.set.generators {
            match g {
                NullGenerator::Surface(e) => validate_regular_surface(e, &self.domain, VALIDATION_SEED)?,
                NullGenerator::Points(ps) => {
                    if let Some(p) = ps.iter().find(|p| p.len() != m) {
                        return Err(MapError::LengthMismatch {
                            what: "override point".into(),
                            expected: m,
                            found: p.len(),
                        });
                    }
                }
                NullGenerator::DegenerateBox { lower, .. } => {
                    if lower.len() != m {
                        return Err(MapError::LengthMismatch {
                            what: "override box".into(),
                            expected: m,
                            found: lower.len(),
                        });
                    }
                }
            }
        }
        self.overrides.push(o);
        Ok(self)
    }

    fn validate_coverage(&self) -> Result<(), MapError> {
        let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
        rng.set_stream(0xc0);
        for _ in 0..VALIDATION_SAMPLES {
            let x = self.domain.sample(&mut rng);
            let Some(cell) = self.exact_cell(&x) else {
                continue;
            };
            let Some(branch) = self.branches.get(&cell) else {
                return Err(MapError::MissingBranch(cell, x));
            };
            for e in branch {
                e.eval(0.0, &x).map_err(|source| MapError::BranchEval {
                    cell: cell.clone(),
                    point: x.clone(),
                    source,
                })?;
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    /// State dimension m.
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn codomain_dim(&self) -> usize {
        self.codomain_dim
    }

    pub fn switches(&self) -> &[Expr] {
        &self.switches
    }

    pub fn branches(&self) -> &BTreeMap<CellId, Vec<Expr>> {
        &self.branches
    }

    pub fn overrides(&self) -> &[Override] {
        &self.overrides
    }

    pub fn surface_tol(&self) -> f64 {
        self.surface_tol
    }

    pub fn owned_cells(&self) -> impl Iterator<Item = &CellId> {
        self.branches.keys()
    }

    /// Switching values sigma_i(x).
    pub fn switch_values(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        self.switches
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.eval(0.0, x).map_err(|source| MapError::Expr {
                    context: format!("switch {}", i + 1),
                    source,
                })
            })
            .collect()
    }

    /// The cell containing `x` when no switch vanishes there.
    pub fn exact_cell(&self, x: &[f64]) -> Option<CellId> {
        let vals = self.switch_values(x).ok()?;
        vals.iter()
            .map(|&v| {
                if v > 0.0 {
                    Some(Sign::Pos)
                } else if v < 0.0 {
                    Some(Sign::Neg)
                } else {
                    None
                }
            })
            .collect::<Option<Vec<_>>>()
            .map(CellId)
    }

    /// Owned cells consistent with a partial sign vector (None = wildcard).
    fn completions(&self, partial: &[Option<Sign>]) -> BTreeSet<CellId> {
        let mut out = vec![Vec::with_capacity(partial.len())];
        for p in partial {
            let choices: &[Sign] = match p {
                Some(Sign::Pos) => &[Sign::Pos],
                Some(Sign::Neg) => &[Sign::Neg],
                None => &[Sign::Pos, Sign::Neg],
            };
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<Sign>| {
                    choices.iter().map(move |s| {
                        let mut v = prefix.clone();
                        v.push(*s);
                        v
                    })
                })
                .collect();
        }
        out.into_iter()
            .map(CellId)
            .filter(|c| self.branches.contains_key(c))
            .collect()
    }

    /// Owned cells whose closure contains `x`, switches with `|sigma| <= tol`
    /// treated as wildcards.
    pub fn adjacent_cells(&self, x: &[f64], tol: f64) -> Result<BTreeSet<CellId>, MapError> {
        let vals = self.switch_values(x)?;
        let partial: Vec<Option<Sign>> = vals
            .iter()
            .map(|&v| {
                if v.abs() <= tol {
                    None
                } else if v > 0.0 {
                    Some(Sign::Pos)
                } else {
                    Some(Sign::Neg)
                }
            })
            .collect();
        Ok(self.completions(&partial))
    }

    pub fn branch_value(&self, cell: &CellId, t: f64, x: &[f64]) -> Result<Vec<f64>, MapError> {
        let branch = self
            .branches
            .get(cell)
            .ok_or_else(|| MapError::MissingBranch(cell.clone(), x.to_vec()))?;
        branch
            .iter()
            .map(|e| {
                e.eval(t, x).map_err(|source| MapError::BranchEval {
                    cell: cell.clone(),
                    point: x.to_vec(),
                    source,
                })
            })
            .collect()
    }

    /// Pointwise values of the raw map: overrides first, then the branch of
    /// the containing cell. On a surface without override the branch of the
    /// lexicographically smallest adjacent owned cell is used (`+` < `-`).
    pub fn eval_raw(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, MapError> {
        if !self.domain.contains(x) {
            return Err(MapError::OutsideDomain(x.to_vec()));
        }
        if let Some(o) = self.overrides.iter().find(|o| o.set.contains(x)) {
            return Ok(o.value.clone());
        }
        let vals = self.switch_values(x)?;
        let partial: Vec<Option<Sign>> = vals
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    Some(Sign::Pos)
                } else if v < 0.0 {
                    Some(Sign::Neg)
                } else {
                    None
                }
            })
            .collect();
        let cell = self
            .completions(&partial)
            .into_iter()
            .next()
            .ok_or_else(|| MapError::NoOwningCell(x.to_vec()))?;
        self.branch_value(&cell, t, x)
    }

    /// Branch values of all adjacent cells agree within `tol` (Euclidean) and
    /// no override at `x` assigns a different value.
    pub fn is_continuous_at(&self, t: f64, x: &[f64], tol: f64) -> Result<bool, MapError> {
        if !self.domain.contains(x) {
            return Err(MapError::OutsideDomain(x.to_vec()));
        }
        let cells = self.adjacent_cells(x, self.surface_tol)?;
        let values = cells
            .iter()
            .map(|c| self.branch_value(c, t, x))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(first) = values.first() else {
            return Ok(false);
        };
        let agree = |a: &[f64], b: &[f64]| dist(a, b) <= tol;
        if !values.iter().all(|v| agree(first, v)) {
            return Ok(false);
        }
        Ok(self
            .overrides
            .iter()
            .filter(|o| o.set.contains(x))
            .all(|o| agree(&o.value, first)))
    }

    /// Constraints cutting out the open cell.
    pub fn cell_constraints(&self, cell: &CellId) -> Vec<Constraint> {
        self.switches
            .iter()
            .zip(&cell.0)
            .map(|(s, sign)| match sign {
                Sign::Pos => Constraint::positive(s.clone()),
                Sign::Neg => Constraint::negative(s.clone()),
            })
            .collect()
    }

    pub fn cell_region(&self, cell: &CellId) -> Region {
        Region::cell(self.domain.clone(), self.cell_constraints(cell))
            .expect("switch dimensions validated")
    }

    /// Branch expressions of a cell with time frozen at `t`.
    pub fn branch_at_time(&self, cell: &CellId, t: f64) -> Vec<Expr> {
        self.branches[cell].iter().map(|e| e.at_time(t)).collect()
    }

    /// All override sets as one null set.
    pub fn override_null_set(&self) -> NullSet {
        self.overrides
            .iter()
            .fold(NullSet::empty(), |acc, o| acc.union(&o.set))
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
