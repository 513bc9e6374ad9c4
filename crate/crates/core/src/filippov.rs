//! The Filippov set-valued map of a piecewise right-hand side.
//!
//! `F(t, x)` intersects, over all radii and null sets, the closed convex hull
//! of the values taken on the punctured ball. Removing the canonical null set
//! once realizes the inner intersection, so the generic path computes the
//! hull of the essential range over shrinking balls. Since each branch extends
//! continuously to the closure of its cell, the limit is also the hull of the
//! adjacent branch values at `x`, which is the fast path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::essrange::{essential_range, RangeError, RangeSettings, Setting};
use crate::hull::{convex_hull, ConvexApprox, HullError, DEFAULT_HULL_TOL};
use crate::piecewise::{CellId, MapError, PiecewiseMap};
use crate::region::{ball_constraint, DomainBox, MeasureModel, NegligibilityIdeal, Region};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilippovError {
    #[error("point {0:?} is not in the interior of the domain")]
    NotInterior(Vec<f64>),
    #[error("state has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("right-hand side maps to dimension {codomain}, state dimension is {state}")]
    NotAVectorField { state: usize, codomain: usize },
    #[error("radius schedule needs r0 > 0, 0 < gamma < 1 and at least two steps")]
    BadSchedule,
    #[error("no owned cell is adjacent to {0:?}")]
    NoAdjacentCell(Vec<f64>),
    #[error("hulls did not stabilize within the radius schedule (last two differ by {gap})")]
    NotConverged {
        gap: f64,
        last: Box<ConvexApprox>,
        previous: Box<ConvexApprox>,
    },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Range(#[from] RangeError),
    #[error(transparent)]
    Hull(#[from] HullError),
}

#[derive(Debug, Clone)]
pub struct FilippovMap {
    rhs: PiecewiseMap,
    r0: f64,
    gamma: f64,
    max_steps: usize,
    hull_tol: f64,
    ideal: NegligibilityIdeal,
    measure: MeasureModel,
    range: RangeSettings,
}

impl FilippovMap {
    pub fn new(rhs: PiecewiseMap) -> Result<Self, FilippovError> {
        if rhs.codomain_dim() != rhs.dim() {
            return Err(FilippovError::NotAVectorField {
                state: rhs.dim(),
                codomain: rhs.codomain_dim(),
            });
        }
        let measure = MeasureModel::lebesgue(rhs.domain().clone());
        Ok(FilippovMap {
            r0: 0.1 * rhs.domain().diameter(),
            gamma: 0.5,
            max_steps: 30,
            hull_tol: DEFAULT_HULL_TOL,
            ideal: NegligibilityIdeal::Lebesgue,
            measure,
            range: RangeSettings::default(),
            rhs,
        })
    }

    pub fn with_schedule(mut self, r0: f64, gamma: f64, max_steps: usize) -> Result<Self, FilippovError> {
        if !(r0 > 0.0 && r0.is_finite() && gamma > 0.0 && gamma < 1.0 && max_steps >= 2) {
            return Err(FilippovError::BadSchedule);
        }
        self.r0 = r0;
        self.gamma = gamma;
        self.max_steps = max_steps;
        Ok(self)
    }

    pub fn with_hull_tol(mut self, h: f64) -> Self {
        self.hull_tol = h;
        self
    }

    pub fn with_ideal(mut self, ideal: NegligibilityIdeal) -> Self {
        self.ideal = ideal;
        self
    }

    pub fn with_measure(mut self, measure: MeasureModel) -> Self {
        self.measure = measure;
        self
    }

    pub fn with_range_settings(mut self, range: RangeSettings) -> Self {
        self.range = range;
        self
    }

    pub fn rhs(&self) -> &PiecewiseMap {
        &self.rhs
    }

    pub fn hull_tol(&self) -> f64 {
        self.hull_tol
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.max_steps)
            .map(|j| self.r0 * self.gamma.powi(j as i32))
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), FilippovError> {
        if x.len() != self.rhs.dim() {
            return Err(FilippovError::DimensionMismatch {
                expected: self.rhs.dim(),
                found: x.len(),
            });
        }
        if !self.rhs.domain().contains_interior(x) {
            return Err(FilippovError::NotInterior(x.to_vec()));
        }
        Ok(())
    }

    /// Owned cells whose closure contains `x`.
    pub fn adjacent_cells(&self, x: &[f64]) -> Result<Vec<CellId>, FilippovError> {
        let cells: Vec<CellId> = self
            .rhs
            .adjacent_cells(x, self.rhs.surface_tol())?
            .into_iter()
            .collect();
        if cells.is_empty() {
            return Err(FilippovError::NoAdjacentCell(x.to_vec()));
        }
        Ok(cells)
    }

    /// Branch values of the adjacent cells, in cell order. Overrides are never consulted.
    pub fn adjacent_values(&self, t: f64, x: &[f64]) -> Result<Vec<(CellId, Vec<f64>)>, FilippovError> {
        self.adjacent_cells(x)?
            .into_iter()
            .map(|c| {
                let v = self.rhs.branch_value(&c, t, x)?;
                Ok((c, v))
            })
            .collect()
    }
}

/// Fast path: hull of the adjacent branch values.
pub fn filippov_set(f: &FilippovMap, t: f64, x: &[f64]) -> Result<ConvexApprox, FilippovError> {
    f.check_point(x)?;
    let values: Vec<Vec<f64>> = f.adjacent_values(t, x)?.into_iter().map(|(_, v)| v).collect();
    Ok(convex_hull(&values, f.hull_tol)?)
}

/// Generic-path result with the radius at which it stabilized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericHull {
    pub hull: ConvexApprox,
    pub radius: f64,
    pub steps: usize,
    /// Hulls at every radius tried, largest first.
    pub history: Vec<ConvexApprox>,
}

/// Generic path: hull of the essential range over `B_r(x) ∩ domain` for the
/// shrinking radius schedule, stopping when two successive hulls are within
/// the hull tolerance and the cells meeting the ball are exactly those
/// adjacent to `x` (otherwise a ball still straddling a nearby surface could
/// look stable).
pub fn filippov_set_generic(f: &FilippovMap, t: f64, x: &[f64]) -> Result<GenericHull, FilippovError> {
    f.check_point(x)?;
    let adjacent = f.adjacent_cells(x)?;
    let domain = f.rhs.domain();
    let mut history: Vec<ConvexApprox> = Vec::new();
    for (j, r) in f.radii().into_iter().enumerate() {
        let lower: Vec<f64> = x.iter().map(|v| v - r).collect();
        let upper: Vec<f64> = x.iter().map(|v| v + r).collect();
        let base = DomainBox::new(lower, upper)
            .ok()
            .and_then(|b| b.intersect(domain))
            .ok_or_else(|| FilippovError::NotInterior(x.to_vec()))?;
        let q = Region::cell(base, vec![ball_constraint(x, r)]).expect("dimensions match");
        let settings = RangeSettings {
            resolution: (r / 8.0).max(1e-10),
            seed: f.range.seed.wrapping_add(j as u64),
            ..f.range.clone()
        };
        let s = Setting {
            ideal: &f.ideal,
            measure: &f.measure,
            settings: &settings,
        };
        let range = essential_range(&f.rhs, &q, t, &s)?;
        let pts = range.hull_points();
        if pts.is_empty() {
            // Only possible when the ball's preimages are all negligible; shrink further.
            continue;
        }
        let hull = convex_hull(&pts, f.hull_tol)?;
        let stable_cells = range.contributing_cells == adjacent;
        if let Some(prev) = history.last() {
            if stable_cells && hull.hausdorff(prev) <= f.hull_tol {
                history.push(hull.clone());
                return Ok(GenericHull {
                    hull,
                    radius: r,
                    steps: j + 1,
                    history,
                });
            }
        }
        history.push(hull);
    }
    let n = history.len();
    let (last, previous) = match n {
        0 => return Err(FilippovError::NoAdjacentCell(x.to_vec())),
        1 => (history[0].clone(), history[0].clone()),
        _ => (history[n - 1].clone(), history[n - 2].clone()),
    };
    Err(FilippovError::NotConverged {
        gap: last.hausdorff(&previous),
        last: Box::new(last),
        previous: Box::new(previous),
    })
}

/// Whether `F(t, x)` is a single point within `tol`, and that point.
///
/// The reported value is the branch value of the first adjacent cell, which at
/// a continuity point is the common limit of all adjacent branches.
pub fn singleton_check(
    f: &FilippovMap,
    t: f64,
    x: &[f64],
    tol: f64,
) -> Result<(bool, Option<Vec<f64>>), FilippovError> {
    let hull = filippov_set(f, t, x)?;
    if hull.diameter() <= tol {
        let (_, v) = f.adjacent_values(t, x)?.remove(0);
        Ok((true, Some(v)))
    } else {
        Ok((false, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::piecewise::tests::{cell, e};
    use crate::piecewise::Override;
    use crate::region::NullSet;
    use std::collections::BTreeMap;

    fn neg_sign() -> PiecewiseMap {
        let d = DomainBox::new(vec![-1.0], vec![1.0]).unwrap();
        let mut b = BTreeMap::new();
        b.insert(cell("+"), vec![e("-1", 1)]);
        b.insert(cell("-"), vec![e("1", 1)]);
        PiecewiseMap::new(d, 1, vec![e("x1", 1)], b, vec![]).unwrap()
    }

    #[test]
    fn sign_rhs_at_surface_and_off() {
        let f = FilippovMap::new(neg_sign()).unwrap();
        let h = filippov_set(&f, 0.0, &[0.0]).unwrap();
        assert_eq!(h.vertices().unwrap(), &[vec![-1.0], vec![1.0]]);
        let h = filippov_set(&f, 0.0, &[0.5]).unwrap();
        assert_eq!(h.vertices().unwrap(), &[vec![-1.0]]);
        assert_eq!(singleton_check(&f, 0.0, &[0.5], 1e-9).unwrap(), (true, Some(vec![-1.0])));
        assert_eq!(singleton_check(&f, 0.0, &[0.0], 1e-9).unwrap(), (false, None));
        assert!(filippov_set(&f, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn generic_path_matches_fast_path() {
        let f = FilippovMap::new(neg_sign()).unwrap();
        for x in [0.0, 0.5, -0.3, 1e-3] {
            let g = filippov_set_generic(&f, 0.0, &[x]).unwrap();
            let fast = filippov_set(&f, 0.0, &[x]).unwrap();
            assert!(g.hull.hausdorff(&fast) <= 2e-6, "x = {x}");
        }
    }

    #[test]
    fn override_does_not_change_the_set() {
        let base = FilippovMap::new(neg_sign()).unwrap();
        let with = FilippovMap::new(
            neg_sign()
                .with_override(Override {
                    set: NullSet::points(vec![vec![0.0]]),
                    value: vec![99.0],
                })
                .unwrap(),
        )
        .unwrap();
        assert_eq!(
            filippov_set(&base, 0.0, &[0.0]).unwrap(),
            filippov_set(&with, 0.0, &[0.0]).unwrap()
        );
        let g0 = filippov_set_generic(&base, 0.0, &[0.0]).unwrap();
        let g1 = filippov_set_generic(&with, 0.0, &[0.0]).unwrap();
        assert!(g0.hull.hausdorff(&g1.hull) <= 2e-6);
    }

    #[test]
    fn smooth_generic_path_converges() {
        let d = DomainBox::new(vec![-1.0], vec![1.0]).unwrap();
        let mut b = BTreeMap::new();
        b.insert(cell(""), vec![e("-x1", 1)]);
        let f = FilippovMap::new(PiecewiseMap::new(d, 1, vec![], b, vec![]).unwrap()).unwrap();
        let g = filippov_set_generic(&f, 0.0, &[0.4]).unwrap();
        assert!(g.hull.diameter() <= 2e-6);
        assert!((g.hull.support(&[1.0]) + 0.4).abs() <= 2e-6);
    }
}
