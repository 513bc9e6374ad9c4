//! Domain boxes, fat regions, null sets and negligibility ideals.
//!
//! A [`Region`] is a union of conjunctions of strict sign constraints on
//! continuous expressions inside a base box. Strict constraints on continuous
//! functions cut out open sets, so every region equals the closure of its
//! interior up to boundary points and removing a null set never changes its
//! closure or measure.
//!
//! Negligibility is decided symbolically: a region is certified null only when
//! interval branch-and-bound proves it empty, and a null set is certified
//! negligible in a generated ideal only by generator containment. Monte Carlo
//! estimates are never used for that decision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError, Node};
use crate::interval::Interval;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

const MC_CHUNK: usize = 4096;

/// Samples used for load-time validation of densities and surfaces.
pub const VALIDATION_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegionError {
    #[error("box bounds must have equal, nonzero length")]
    BadDimension,
    #[error("box bound {index} is not finite or lower >= upper ({lower} >= {upper})")]
    EmptyInterior { index: usize, lower: f64, upper: f64 },
    #[error("degenerate box must have finite bounds, lower <= upper and at least one flat side")]
    NotDegenerate,
    #[error("expression dimension {found} does not match domain dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("surface `{surface}` is not regular: |grad| <= 1e-9 near ({point:?})")]
    DegenerateSurface { surface: String, point: Vec<f64> },
    #[error("surface `{0}` uses abs/min/max, which is not allowed for switching or null surfaces")]
    KinkedSurface(String),
    #[error("surface `{0}` depends on time")]
    TimeDependentSurface(String),
    #[error("density is negative ({value}) at {point:?}")]
    NegativeDensity { value: f64, point: Vec<f64> },
    #[error("density cannot be evaluated at {point:?}: {source}")]
    DensityEval { point: Vec<f64>, source: ExprError },
    #[error("region base box is not contained in the measure base box")]
    BaseMismatch,
}

// ---------------------------------------------------------------- boxes

/// Axis-aligned box with nonempty interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, RegionError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(RegionError::BadDimension);
        }
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(RegionError::EmptyInterior {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(DomainBox { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn contains_interior(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l < *v && *v < *u)
    }

    pub fn contains_box(&self, other: &DomainBox) -> bool {
        self.contains(&other.lower) && self.contains(&other.upper)
    }

    pub fn intersect(&self, other: &DomainBox) -> Option<DomainBox> {
        if self.dim() != other.dim() {
            return None;
        }
        let lower: Vec<f64> = self
            .lower
            .iter()
            .zip(&other.lower)
            .map(|(a, b)| a.max(*b))
            .collect();
        let upper: Vec<f64> = self
            .upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| a.min(*b))
            .collect();
        DomainBox::new(lower, upper).ok()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| Interval::new(*l, *u))
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + (u - l) * rng.random::<f64>())
            .collect()
    }
}

// ---------------------------------------------------------------- regions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = ">")]
    Positive,
    #[serde(rename = "<")]
    Negative,
}

/// `expr > 0` or `expr < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub expr: Expr,
    pub relation: Relation,
}

impl Constraint {
    pub fn positive(expr: Expr) -> Self {
        Constraint {
            expr,
            relation: Relation::Positive,
        }
    }

    pub fn negative(expr: Expr) -> Self {
        Constraint {
            expr,
            relation: Relation::Negative,
        }
    }

    pub fn holds(&self, t: f64, x: &[f64]) -> bool {
        match (self.expr.eval(t, x), self.relation) {
            (Ok(v), Relation::Positive) => v > 0.0,
            (Ok(v), Relation::Negative) => v < 0.0,
            (Err(_), _) => false,
        }
    }

    fn status(&self, t: Interval, b: &[Interval]) -> BoxStatus {
        let Ok(iv) = self.expr.eval_interval(t, b) else {
            return BoxStatus::Unknown;
        };
        match self.relation {
            Relation::Positive if iv.hi <= 0.0 => BoxStatus::Out,
            Relation::Positive if iv.lo > 0.0 => BoxStatus::In,
            Relation::Negative if iv.lo >= 0.0 => BoxStatus::Out,
            Relation::Negative if iv.hi < 0.0 => BoxStatus::In,
            _ => BoxStatus::Unknown,
        }
    }
}

/// Union of conjunctions of strict constraints within a base box, with null
/// sets recorded as exclusions (which never change closure or measure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    base: DomainBox,
    cells: Vec<Vec<Constraint>>,
    exclusions: Vec<NullSet>,
}

impl Region {
    pub fn full(base: DomainBox) -> Region {
        Region {
            base,
            cells: vec![vec![]],
            exclusions: vec![],
        }
    }

    pub fn empty(base: DomainBox) -> Region {
        Region {
            base,
            cells: vec![],
            exclusions: vec![],
        }
    }

    pub fn cell(base: DomainBox, constraints: Vec<Constraint>) -> Result<Region, RegionError> {
        Region::union(base, vec![constraints])
    }

    pub fn union(base: DomainBox, cells: Vec<Vec<Constraint>>) -> Result<Region, RegionError> {
        for c in cells.iter().flatten() {
            if c.expr.dim() != base.dim() {
                return Err(RegionError::DimensionMismatch {
                    expected: base.dim(),
                    found: c.expr.dim(),
                });
            }
        }
        Ok(Region {
            base,
            cells,
            exclusions: vec![],
        })
    }

    pub fn base(&self) -> &DomainBox {
        &self.base
    }

    pub fn cells(&self) -> &[Vec<Constraint>] {
        &self.cells
    }

    pub fn exclusions(&self) -> &[NullSet] {
        &self.exclusions
    }

    pub fn is_box(&self) -> bool {
        self.cells.len() == 1 && self.cells[0].is_empty()
    }

    /// Conjoins constraints cell by cell; the base becomes the box intersection
    /// (an empty intersection yields an empty region on `self`'s base).
    pub fn intersect(&self, other: &Region) -> Region {
        let Some(base) = self.base.intersect(&other.base) else {
            return Region::empty(self.base.clone());
        };
        let mut cells = Vec::with_capacity(self.cells.len() * other.cells.len());
        for a in &self.cells {
            for b in &other.cells {
                cells.push(a.iter().chain(b).cloned().collect());
            }
        }
        let mut exclusions = self.exclusions.clone();
        exclusions.extend(other.exclusions.iter().cloned());
        Region {
            base,
            cells,
            exclusions,
        }
    }

    pub fn with_constraints(&self, extra: &[Constraint]) -> Region {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.extend(extra.iter().cloned());
        }
        r
    }

    pub fn with_base(&self, base: DomainBox) -> Region {
        Region {
            base,
            ..self.clone()
        }
    }

    /// Records `n` as removed. Sampling measure and closure are unchanged.
    pub fn subtract_null(&self, n: &NullSet) -> Region {
        let mut r = self.clone();
        r.exclusions.push(n.clone());
        r
    }

    /// Membership in the open set (exclusions are not consulted).
    pub fn contains(&self, x: &[f64]) -> bool {
        self.base.contains(x)
            && self
                .cells
                .iter()
                .any(|cell| cell.iter().all(|c| c.holds(0.0, x)))
    }

    /// Certified emptiness/positivity under the given density (None = Lebesgue).
    pub fn certify(&self, density: Option<&Expr>, budget: usize) -> Certificate {
        let mut undecided = false;
        let mut best = 0.0f64;
        for cell in &self.cells {
            match certify_conjunction(&self.base, cell, density, budget) {
                Certificate::Positive { lower_bound } => best = best.max(lower_bound),
                Certificate::Empty => {}
                Certificate::Undecided => undecided = true,
            }
        }
        if best > 0.0 {
            Certificate::Positive { lower_bound: best }
        } else if undecided {
            Certificate::Undecided
        } else {
            Certificate::Empty
        }
    }
}

/// Result of interval branch-and-bound on a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Certificate {
    /// Proven empty (or density proven zero on it).
    Empty,
    /// A sub-box lies inside; `lower_bound` is its measure.
    Positive { lower_bound: f64 },
    /// Neither proven within the box budget.
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoxStatus {
    In,
    Out,
    Unknown,
}

/// Default box budget for branch-and-bound certification.
pub const CERTIFY_BUDGET: usize = 20_000;

fn opposite_pair(constraints: &[Constraint]) -> bool {
    constraints.iter().enumerate().any(|(i, a)| {
        constraints[i + 1..]
            .iter()
            .any(|b| a.expr == b.expr && a.relation != b.relation)
    })
}

fn certify_conjunction(
    base: &DomainBox,
    constraints: &[Constraint],
    density: Option<&Expr>,
    budget: usize,
) -> Certificate {
    if opposite_pair(constraints) {
        return Certificate::Empty;
    }
    let t = Interval::point(0.0);
    let classify = |b: &[Interval]| -> (BoxStatus, f64) {
        let mut all_in = true;
        for c in constraints {
            match c.status(t, b) {
                BoxStatus::Out => return (BoxStatus::Out, 0.0),
                BoxStatus::Unknown => all_in = false,
                BoxStatus::In => {}
            }
        }
        let mut w_lo = 1.0;
        if let Some(w) = density {
            match w.eval_interval(t, b) {
                Ok(iv) if iv.hi <= 0.0 => return (BoxStatus::Out, 0.0),
                Ok(iv) if iv.lo > 0.0 => w_lo = iv.lo,
                _ => all_in = false,
            }
        }
        if all_in {
            (BoxStatus::In, w_lo)
        } else {
            (BoxStatus::Unknown, 0.0)
        }
    };
    // Stop splitting a few ulps above the coordinate spacing: below that,
    // bisection produces zero-width boxes.
    let min_width: Vec<f64> = base
        .lower
        .iter()
        .zip(&base.upper)
        .map(|(l, u)| ((u - l) * 1e-13).max(64.0 * f64::EPSILON * l.abs().max(u.abs())) + 1e-300)
        .collect();

    // Breadth first, so the first interior box found is among the largest.
    let mut queue = std::collections::VecDeque::from([base.intervals()]);
    let mut processed = 0usize;
    let mut unresolved = false;
    while let Some(b) = queue.pop_front() {
        processed += 1;
        if processed > budget {
            return Certificate::Undecided;
        }
        match classify(&b) {
            (BoxStatus::Out, _) => continue,
            (BoxStatus::In, w_lo) => {
                let lower_bound = b.iter().map(Interval::width).product::<f64>() * w_lo;
                if lower_bound > 0.0 {
                    return Certificate::Positive { lower_bound };
                }
                unresolved = true;
                continue;
            }
            (BoxStatus::Unknown, _) => {}
        }
        // Split along the widest side relative to the base box.
        let (axis, _) = b
            .iter()
            .enumerate()
            .map(|(i, iv)| (i, iv.width() / (base.upper[i] - base.lower[i])))
            .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
        if b[axis].width() <= min_width[axis] {
            unresolved = true;
            continue;
        }
        let (l, r) = b[axis].bisect();
        let mut left = b.clone();
        left[axis] = l;
        let mut right = b;
        right[axis] = r;
        queue.push_back(left);
        queue.push_back(right);
    }
    if unresolved {
        Certificate::Undecided
    } else {
        Certificate::Empty
    }
}

// ---------------------------------------------------------------- null sets

/// A Lebesgue-null building block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullGenerator {
    /// The zero set of a regular expression.
    Surface(Expr),
    /// A box with at least one flat side.
    DegenerateBox { lower: Vec<f64>, upper: Vec<f64> },
    /// Finitely many points.
    Points(Vec<Vec<f64>>),
}

impl NullGenerator {
    pub fn degenerate_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, RegionError> {
        let ok = lower.len() == upper.len()
            && !lower.is_empty()
            && lower
                .iter()
                .zip(&upper)
                .all(|(l, u)| l.is_finite() && u.is_finite() && l <= u)
            && lower.iter().zip(&upper).any(|(l, u)| l == u);
        if ok {
            Ok(NullGenerator::DegenerateBox { lower, upper })
        } else {
            Err(RegionError::NotDegenerate)
        }
    }

    /// Exact pointwise membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            NullGenerator::Surface(e) => e.eval(0.0, x).is_ok_and(|v| v == 0.0),
            NullGenerator::DegenerateBox { lower, upper } => {
                x.len() == lower.len()
                    && x
                        .iter()
                        .zip(lower.iter().zip(upper))
                        .all(|(v, (l, u))| l <= v && v <= u)
            }
            NullGenerator::Points(ps) => ps.iter().any(|p| p.as_slice() == x),
        }
    }

    /// Symbolic containment `self ⊆ other`.
    pub fn is_subset_of(&self, other: &NullGenerator) -> bool {
        use NullGenerator::*;
        match (self, other) {
            (Surface(a), Surface(b)) => a == b,
            (Points(ps), _) => ps.iter().all(|p| other.contains(p)),
            (DegenerateBox { lower, upper }, DegenerateBox { .. }) => {
                other.contains(lower) && other.contains(upper)
            }
            _ => false,
        }
    }

    /// Whether the generator can meet the closure of `b` (false only when proven disjoint).
    pub fn may_meet_box(&self, b: &DomainBox) -> bool {
        match self {
            NullGenerator::Surface(e) => e
                .eval_interval(Interval::point(0.0), &b.intervals())
                .map_or(true, |iv| iv.contains_zero()),
            NullGenerator::DegenerateBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .zip(b.lower().iter().zip(b.upper()))
                .all(|((l, u), (bl, bu))| l <= bu && bl <= u),
            NullGenerator::Points(ps) => ps.iter().any(|p| b.contains(p)),
        }
    }

    fn as_points(&self) -> Option<&[Vec<f64>]> {
        match self {
            NullGenerator::Points(ps) => Some(ps),
            _ => None,
        }
    }
}

/// Finite union of null generators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NullSet {
    pub generators: Vec<NullGenerator>,
}

impl NullSet {
    pub fn new(generators: Vec<NullGenerator>) -> Self {
        NullSet { generators }
    }

    pub fn empty() -> Self {
        NullSet::default()
    }

    pub fn surface(e: Expr) -> Self {
        NullSet::new(vec![NullGenerator::Surface(e)])
    }

    pub fn points(ps: Vec<Vec<f64>>) -> Self {
        NullSet::new(vec![NullGenerator::Points(ps)])
    }

    pub fn is_empty(&self) -> bool {
        self.generators.iter().all(|g| match g {
            NullGenerator::Points(ps) => ps.is_empty(),
            _ => false,
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.generators.iter().any(|g| g.contains(x))
    }

    pub fn union(&self, other: &NullSet) -> NullSet {
        let mut generators = self.generators.clone();
        generators.extend(other.generators.iter().cloned());
        NullSet { generators }
    }

    /// Symbolic containment: each generator (point lists pointwise) lies in
    /// some generator of `other`.
    pub fn is_subset_of(&self, other: &NullSet) -> bool {
        self.generators.iter().all(|g| match g.as_points() {
            Some(ps) => ps.iter().all(|p| other.contains(p)),
            None => other.generators.iter().any(|h| g.is_subset_of(h)),
        })
    }

    /// Keeps only the generators that may meet the closure of `b`.
    pub fn restricted_to(&self, b: &DomainBox) -> NullSet {
        let generators = self
            .generators
            .iter()
            .filter_map(|g| match g {
                NullGenerator::Points(ps) => {
                    let kept: Vec<Vec<f64>> =
                        ps.iter().filter(|p| b.contains(p)).cloned().collect();
                    (!kept.is_empty()).then_some(NullGenerator::Points(kept))
                }
                _ => g.may_meet_box(b).then(|| g.clone()),
            })
            .collect();
        NullSet { generators }
    }
}

/// Checks that `sigma` is a usable switching or null surface: no kinks, no
/// time dependence and a gradient bounded away from zero near its zero set.
pub fn validate_regular_surface(sigma: &Expr, base: &DomainBox, seed: u64) -> Result<(), RegionError> {
    if sigma.dim() != base.dim() {
        return Err(RegionError::DimensionMismatch {
            expected: base.dim(),
            found: sigma.dim(),
        });
    }
    if sigma.has_kinks() {
        return Err(RegionError::KinkedSurface(sigma.to_string()));
    }
    if sigma.uses_time() {
        return Err(RegionError::TimeDependentSurface(sigma.to_string()));
    }
    let degenerate = |point: Vec<f64>| RegionError::DegenerateSurface {
        surface: sigma.to_string(),
        point,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5u64);
    let mut found = 0usize;
    for _ in 0..4 * VALIDATION_SAMPLES {
        if found >= VALIDATION_SAMPLES {
            break;
        }
        let mut x = base.sample(&mut rng);
        // Newton projection onto the zero set.
        for _ in 0..50 {
            let Ok((v, g)) = sigma.value_and_gradient(0.0, &x) else {
                break;
            };
            let gn2: f64 = g.iter().map(|c| c * c).sum();
            if v.abs() < 1e-6 {
                if gn2.sqrt() <= 1e-9 {
                    return Err(degenerate(x));
                }
                found += 1;
                break;
            }
            if gn2.sqrt() <= 1e-9 {
                break;
            }
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= v * gi / gn2;
            }
            if !base.contains(&x) {
                break;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- ideals and measures

/// The family of negligible sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegligibilityIdeal {
    /// Lebesgue-null sets (with respect to the measure model).
    Lebesgue,
    /// Subsets of finite unions of the listed generators.
    Generated { generators: Vec<NullGenerator> },
}

impl NegligibilityIdeal {
    pub fn generated(generators: Vec<NullGenerator>) -> Self {
        NegligibilityIdeal::Generated { generators }
    }

    pub fn contains_null_set(&self, s: &NullSet) -> bool {
        match self {
            NegligibilityIdeal::Lebesgue => true,
            NegligibilityIdeal::Generated { generators } => s.is_subset_of(&NullSet {
                generators: generators.clone(),
            }),
        }
    }
}

/// Either kind of set that can be tested for negligibility.
#[derive(Debug, Clone, Copy)]
pub enum SetRef<'a> {
    Null(&'a NullSet),
    Region(&'a Region),
}

/// Membership in the ideal. Regions are negligible only when proven empty
/// (for the Lebesgue ideal: proven empty where the density is positive).
pub fn is_negligible(s: SetRef<'_>, ideal: &NegligibilityIdeal, m: &MeasureModel) -> bool {
    match s {
        SetRef::Null(n) => ideal.contains_null_set(n),
        SetRef::Region(r) => {
            let density = match ideal {
                NegligibilityIdeal::Lebesgue => m.density(),
                NegligibilityIdeal::Generated { .. } => None,
            };
            matches!(r.certify(density, CERTIFY_BUDGET), Certificate::Empty)
        }
    }
}

/// A measure on a box given by a nonnegative density (Lebesgue when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureModel {
    base: DomainBox,
    density: Option<Expr>,
}

impl MeasureModel {
    pub fn lebesgue(base: DomainBox) -> Self {
        MeasureModel {
            base,
            density: None,
        }
    }

    /// Validates nonnegativity at sampled points of the base.
    pub fn with_density(base: DomainBox, density: Expr, seed: u64) -> Result<Self, RegionError> {
        if density.dim() != base.dim() {
            return Err(RegionError::DimensionMismatch {
                expected: base.dim(),
                found: density.dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xd);
        for _ in 0..VALIDATION_SAMPLES {
            let x = base.sample(&mut rng);
            match density.eval(0.0, &x) {
                Ok(v) if v < 0.0 => return Err(RegionError::NegativeDensity { value: v, point: x }),
                Ok(_) => {}
                Err(source) => return Err(RegionError::DensityEval { point: x, source }),
            }
        }
        Ok(MeasureModel {
            base,
            density: Some(density),
        })
    }

    pub fn base(&self) -> &DomainBox {
        &self.base
    }

    pub fn density(&self) -> Option<&Expr> {
        self.density.as_ref()
    }
}

/// Monte Carlo measure estimate with a 99% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub estimate: f64,
    pub ci_halfwidth: f64,
}

impl MeasureEstimate {
    pub fn lower_confidence_bound(&self) -> f64 {
        self.estimate - self.ci_halfwidth
    }
}

/// Estimates `m(r)` from `budget` samples (at least 1000). Sample chunks use
/// independent ChaCha streams keyed by `(seed, chunk index)` and are reduced
/// in chunk order, so the result does not depend on the thread count.
pub fn measure_estimate(
    r: &Region,
    m: &MeasureModel,
    budget: usize,
    seed: u64,
) -> Result<MeasureEstimate, RegionError> {
    if !m.base.contains_box(&r.base) {
        return Err(RegionError::BaseMismatch);
    }
    if r.cells.is_empty() {
        return Ok(MeasureEstimate {
            estimate: 0.0,
            ci_halfwidth: 0.0,
        });
    }
    if r.is_box() && m.density.is_none() {
        return Ok(MeasureEstimate {
            estimate: r.base.volume(),
            ci_halfwidth: 0.0,
        });
    }
    let budget = budget.max(1000);
    let chunks = budget.div_ceil(MC_CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let n = MC_CHUNK.min(budget - chunk * MC_CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let x = r.base.sample(&mut rng);
                if !r.contains(&x) {
                    continue;
                }
                let w = match &m.density {
                    Some(d) => d.eval(0.0, &x).unwrap_or(0.0).max(0.0),
                    None => 1.0,
                };
                s += w;
                s2 += w * w;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let n = budget as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    let vol = r.base.volume();
    Ok(MeasureEstimate {
        estimate: vol * mean,
        ci_halfwidth: Z99 * vol * (var / n).sqrt(),
    })
}

// ---------------------------------------------------------------- constraint builders

/// Constraint `rho^2 - sum_i (g_i - y_i)^2 > 0`, the preimage of an open ball.
pub fn ball_preimage_constraint(g: &[Expr], y: &[f64], rho: f64) -> Constraint {
    let dim = g[0].dim();
    let sq = g
        .iter()
        .zip(y)
        .map(|(gi, yi)| Node::square(Node::sub(gi.root().clone(), Node::Const(*yi))))
        .reduce(Node::add)
        .expect("nonempty codomain");
    let e = Expr::from_node(Node::sub(Node::Const(rho * rho), sq), dim)
        .expect("indices already validated");
    Constraint::positive(e)
}

/// Constraints `lo_i < g_i < hi_i`, the preimage of an open box.
pub fn box_preimage_constraints(g: &[Expr], lo: &[f64], hi: &[f64]) -> Vec<Constraint> {
    let dim = g[0].dim();
    let mut out = Vec::with_capacity(2 * g.len());
    for ((gi, l), h) in g.iter().zip(lo).zip(hi) {
        let above = Node::sub(gi.root().clone(), Node::Const(*l));
        let below = Node::sub(gi.root().clone(), Node::Const(*h));
        out.push(Constraint::positive(Expr::from_node(above, dim).unwrap()));
        out.push(Constraint::negative(Expr::from_node(below, dim).unwrap()));
    }
    out
}

/// Constraint `r^2 - |x - c|^2 > 0`, an open Euclidean ball.
pub fn ball_constraint(center: &[f64], r: f64) -> Constraint {
    let dim = center.len();
    let sq = center
        .iter()
        .enumerate()
        .map(|(i, c)| Node::square(Node::sub(Node::Var(i), Node::Const(*c))))
        .reduce(Node::add)
        .expect("nonempty");
    Constraint::positive(Expr::from_node(Node::sub(Node::Const(r * r), sq), dim).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(lo: &[f64], hi: &[f64]) -> DomainBox {
        DomainBox::new(lo.to_vec(), hi.to_vec()).unwrap()
    }

    fn c(s: &str, dim: usize, rel: Relation) -> Constraint {
        Constraint {
            expr: Expr::parse(s, dim).unwrap(),
            relation: rel,
        }
    }

    #[test]
    fn tiny_half_ball_off_origin_is_positive() {
        let p = [-0.18572410458525085, 0.3 * -0.18572410458525085];
        let r = 3.45266983001244e-5;
        let base = bx(&[p[0] - r, p[1] - r], &[p[0] + r, p[1] + r]);
        let half = Region::cell(base, vec![ball_constraint(&p, r), c("x2 - 0.3*x1", 2, Relation::Positive)]).unwrap();
        match half.certify(None, CERTIFY_BUDGET) {
            Certificate::Positive { lower_bound } => assert!(lower_bound > 1e-11, "{lower_bound}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn box_validation() {
        assert!(DomainBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(DomainBox::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(DomainBox::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn half_square_estimate() {
        let base = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        let r = Region::cell(base.clone(), vec![c("x1", 2, Relation::Positive)]).unwrap();
        let est = measure_estimate(&r, &MeasureModel::lebesgue(base), 100_000, 7).unwrap();
        assert!((est.estimate - 2.0).abs() <= est.ci_halfwidth, "{est:?}");
        assert!(est.ci_halfwidth > 0.0 && est.ci_halfwidth < 0.05);
    }

    #[test]
    fn full_box_is_exact() {
        let base = bx(&[0.0], &[1.0]);
        let est = measure_estimate(&Region::full(base.clone()), &MeasureModel::lebesgue(base), 1000, 1)
            .unwrap();
        assert_eq!(est.estimate, 1.0);
        assert_eq!(est.ci_halfwidth, 0.0);
    }

    #[test]
    fn contradictory_region() {
        let base = bx(&[-1.0], &[1.0]);
        let r = Region::cell(
            base.clone(),
            vec![c("x1", 1, Relation::Positive), c("x1", 1, Relation::Negative)],
        )
        .unwrap();
        let m = MeasureModel::lebesgue(base);
        assert_eq!(measure_estimate(&r, &m, 10_000, 3).unwrap().estimate, 0.0);
        assert!(is_negligible(SetRef::Region(&r), &NegligibilityIdeal::Lebesgue, &m));
    }

    #[test]
    fn intersection_conjoins() {
        let base = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        let a = Region::cell(base.clone(), vec![c("x1", 2, Relation::Positive)]).unwrap();
        let b = Region::cell(base.clone(), vec![c("x2", 2, Relation::Positive)]).unwrap();
        let ab = a.intersect(&b);
        assert_eq!(ab.cells().len(), 1);
        assert_eq!(ab.cells()[0].len(), 2);
        assert!(ab.contains(&[0.5, 0.5]));
        assert!(!ab.contains(&[0.5, -0.5]));
        let est = measure_estimate(&ab, &MeasureModel::lebesgue(base), 50_000, 11).unwrap();
        assert!((est.estimate - 1.0).abs() <= est.ci_halfwidth);
    }

    #[test]
    fn subtract_null_records_annotation_only() {
        let base = bx(&[-1.0], &[1.0]);
        let r = Region::cell(base.clone(), vec![c("x1", 1, Relation::Positive)]).unwrap();
        let n = NullSet::surface(Expr::parse("x1 - 0.5", 1).unwrap());
        let rn = r.subtract_null(&n);
        assert_eq!(rn.exclusions(), &[n]);
        assert_eq!(rn.cells(), r.cells());
        let m = MeasureModel::lebesgue(base);
        assert_eq!(
            measure_estimate(&r, &m, 5000, 2).unwrap(),
            measure_estimate(&rn, &m, 5000, 2).unwrap()
        );
    }

    #[test]
    fn negligibility_examples() {
        let base = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        let m = MeasureModel::lebesgue(base.clone());
        let surf = NullSet::surface(Expr::parse("x1", 2).unwrap());
        assert!(is_negligible(SetRef::Null(&surf), &NegligibilityIdeal::Lebesgue, &m));
        let half = Region::cell(base, vec![c("x1", 2, Relation::Positive)]).unwrap();
        assert!(!is_negligible(SetRef::Region(&half), &NegligibilityIdeal::Lebesgue, &m));

        let m1 = MeasureModel::lebesgue(bx(&[0.0], &[1.0]));
        let pt = NullSet::points(vec![vec![0.5]]);
        let ideal = NegligibilityIdeal::generated(vec![NullGenerator::Points(vec![vec![0.5]])]);
        assert!(is_negligible(SetRef::Null(&pt), &ideal, &m1));
        let other = NullSet::points(vec![vec![0.25]]);
        assert!(!is_negligible(SetRef::Null(&other), &ideal, &m1));
        // Union of individually negligible sets.
        let ideal2 = NegligibilityIdeal::generated(vec![
            NullGenerator::Points(vec![vec![0.5]]),
            NullGenerator::Points(vec![vec![0.25]]),
        ]);
        assert!(is_negligible(SetRef::Null(&pt.union(&other)), &ideal2, &m1));
    }

    #[test]
    fn generator_containment() {
        let s = NullGenerator::Surface(Expr::parse("x1 - 0.5", 1).unwrap());
        assert!(NullGenerator::Points(vec![vec![0.5]]).is_subset_of(&s));
        assert!(!NullGenerator::Points(vec![vec![0.4]]).is_subset_of(&s));
        let flat = NullGenerator::degenerate_box(vec![0.0, 0.0], vec![0.0, 1.0]).unwrap();
        let inner = NullGenerator::degenerate_box(vec![0.0, 0.2], vec![0.0, 0.3]).unwrap();
        assert!(inner.is_subset_of(&flat));
        assert!(!flat.is_subset_of(&inner));
        assert!(NullGenerator::degenerate_box(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn certification() {
        let base = bx(&[-1.0], &[1.0]);
        let gap = Region::cell(
            base.clone(),
            vec![c("x1 - 0.5", 1, Relation::Positive), c("x1 - 0.3", 1, Relation::Negative)],
        )
        .unwrap();
        assert_eq!(gap.certify(None, CERTIFY_BUDGET), Certificate::Empty);
        let tiny = Region::cell(
            base.clone(),
            vec![c("x1 - 0.3", 1, Relation::Positive), c("x1 - 0.300001", 1, Relation::Negative)],
        )
        .unwrap();
        assert!(matches!(tiny.certify(None, CERTIFY_BUDGET), Certificate::Positive { .. }));
        // Density vanishing on the region: measure zero.
        let w = Expr::parse("max(0, x1)", 1).unwrap();
        let left = Region::cell(base, vec![c("x1 + 0.5", 1, Relation::Negative)]).unwrap();
        assert_eq!(left.certify(Some(&w), CERTIFY_BUDGET), Certificate::Empty);
    }

    #[test]
    fn regular_surface_validation() {
        let base = bx(&[-1.0, -1.0], &[1.0, 1.0]);
        assert!(validate_regular_surface(&Expr::parse("x1^2 + x2^2 - 0.25", 2).unwrap(), &base, 1).is_ok());
        // A double root still has a null zero set.
        assert!(validate_regular_surface(&Expr::parse("x1^2", 2).unwrap(), &base, 1).is_ok());
        assert!(matches!(
            validate_regular_surface(&Expr::parse("0*x1", 2).unwrap(), &base, 1),
            Err(RegionError::DegenerateSurface { .. })
        ));
        assert!(matches!(
            validate_regular_surface(&Expr::parse("abs(x1) - 0.5", 2).unwrap(), &base, 1),
            Err(RegionError::KinkedSurface(_))
        ));
    }

    #[test]
    fn density_validation() {
        let base = bx(&[-1.0], &[1.0]);
        assert!(MeasureModel::with_density(base.clone(), Expr::parse("x1", 1).unwrap(), 0).is_err());
        assert!(MeasureModel::with_density(base, Expr::parse("x1^2", 1).unwrap(), 0).is_ok());
    }
}
