//! Good/bad value classification, essential ranges and canonical null sets.
//!
//! A value `y` is bad when some ball around it has a negligible preimage. The
//! preimage of a ball splits into one fat piece per owned cell (a region cut
//! out by the cell's sign constraints and `|g_c(x) - y| < rho`) and the
//! override sets whose value lies in the ball. Bad verdicts need every fat
//! piece proven empty by interval branch-and-bound and every override piece
//! contained in the ideal; good verdicts rest on a certified inner box, a
//! non-negligible override piece, or (as a fallback) a Monte Carlo lower
//! confidence bound.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;
use crate::interval::Interval;
use crate::piecewise::{dist, CellId, MapError, PiecewiseMap};
use crate::region::{
    ball_preimage_constraint, box_preimage_constraints, measure_estimate, Certificate, Constraint,
    MeasureModel, NegligibilityIdeal, NullSet, Region, CERTIFY_BUDGET,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RangeError {
    #[error("value has length {found}, codomain dimension is {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("region is not contained in {0}")]
    NotContained(&'static str),
    #[error("the removed set is not negligible under the active ideal")]
    NotNegligible,
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Tuning for classification and covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSettings {
    /// Largest neighbourhood radius of the shrinking schedule.
    pub rho0: f64,
    pub rho_factor: f64,
    pub rho_steps: usize,
    /// Target box width of covers.
    pub resolution: f64,
    /// Maximum bisections per codomain axis.
    pub max_depth: u32,
    pub certify_budget: usize,
    pub mc_budget: usize,
    pub seed: u64,
}

impl Default for RangeSettings {
    fn default() -> Self {
        RangeSettings {
            rho0: 1.0,
            rho_factor: 0.5,
            rho_steps: 20,
            resolution: 1e-3,
            max_depth: 20,
            certify_budget: CERTIFY_BUDGET,
            mc_budget: 20_000,
            seed: 0,
        }
    }
}

impl RangeSettings {
    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.rho_steps).map(|j| self.rho0 * self.rho_factor.powi(j as i32))
    }

    fn smallest_radius(&self) -> f64 {
        self.rho0 * self.rho_factor.powi(self.rho_steps.saturating_sub(1) as i32)
    }
}

/// The measure-theoretic setting a classification runs in.
#[derive(Debug, Clone, Copy)]
pub struct Setting<'a> {
    pub ideal: &'a NegligibilityIdeal,
    pub measure: &'a MeasureModel,
    pub settings: &'a RangeSettings,
}

impl Setting<'_> {
    /// Density used for certification: the measure's under the Lebesgue ideal,
    /// none under a generated ideal (where every nonempty fat set is non-negligible).
    fn density(&self) -> Option<&Expr> {
        match self.ideal {
            NegligibilityIdeal::Lebesgue => self.measure.density(),
            NegligibilityIdeal::Generated { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Good,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    /// Symbolic or interval proof.
    Certified,
    /// Monte Carlo lower confidence bound above zero at 99%.
    MonteCarlo,
    /// Neither proof nor statistical evidence; reported as good.
    Low,
}

/// Classification of a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointClass {
    pub value: Vec<f64>,
    pub verdict: Verdict,
    /// Bad: the largest schedule radius with a negligible preimage.
    /// Good: the smallest schedule radius tested.
    pub radius: f64,
    /// Good: a lower bound on the preimage measure at `radius` (0 when the
    /// evidence is a non-negligible override set or missing).
    pub measure_lower_bound: f64,
    pub confidence: Confidence,
}

/// The part of the preimage structure relevant within a query region.
struct Pieces {
    /// Owned cells meeting the region (not proven empty), with branches at time t.
    cells: Vec<(CellId, Vec<Expr>, Region)>,
    /// Overrides that may meet the region.
    overrides: Vec<(NullSet, Vec<f64>)>,
}

fn pieces(f: &PiecewiseMap, q: &Region, t: f64, density: Option<&Expr>, budget: usize) -> Pieces {
    let cells = f
        .owned_cells()
        .filter_map(|c| {
            let region = q.intersect(&f.cell_region(c));
            match region.certify(density, budget) {
                Certificate::Empty => None,
                _ => Some((c.clone(), f.branch_at_time(c, t), region)),
            }
        })
        .collect();
    let overrides = f
        .overrides()
        .iter()
        .filter_map(|o| {
            let set = o.set.restricted_to(q.base());
            (!set.generators.is_empty()).then(|| (set, o.value.clone()))
        })
        .collect();
    Pieces { cells, overrides }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Evidence {
    Negligible,
    Positive(f64),
    /// A non-negligible override set.
    Atom,
    Undecided,
}

/// Certifies the preimage of a codomain set described per branch by `extra`
/// constraints and, for override values, by `hit`.
fn certify_preimage(
    p: &Pieces,
    s: &Setting<'_>,
    extra: &dyn Fn(&[Expr]) -> Vec<Constraint>,
    hit: &dyn Fn(&[f64]) -> bool,
) -> Evidence {
    for (set, value) in &p.overrides {
        if hit(value) && !s.ideal.contains_null_set(set) {
            return Evidence::Atom;
        }
    }
    let mut undecided = false;
    let mut best = 0.0f64;
    for (_, g, region) in &p.cells {
        let r = region.with_constraints(&extra(g));
        match r.certify(s.density(), s.settings.certify_budget) {
            Certificate::Empty => {}
            Certificate::Positive { lower_bound } => best = best.max(lower_bound),
            Certificate::Undecided => undecided = true,
        }
    }
    if best > 0.0 {
        Evidence::Positive(best)
    } else if undecided {
        Evidence::Undecided
    } else {
        Evidence::Negligible
    }
}

/// Monte Carlo fallback: lower confidence bound of the preimage measure.
fn monte_carlo_positive(
    p: &Pieces,
    s: &Setting<'_>,
    extra: &dyn Fn(&[Expr]) -> Vec<Constraint>,
    salt: &[f64],
) -> (bool, f64) {
    let seed = mix_seed(s.settings.seed, salt);
    let measure = match s.ideal {
        NegligibilityIdeal::Lebesgue => s.measure.clone(),
        NegligibilityIdeal::Generated { .. } => MeasureModel::lebesgue(s.measure.base().clone()),
    };
    let mut best = 0.0f64;
    for (i, (_, g, region)) in p.cells.iter().enumerate() {
        let r = region.with_constraints(&extra(g));
        let Ok(est) = measure_estimate(&r, &measure, s.settings.mc_budget, seed.wrapping_add(i as u64))
        else {
            continue;
        };
        best = best.max(est.lower_confidence_bound());
    }
    (best > 0.0, best.max(0.0))
}

fn mix_seed(seed: u64, salt: &[f64]) -> u64 {
    // splitmix64 over the bit patterns
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in salt {
        h ^= v.to_bits();
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn check_inside(f: &PiecewiseMap, q: &Region) -> Result<(), RangeError> {
    if !f.domain().contains_box(q.base()) {
        return Err(RangeError::NotContained("the map's domain"));
    }
    Ok(())
}

/// Classifies `y` for the map at time `t` restricted to `q`.
pub fn classify_value(
    f: &PiecewiseMap,
    q: &Region,
    t: f64,
    y: &[f64],
    s: &Setting<'_>,
) -> Result<PointClass, RangeError> {
    if y.len() != f.codomain_dim() {
        return Err(RangeError::DimensionMismatch {
            expected: f.codomain_dim(),
            found: y.len(),
        });
    }
    check_inside(f, q)?;
    let p = pieces(f, q, t, s.density(), s.settings.certify_budget);
    Ok(classify_with(&p, y, s))
}

fn classify_with(p: &Pieces, y: &[f64], s: &Setting<'_>) -> PointClass {
    let ball = |rho: f64| {
        move |g: &[Expr]| vec![ball_preimage_constraint(g, y, rho)]
    };
    let hit = |rho: f64| move |v: &[f64]| dist(v, y) < rho;
    let rho_min = s.settings.smallest_radius();
    let at_min = certify_preimage(p, s, &ball(rho_min), &hit(rho_min));
    let good = |radius, measure_lower_bound, confidence| PointClass {
        value: y.to_vec(),
        verdict: Verdict::Good,
        radius,
        measure_lower_bound,
        confidence,
    };
    match at_min {
        Evidence::Negligible => {
            // Preimages shrink with the radius: the first negligible radius from the top is the witness.
            let radius = s
                .settings
                .radii()
                .find(|&rho| certify_preimage(p, s, &ball(rho), &hit(rho)) == Evidence::Negligible)
                .unwrap_or(rho_min);
            PointClass {
                value: y.to_vec(),
                verdict: Verdict::Bad,
                radius,
                measure_lower_bound: 0.0,
                confidence: Confidence::Certified,
            }
        }
        Evidence::Positive(lb) => good(rho_min, lb, Confidence::Certified),
        Evidence::Atom => good(rho_min, 0.0, Confidence::Certified),
        Evidence::Undecided => {
            let (positive, lb) = monte_carlo_positive(p, s, &ball(rho_min), y);
            let confidence = if positive { Confidence::MonteCarlo } else { Confidence::Low };
            good(rho_min, lb, confidence)
        }
    }
}

/// Axis-aligned box in the codomain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CodomainBox {
    pub fn point(v: &[f64]) -> Self {
        CodomainBox {
            lower: v.to_vec(),
            upper: v.to_vec(),
        }
    }

    fn width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }

    fn split(&self) -> (CodomainBox, CodomainBox) {
        let axis = (0..self.lower.len())
            .max_by(|&a, &b| {
                (self.upper[a] - self.lower[a]).total_cmp(&(self.upper[b] - self.lower[b]))
            })
            .unwrap_or(0);
        let mid = 0.5 * (self.lower[axis] + self.upper[axis]);
        let mut left = self.clone();
        left.upper[axis] = mid;
        let mut right = self.clone();
        right.lower[axis] = mid;
        (left, right)
    }

    /// Euclidean distance from `v` to the box.
    pub fn distance(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (l, u))| {
                let d = if x < l { l - x } else if x > u { x - u } else { 0.0 };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.lower.len();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] })
                    .collect()
            })
            .collect()
    }

    fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }
}

/// An essential range (or image closure): exact values plus a box cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssentialRange {
    /// Exactly known values.
    pub points: Vec<Vec<f64>>,
    /// Cover boxes, each meeting the set, jointly covering it.
    pub boxes: Vec<CodomainBox>,
    pub resolution: f64,
    /// False when the depth cap stopped refinement above the resolution.
    pub resolution_reached: bool,
    /// Number of boxes/values kept without a certificate.
    pub low_confidence: usize,
    /// Cells with a non-null intersection with the query region.
    pub contributing_cells: Vec<CellId>,
}

impl EssentialRange {
    pub fn is_exact(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }

    /// Points whose convex hull equals the hull of the set (box corners for boxes).
    pub fn hull_points(&self) -> Vec<Vec<f64>> {
        let mut out = self.points.clone();
        for b in &self.boxes {
            out.extend(b.corners());
        }
        out
    }

    fn distance(&self, v: &[f64]) -> f64 {
        let p = self.points.iter().map(|p| dist(p, v));
        let b = self.boxes.iter().map(|b| b.distance(v));
        p.chain(b).fold(f64::INFINITY, f64::min)
    }

    /// Directed distance from `self` to `other`, probing points and box corners and centers.
    pub fn excess_over(&self, other: &EssentialRange) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        if other.is_empty() {
            return f64::INFINITY;
        }
        let probes = self.points.iter().cloned().chain(
            self.boxes
                .iter()
                .flat_map(|b| b.corners().into_iter().chain(std::iter::once(b.center()))),
        );
        probes.map(|v| other.distance(&v)).fold(0.0, f64::max)
    }

    pub fn hausdorff(&self, other: &EssentialRange) -> f64 {
        self.excess_over(other).max(other.excess_over(self))
    }

    /// `self ⊆ other` within `tol`.
    pub fn contained_in(&self, other: &EssentialRange, tol: f64) -> bool {
        self.excess_over(other) <= tol
    }
}

fn sorted_unique(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v.dedup();
    v
}

/// Keep rule for cover boxes.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Keep {
    /// Positive measure of the preimage (essential range).
    Essential,
    /// Nonempty preimage (image closure).
    Image,
}

fn branch_bounds(g: &[Expr], q: &Region) -> Option<CodomainBox> {
    let b = q.base().intervals();
    let ivs: Option<Vec<Interval>> = g
        .iter()
        .map(|e| e.eval_interval(Interval::point(0.0), &b).ok())
        .collect();
    ivs.map(|ivs| CodomainBox {
        lower: ivs.iter().map(|i| i.lo).collect(),
        upper: ivs.iter().map(|i| i.hi).collect(),
    })
}

fn sampled_bounds(g: &[Expr], q: &Region, seed: u64) -> Option<CodomainBox> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = g.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for _ in 0..4096 {
        let x = q.base().sample(&mut rng);
        if !q.contains(&x) {
            continue;
        }
        for (i, e) in g.iter().enumerate() {
            if let Ok(v) = e.eval(0.0, &x) {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
    }
    if lo.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Pad: sampled bounds are not enclosures.
    for i in 0..n {
        let pad = 0.1 * (hi[i] - lo[i]) + 1e-6;
        lo[i] -= pad;
        hi[i] += pad;
    }
    Some(CodomainBox { lower: lo, upper: hi })
}

/// Adaptive codomain cover of the set selected by `keep`.
fn cover(
    p: &Pieces,
    s: &Setting<'_>,
    keep: Keep,
    extra_points: &[Vec<f64>],
) -> (Vec<CodomainBox>, bool, usize) {
    let h = s.settings.resolution;
    let n = p
        .cells
        .first()
        .map(|c| c.1.len())
        .or_else(|| extra_points.first().map(Vec::len))
        .unwrap_or(0);
    // Root: union of branch enclosures and override values.
    let mut enclosures: Vec<CodomainBox> = Vec::new();
    for (i, (_, g, region)) in p.cells.iter().enumerate() {
        if let Some(b) = branch_bounds(g, region).or_else(|| sampled_bounds(g, region, i as u64)) {
            enclosures.push(b);
        }
    }
    enclosures.extend(extra_points.iter().map(|v| CodomainBox::point(v)));
    // Roots on a global dyadic grid: covers at halved resolutions nest, so
    // hulls of covers over shrinking neighbourhoods shrink as well.
    let leaf = 2f64.powi(h.log2().floor() as i32);
    let mut roots: Vec<(CodomainBox, usize)> = Vec::new();
    for enclosure in &enclosures {
        let mut side = leaf;
        let mut levels = 0usize;
        while enclosure
            .lower
            .iter()
            .zip(&enclosure.upper)
            .any(|(l, u)| u - l > side)
            && levels < 1000
        {
            side *= 2.0;
            levels += 1;
        }
        // At most two aligned cells of this side per axis cover the enclosure.
        let mut boxes = vec![CodomainBox {
            lower: vec![],
            upper: vec![],
        }];
        for i in 0..n {
            let first = (enclosure.lower[i] / side).floor() * side;
            let mut starts = vec![first];
            if first + side < enclosure.upper[i] {
                starts.push(first + side);
            }
            boxes = boxes
                .into_iter()
                .flat_map(|r| {
                    starts.iter().map(move |&st| {
                        let mut b = r.clone();
                        b.lower.push(st);
                        b.upper.push(st + side);
                        b
                    })
                })
                .collect();
        }
        let cap = levels.min(s.settings.max_depth as usize) * n.max(1);
        for b in boxes {
            if !roots.iter().any(|(r, _)| r == &b) {
                roots.push((b, cap));
            }
        }
    }
    if roots.is_empty() {
        return (vec![], true, 0);
    }
    let h = leaf;
    let eps = h * 1e-6;

    let density = match keep {
        Keep::Essential => s.density(),
        Keep::Image => None,
    };
    let evidence = |b: &CodomainBox| -> Evidence {
        let lo: Vec<f64> = b.lower.iter().map(|v| v - eps).collect();
        let hi: Vec<f64> = b.upper.iter().map(|v| v + eps).collect();
        let extra = |g: &[Expr]| box_preimage_constraints(g, &lo, &hi);
        let hit = |v: &[f64]| v.iter().zip(lo.iter().zip(&hi)).all(|(x, (l, u))| l < x && x < u);
        match keep {
            Keep::Essential => certify_preimage(p, s, &extra, &hit),
            Keep::Image => {
                let mut undecided = false;
                for (_, g, region) in &p.cells {
                    match region
                        .with_constraints(&extra(g))
                        .certify(density, s.settings.certify_budget)
                    {
                        Certificate::Positive { lower_bound } => {
                            return Evidence::Positive(lower_bound)
                        }
                        Certificate::Undecided => undecided = true,
                        Certificate::Empty => {}
                    }
                }
                if undecided {
                    Evidence::Undecided
                } else {
                    Evidence::Negligible
                }
            }
        }
    };

    let mut frontier: Vec<(CodomainBox, usize, usize)> = roots.into_iter().map(|(r, cap)| (r, 0, cap)).collect();
    let mut kept = Vec::new();
    let mut reached = true;
    let mut low = 0usize;
    while !frontier.is_empty() {
        let results: Vec<(CodomainBox, usize, usize, Evidence)> = frontier
            .into_par_iter()
            .map(|(b, d, cap)| {
                let ev = evidence(&b);
                (b, d, cap, ev)
            })
            .collect();
        let mut next = Vec::new();
        for (b, depth, cap, ev) in results {
            if ev == Evidence::Negligible {
                continue;
            }
            if b.width() <= h * (1.0 + 1e-9) || depth >= cap {
                if b.width() > h * (1.0 + 1e-9) {
                    reached = false;
                }
                if ev == Evidence::Undecided {
                    let lo: Vec<f64> = b.lower.iter().map(|v| v - eps).collect();
                    let hi: Vec<f64> = b.upper.iter().map(|v| v + eps).collect();
                    let extra = |g: &[Expr]| box_preimage_constraints(g, &lo, &hi);
                    let salt: Vec<f64> = b.lower.iter().chain(&b.upper).cloned().collect();
                    if !monte_carlo_positive(p, s, &extra, &salt).0 {
                        low += 1;
                    }
                }
                kept.push(b);
            } else {
                let (l, r) = b.split();
                next.push((l, depth + 1, cap));
                next.push((r, depth + 1, cap));
            }
        }
        frontier = next;
    }
    kept.sort_by(|a, b| {
        a.lower
            .iter()
            .zip(&b.lower)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                a.upper
                    .iter()
                    .zip(&b.upper)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    kept.dedup();
    (kept, reached, low)
}

fn constant_branches(p: &Pieces) -> Option<Vec<Vec<f64>>> {
    p.cells
        .iter()
        .map(|(_, g, _)| g.iter().map(Expr::constant_value).collect::<Option<Vec<f64>>>())
        .collect()
}

/// Essential range of `f(t, .)` restricted to `q`.
///
/// Piecewise-constant maps take the exact path: candidates are the branch
/// constants of cells meeting `q` plus the override values, each classified.
/// Otherwise the codomain is covered by boxes of width at most `resolution`,
/// keeping a box when the preimage of (a slight enlargement of) it is not
/// negligible.
pub fn essential_range(
    f: &PiecewiseMap,
    q: &Region,
    t: f64,
    s: &Setting<'_>,
) -> Result<EssentialRange, RangeError> {
    if s.settings.resolution <= 0.0 || s.settings.resolution.is_nan() {
        return Err(RangeError::BadResolution(s.settings.resolution));
    }
    check_inside(f, q)?;
    let p = pieces(f, q, t, s.density(), s.settings.certify_budget);
    let contributing_cells = p.cells.iter().map(|c| c.0.clone()).collect();
    let override_values: Vec<Vec<f64>> = p.overrides.iter().map(|o| o.1.clone()).collect();
    if let Some(constants) = constant_branches(&p) {
        let candidates: BTreeSet<Vec<u64>> = constants
            .iter()
            .chain(&override_values)
            .map(|v| v.iter().map(|c| c.to_bits()).collect())
            .collect();
        let classes: Vec<PointClass> = candidates
            .into_iter()
            .map(|bits| bits.into_iter().map(f64::from_bits).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|y| classify_with(&p, y, s))
            .collect();
        let low_confidence = classes
            .iter()
            .filter(|c| c.verdict == Verdict::Good && c.confidence == Confidence::Low)
            .count();
        let points = classes
            .into_iter()
            .filter(|c| c.verdict == Verdict::Good)
            .map(|c| c.value)
            .collect();
        return Ok(EssentialRange {
            points: sorted_unique(points),
            boxes: vec![],
            resolution: s.settings.resolution,
            resolution_reached: true,
            low_confidence,
            contributing_cells,
        });
    }
    let (boxes, resolution_reached, low_confidence) = cover(&p, s, Keep::Essential, &override_values);
    Ok(EssentialRange {
        points: vec![],
        boxes,
        resolution: s.settings.resolution,
        resolution_reached,
        low_confidence,
        contributing_cells,
    })
}

/// A null set whose removal leaves only good values in the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalNullSet {
    pub components: NullSet,
}

/// Switching surfaces and override sets that may meet `q`.
pub fn canonical_null_set(f: &PiecewiseMap, q: &Region) -> CanonicalNullSet {
    let surfaces = NullSet::new(
        f.switches()
            .iter()
            .cloned()
            .map(crate::region::NullGenerator::Surface)
            .collect(),
    );
    CanonicalNullSet {
        components: surfaces.union(&f.override_null_set()).restricted_to(q.base()),
    }
}

/// The canonical null set with generators outside `ideal` removed.
///
/// Under a generated ideal, an override set outside the ideal has a
/// non-negligible preimage, so its value is good and must stay in the image.
pub fn canonical_null_set_in(f: &PiecewiseMap, q: &Region, ideal: &NegligibilityIdeal) -> CanonicalNullSet {
    let full = canonical_null_set(f, q);
    let generators = full
        .components
        .generators
        .into_iter()
        .filter_map(|g| match g {
            crate::region::NullGenerator::Points(ps) => {
                let kept: Vec<Vec<f64>> = ps
                    .into_iter()
                    .filter(|p| ideal.contains_null_set(&NullSet::points(vec![p.clone()])))
                    .collect();
                (!kept.is_empty()).then_some(crate::region::NullGenerator::Points(kept))
            }
            g => ideal
                .contains_null_set(&NullSet::new(vec![g.clone()]))
                .then_some(g),
        })
        .collect();
    CanonicalNullSet {
        components: NullSet::new(generators),
    }
}

/// Outcome of comparing a restriction with the full map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionReport {
    pub restricted: EssentialRange,
    pub full: EssentialRange,
    /// ess.im(f|sub) ⊆ ess.im(f|q) (exactly on exact paths, within 2h otherwise).
    pub range_contained: bool,
    /// N0(q) ∩ sub ⊆ N0(sub), by generator containment.
    pub null_contained: bool,
}

/// Essential range of the restriction to `sub` and both containments against `q`.
pub fn restrict_and_compare(
    f: &PiecewiseMap,
    q: &Region,
    sub: &Region,
    t: f64,
    s: &Setting<'_>,
) -> Result<RestrictionReport, RangeError> {
    check_inside(f, q)?;
    if !q.base().contains_box(sub.base()) || !sampled_subset(sub, q) {
        return Err(RangeError::NotContained("the comparison region"));
    }
    let restricted = essential_range(f, sub, t, s)?;
    let full = essential_range(f, q, t, s)?;
    let tol = if restricted.is_exact() && full.is_exact() {
        0.0
    } else {
        2.0 * s.settings.resolution
    };
    let range_contained = restricted.contained_in(&full, tol);
    let n_q = canonical_null_set_in(f, q, s.ideal).components.restricted_to(sub.base());
    let n_sub = canonical_null_set_in(f, sub, s.ideal).components;
    Ok(RestrictionReport {
        range_contained,
        null_contained: n_q.is_subset_of(&n_sub),
        restricted,
        full,
    })
}

fn sampled_subset(sub: &Region, q: &Region) -> bool {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5b);
    (0..crate::region::VALIDATION_SAMPLES).all(|_| {
        let x = sub.base().sample(&mut rng);
        !sub.contains(&x) || q.contains(&x)
    })
}

/// Cover of the closure of `f(q \ n)`: branch images over the cells meeting
/// `q`, plus override values whose sets are not removed by `n`.
pub fn closure_image_minus_null(
    f: &PiecewiseMap,
    q: &Region,
    n: &NullSet,
    t: f64,
    s: &Setting<'_>,
) -> Result<EssentialRange, RangeError> {
    if s.settings.resolution <= 0.0 || s.settings.resolution.is_nan() {
        return Err(RangeError::BadResolution(s.settings.resolution));
    }
    if !s.ideal.contains_null_set(n) {
        return Err(RangeError::NotNegligible);
    }
    check_inside(f, q)?;
    let p = pieces(f, q, t, None, s.settings.certify_budget);
    let contributing_cells = p.cells.iter().map(|c| c.0.clone()).collect();
    let atoms: Vec<Vec<f64>> = p
        .overrides
        .iter()
        .filter(|(set, _)| !set.is_subset_of(n))
        .map(|(_, v)| v.clone())
        .collect();
    if let Some(constants) = constant_branches(&p) {
        let points = sorted_unique(constants.into_iter().chain(atoms).collect());
        return Ok(EssentialRange {
            points,
            boxes: vec![],
            resolution: s.settings.resolution,
            resolution_reached: true,
            low_confidence: 0,
            contributing_cells,
        });
    }
    let (boxes, resolution_reached, low_confidence) = cover(&p, s, Keep::Image, &[]);
    Ok(EssentialRange {
        points: sorted_unique(atoms),
        boxes,
        resolution: s.settings.resolution,
        resolution_reached,
        low_confidence,
        contributing_cells,
    })
}
