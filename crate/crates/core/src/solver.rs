//! Filippov solutions of `x' ∈ F(t, x)`, `x(0) = x0`.
//!
//! Inside a cell the branch field is integrated with Dormand–Prince 5(4).
//! Sign changes of the switching functions are localized on the stepper's
//! dense output; at the event the flow either crosses, slides along the
//! surface with the classical Filippov convex combination, or stops when the
//! continuation is not unique. Trajectories are stored as cubic Hermite
//! segments between accepted steps.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filippov::{filippov_set, FilippovError, FilippovMap};
use crate::piecewise::{CellId, MapError, PiecewiseMap, Sign};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("initial state {0:?} is not in the interior of the domain")]
    NotInterior(Vec<f64>),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("tolerances must be positive")]
    BadTolerance,
    #[error("initial state has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("branch magnitude {norm} exceeds the bound {bound} at t = {t}, x = {x:?}")]
    BoundViolated { bound: f64, norm: f64, t: f64, x: Vec<f64> },
    #[error("step size underflow at t = {t}, x = {x:?}")]
    StepUnderflow { t: f64, x: Vec<f64> },
    #[error("{events} events without reaching the horizon (last state t = {t}, x = {x:?})")]
    Zeno { events: usize, t: f64, x: Vec<f64> },
    #[error("switching surface {surface} has a degenerate normal at {x:?}")]
    DegenerateNormal { surface: usize, x: Vec<f64> },
    #[error("no owned cell adjacent to {0:?}")]
    NoCell(Vec<f64>),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Filippov(#[from] FilippovError),
}

/// Maximum number of events before integration is abandoned.
pub const MAX_EVENTS: usize = 10_000;

const TANGENCY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct IVProblem {
    rhs: PiecewiseMap,
    x0: Vec<f64>,
    t_end: f64,
    rtol: f64,
    atol: f64,
    event_tol: f64,
    bound: Option<f64>,
}

impl IVProblem {
    pub fn new(rhs: PiecewiseMap, x0: Vec<f64>, t_end: f64) -> Result<Self, SolveError> {
        if x0.len() != rhs.dim() || rhs.codomain_dim() != rhs.dim() {
            return Err(SolveError::DimensionMismatch {
                expected: rhs.dim(),
                found: x0.len(),
            });
        }
        if !rhs.domain().contains_interior(&x0) {
            return Err(SolveError::NotInterior(x0));
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SolveError::BadHorizon(t_end));
        }
        Ok(IVProblem {
            rhs,
            x0,
            t_end,
            rtol: 1e-8,
            atol: 1e-10,
            event_tol: 1e-10,
            bound: None,
        })
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Result<Self, SolveError> {
        if !(rtol > 0.0 && atol > 0.0) {
            return Err(SolveError::BadTolerance);
        }
        self.rtol = rtol;
        self.atol = atol;
        Ok(self)
    }

    pub fn with_event_tol(mut self, event_tol: f64) -> Result<Self, SolveError> {
        if !(event_tol > 0.0) {
            return Err(SolveError::BadTolerance);
        }
        self.event_tol = event_tol;
        Ok(self)
    }

    /// Requires every branch value to have Euclidean norm at most `m`,
    /// checked at sampled times and states.
    pub fn with_bound(mut self, m: f64, seed: u64) -> Result<Self, SolveError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..crate::region::VALIDATION_SAMPLES {
            let x = self.rhs.domain().sample(&mut rng);
            let t = rng.random::<f64>() * self.t_end;
            let Some(cell) = self.rhs.exact_cell(&x) else { continue };
            if !self.rhs.branches().contains_key(&cell) {
                continue;
            }
            let v = self.rhs.branch_value(&cell, t, &x)?;
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > m {
                return Err(SolveError::BoundViolated { bound: m, norm, t, x });
            }
        }
        self.bound = Some(m);
        Ok(self)
    }

    pub fn rhs(&self) -> &PiecewiseMap {
        &self.rhs
    }

    pub fn rtol(&self) -> f64 {
        self.rtol
    }

    pub fn atol(&self) -> f64 {
        self.atol
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn event_tol(&self) -> f64 {
        self.event_tol
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    DomainExit,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Smooth {
        cell: CellId,
    },
    /// Convex combination of `cells` with `weights`, tangent to `surfaces`.
    Sliding {
        surfaces: Vec<usize>,
        cells: Vec<CellId>,
        weights: Vec<f64>,
    },
    Stopped {
        reason: StopReason,
    },
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Smooth { cell } => format!("smooth({cell})"),
            Mode::Sliding { surfaces, .. } => {
                let s: Vec<String> = surfaces.iter().map(|i| (i + 1).to_string()).collect();
                format!("sliding({})", s.join(","))
            }
            Mode::Stopped { reason } => match reason {
                StopReason::DomainExit => "stopped(domain-exit)".into(),
                StopReason::Ambiguous => "stopped(ambiguous)".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub t: f64,
    pub x: Vec<f64>,
    pub mode: Mode,
}

/// Cubic `c0 + c1 s + c2 s^2 + c3 s^3` in `s = t - t0` on `[t0, t1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub coeffs: [Vec<f64>; 4],
}

impl Segment {
    fn hermite(t0: f64, x0: &[f64], f0: &[f64], t1: f64, x1: &[f64], f1: &[f64]) -> Segment {
        let h = t1 - t0;
        let n = x0.len();
        let mut c2 = vec![0.0; n];
        let mut c3 = vec![0.0; n];
        for i in 0..n {
            let slope = (x1[i] - x0[i]) / h;
            c2[i] = (3.0 * slope - 2.0 * f0[i] - f1[i]) / h;
            c3[i] = (f0[i] + f1[i] - 2.0 * slope) / (h * h);
        }
        Segment {
            t0,
            t1,
            coeffs: [x0.to_vec(), f0.to_vec(), c2, c3],
        }
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let s = t - self.t0;
        let [c0, c1, c2, c3] = &self.coeffs;
        (0..c0.len())
            .map(|i| c0[i] + s * (c1[i] + s * (c2[i] + s * c3[i])))
            .collect()
    }

    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let s = t - self.t0;
        let [c0, c1, c2, c3] = &self.coeffs;
        (0..c0.len())
            .map(|i| c1[i] + s * (2.0 * c2[i] + s * 3.0 * c3[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Crossing,
    SlidingEntry,
    SlidingExit,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    /// Zero-based surface indices.
    pub surfaces: Vec<usize>,
    pub kind: EventKind,
    /// Entry decided on an exact tangency.
    pub tangency: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub nodes: Vec<Node>,
    pub segments: Vec<Segment>,
    pub events: Vec<Event>,
    pub event_tol: f64,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn t_end(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.t)
    }

    pub fn x_end(&self) -> &[f64] {
        &self.nodes.last().expect("trajectory has an initial node").x
    }

    /// Segment whose interval contains `t` (the later one at junctions).
    pub fn segment_at(&self, t: f64) -> Option<&Segment> {
        let k = self.segments.partition_point(|s| s.t0 <= t);
        if k == 0 {
            return None;
        }
        let s = &self.segments[k - 1];
        (t <= s.t1).then_some(s)
    }

    pub fn state_at(&self, t: f64) -> Option<Vec<f64>> {
        if self.segments.is_empty() {
            return (t == self.t_end()).then(|| self.x_end().to_vec());
        }
        self.segment_at(t).map(|s| s.value(t))
    }

    pub fn derivative_at(&self, t: f64) -> Option<Vec<f64>> {
        self.segment_at(t).map(|s| s.derivative(t))
    }

    /// The same trajectory with every state shifted by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Trajectory {
        let add = |x: &[f64]| -> Vec<f64> { x.iter().zip(delta).map(|(a, b)| a + b).collect() };
        let mut out = self.clone();
        for n in &mut out.nodes {
            n.x = add(&n.x);
        }
        for s in &mut out.segments {
            s.coeffs[0] = add(&s.coeffs[0]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Crossing { target: CellId },
    Sliding {
        surfaces: Vec<usize>,
        cells: Vec<CellId>,
        weights: Vec<f64>,
        tangency: bool,
    },
    Ambiguous,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn combine(values: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; values[0].len()];
    for (f, w) in values.iter().zip(weights) {
        for (vi, fi) in v.iter_mut().zip(f) {
            *vi += w * fi;
        }
    }
    v
}

/// Least-norm weights `λ` (summing to one) with `Σ λ_c f_c ⊥ g_i` for all
/// `i`. With `nonneg`, restricted to the simplex by enumerating supports.
pub fn least_norm_tangent(values: &[Vec<f64>], grads: &[Vec<f64>], nonneg: bool) -> Option<Vec<f64>> {
    let m = values.len();
    if m == 0 {
        return None;
    }
    let scale = values.iter().map(|f| norm(f)).fold(1.0, f64::max)
        * grads.iter().map(|g| norm(g)).fold(1.0, f64::max);
    let solve = |support: &[usize]| -> Option<Vec<f64>> {
        let k = support.len();
        let c = 1 + grads.len();
        let mut kkt = DMatrix::<f64>::zeros(k + c, k + c);
        let mut rhs = DVector::<f64>::zeros(k + c);
        for (a, &i) in support.iter().enumerate() {
            for (b, &j) in support.iter().enumerate() {
                kkt[(a, b)] = 2.0 * dot(&values[i], &values[j]);
            }
            kkt[(k, a)] = 1.0;
            kkt[(a, k)] = 1.0;
            for (r, g) in grads.iter().enumerate() {
                let v = dot(&values[i], g);
                kkt[(k + 1 + r, a)] = v;
                kkt[(a, k + 1 + r)] = v;
            }
        }
        rhs[k] = 1.0;
        let sol = crate::hull::solve_linear(kkt, &rhs)?;
        let lambda: Vec<f64> = (0..k).map(|a| sol[a]).collect();
        // Reject least-squares answers of inconsistent systems.
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return None;
        }
        let sel: Vec<Vec<f64>> = support.iter().map(|&i| values[i].clone()).collect();
        let v = combine(&sel, &lambda);
        if grads.iter().any(|g| dot(&v, g).abs() > 1e-9 * scale) {
            return None;
        }
        Some(lambda)
    };
    if !nonneg {
        let all: Vec<usize> = (0..m).collect();
        return solve(&all);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let Some(lambda) = solve(&support) else { continue };
        if lambda.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let mut full = vec![0.0; m];
        for (&i, &l) in support.iter().zip(&lambda) {
            full[i] = l.max(0.0);
        }
        let total: f64 = full.iter().sum();
        full.iter_mut().for_each(|l| *l /= total);
        let obj = norm(&combine(values, &full));
        if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-15) {
            best = Some((obj, full));
        }
    }
    best.map(|(_, w)| w)
}

/// Owned cells matching `signs` (None = wildcard).
fn matching_cells(map: &PiecewiseMap, signs: &[Option<Sign>]) -> Vec<CellId> {
    map.owned_cells()
        .filter(|c| c.0.iter().zip(signs).all(|(s, want)| want.is_none_or(|w| *s == w)))
        .cloned()
        .collect()
}

fn sign_of(v: f64) -> Sign {
    if v < 0.0 {
        Sign::Neg
    } else {
        Sign::Pos
    }
}

fn sign_value(s: Sign) -> f64 {
    match s {
        Sign::Pos => 1.0,
        Sign::Neg => -1.0,
    }
}

struct Local {
    grads: Vec<Vec<f64>>,
    base: Vec<Option<Sign>>,
}

fn local_geometry(map: &PiecewiseMap, x: &[f64], active: &[usize]) -> Result<Local, SolveError> {
    let sig = map.switch_values(x)?;
    let mut grads = Vec::new();
    for &i in active {
        let g = map.switches()[i]
            .gradient(0.0, x)
            .map_err(|_| SolveError::DegenerateNormal {
                surface: i,
                x: x.to_vec(),
            })?;
        if norm(&g) < 1e-9 {
            return Err(SolveError::DegenerateNormal {
                surface: i,
                x: x.to_vec(),
            });
        }
        grads.push(g);
    }
    let base = sig
        .iter()
        .enumerate()
        .map(|(i, &v)| (!active.contains(&i)).then(|| sign_of(v)))
        .collect();
    Ok(Local { grads, base })
}

fn single_rule(
    map: &PiecewiseMap,
    t: f64,
    x: &[f64],
    surface: usize,
    g: &[f64],
    signs: &[Option<Sign>],
) -> Result<Decision, SolveError> {
    let mut s = signs.to_vec();
    s[surface] = Some(Sign::Pos);
    let plus = matching_cells(map, &s).into_iter().next();
    s[surface] = Some(Sign::Neg);
    let minus = matching_cells(map, &s).into_iter().next();
    let (plus, minus) = match (plus, minus) {
        (Some(p), Some(m)) => (p, m),
        (Some(c), None) | (None, Some(c)) => return Ok(Decision::Crossing { target: c }),
        (None, None) => return Err(SolveError::NoCell(x.to_vec())),
    };
    let a = dot(&map.branch_value(&plus, t, x)?, g);
    let b = dot(&map.branch_value(&minus, t, x)?, g);
    let sliding = |alpha: f64, tangency| Decision::Sliding {
        surfaces: vec![surface],
        cells: vec![plus.clone(), minus.clone()],
        weights: vec![alpha, 1.0 - alpha],
        tangency,
    };
    if a.abs() <= TANGENCY_TOL || b.abs() <= TANGENCY_TOL {
        let alpha = if (b - a).abs() <= TANGENCY_TOL { 0.5 } else { (b / (b - a)).clamp(0.0, 1.0) };
        return Ok(sliding(alpha, true));
    }
    if a * b > 0.0 {
        let target = if a > 0.0 { plus } else { minus };
        return Ok(Decision::Crossing { target });
    }
    if a < 0.0 && b > 0.0 {
        return Ok(sliding(b / (b - a), false));
    }
    Ok(Decision::Ambiguous)
}

/// Continuation rule at a point on the `active` switching surfaces.
pub fn decide_at_surface(
    f: &FilippovMap,
    t: f64,
    x: &[f64],
    active: &[usize],
) -> Result<Decision, SolveError> {
    let map = f.rhs();
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    let local = local_geometry(map, x, &active)?;
    if active.len() == 1 {
        return single_rule(map, t, x, active[0], &local.grads[0], &local.base);
    }
    let cells = matching_cells(map, &local.base);
    if cells.is_empty() {
        return Err(SolveError::NoCell(x.to_vec()));
    }
    let values: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| map.branch_value(c, t, x))
        .collect::<Result<_, _>>()?;
    // Entry margin of a velocity into the side `signs` of each active surface.
    let margin = |v: &[f64], cell: &CellId, which: &[usize]| -> f64 {
        which
            .iter()
            .map(|&k| {
                let pos = active.iter().position(|&a| a == k).unwrap();
                sign_value(cell.0[k]) * dot(v, &local.grads[pos]) / norm(&local.grads[pos])
            })
            .fold(f64::INFINITY, f64::min)
    };
    // 1. A cell whose own flow enters it: steepest one.
    let entering = cells
        .iter()
        .zip(&values)
        .map(|(c, v)| (c, margin(v, c, &active)))
        .filter(|(_, m)| *m > TANGENCY_TOL)
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((c, _)) = entering {
        return Ok(Decision::Crossing { target: c.clone() });
    }
    // 2. Sliding on a proper subset while crossing the others.
    let k = active.len();
    for size in 1..k {
        for mask in 0u32..(1 << k) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let sliding: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 1).map(|i| active[i]).collect();
            let crossed: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 0).map(|i| active[i]).collect();
            for side in 0u32..(1 << crossed.len()) {
                let mut signs = local.base.clone();
                for (j, &c) in crossed.iter().enumerate() {
                    signs[c] = Some(if side >> j & 1 == 0 { Sign::Pos } else { Sign::Neg });
                }
                let decision = if size == 1 {
                    let pos = active.iter().position(|&a| a == sliding[0]).unwrap();
                    match single_rule(map, t, x, sliding[0], &local.grads[pos], &signs)? {
                        d @ Decision::Sliding { tangency: false, .. } => d,
                        _ => continue,
                    }
                } else {
                    let sub_cells = matching_cells(map, &signs);
                    let sub_values: Vec<Vec<f64>> = sub_cells
                        .iter()
                        .map(|c| map.branch_value(c, t, x))
                        .collect::<Result<_, _>>()?;
                    let grads: Vec<Vec<f64>> = sliding
                        .iter()
                        .map(|s| local.grads[active.iter().position(|a| a == s).unwrap()].clone())
                        .collect();
                    let Some(weights) = least_norm_tangent(&sub_values, &grads, true) else {
                        continue;
                    };
                    Decision::Sliding {
                        surfaces: sliding.clone(),
                        cells: sub_cells,
                        weights,
                        tangency: false,
                    }
                };
                let Decision::Sliding { cells: sc, weights, .. } = &decision else { unreachable!() };
                let sv: Vec<Vec<f64>> = sc
                    .iter()
                    .map(|c| map.branch_value(c, t, x))
                    .collect::<Result<_, _>>()?;
                let v = combine(&sv, weights);
                if margin(&v, &sc[0], &crossed) > TANGENCY_TOL {
                    return Ok(decision);
                }
            }
        }
    }
    // 3. Least-norm element of the hull in the common tangent space.
    match least_norm_tangent(&values, &local.grads, true) {
        Some(weights) => Ok(Decision::Sliding {
            surfaces: active,
            cells,
            weights,
            tangency: false,
        }),
        None => Ok(Decision::Ambiguous),
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// One Dormand–Prince step with its continuous extension.
struct Step {
    y_new: Vec<f64>,
    err: Vec<f64>,
    rcont: [Vec<f64>; 5],
}

impl Step {
    fn dense(&self, theta: f64) -> Vec<f64> {
        let [r1, r2, r3, r4, r5] = &self.rcont;
        let th1 = 1.0 - theta;
        (0..r1.len())
            .map(|i| r1[i] + theta * (r2[i] + th1 * (r3[i] + theta * (r4[i] + th1 * r5[i]))))
            .collect()
    }
}

fn dp_step(
    field: &dyn Fn(f64, &[f64]) -> Option<Vec<f64>>,
    t: f64,
    y: &[f64],
    k1: &[f64],
    h: f64,
) -> Option<Step> {
    let n = y.len();
    let mut k: Vec<Vec<f64>> = vec![k1.to_vec()];
    for s in 1..7 {
        let ys: Vec<f64> = (0..n)
            .map(|i| y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
            .collect();
        let ks = field(t + C[s] * h, &ys)?;
        if ks.iter().any(|v| !v.is_finite()) {
            return None;
        }
        k.push(ks);
    }
    let y_new: Vec<f64> = (0..n)
        .map(|i| y[i] + h * (0..6).map(|j| A[6][j] * k[j][i]).sum::<f64>())
        .collect();
    let err: Vec<f64> = (0..n).map(|i| h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>()).collect();
    let r1 = y.to_vec();
    let r2: Vec<f64> = (0..n).map(|i| y_new[i] - y[i]).collect();
    let r3: Vec<f64> = (0..n).map(|i| h * k[0][i] - r2[i]).collect();
    let r4: Vec<f64> = (0..n).map(|i| r2[i] - h * k[6][i] - r3[i]).collect();
    let r5: Vec<f64> = (0..n).map(|i| h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>()).collect();
    Some(Step {
        y_new,
        err,
        rcont: [r1, r2, r3, r4, r5],
    })
}

struct Integrator<'a> {
    p: &'a IVProblem,
    f: FilippovMap,
}

/// What ended a step early.
enum Trigger {
    Surfaces(Vec<usize>),
    Exit(CellId),
    Domain,
}

impl Integrator<'_> {
    fn map(&self) -> &PiecewiseMap {
        &self.p.rhs
    }

    fn sliding_weights(&self, t: f64, x: &[f64], surfaces: &[usize], cells: &[CellId], nonneg: bool) -> Option<Vec<f64>> {
        let values: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| self.map().branch_value(c, t, x).ok())
            .collect::<Option<_>>()?;
        let grads: Vec<Vec<f64>> = surfaces
            .iter()
            .map(|&i| self.map().switches()[i].gradient(0.0, x).ok())
            .collect::<Option<_>>()?;
        if surfaces.len() == 1 && cells.len() == 2 {
            let a = dot(&values[0], &grads[0]);
            let b = dot(&values[1], &grads[0]);
            let alpha = if b == a { 0.5 } else { b / (b - a) };
            return Some(vec![alpha, 1.0 - alpha]);
        }
        least_norm_tangent(&values, &grads, nonneg)
    }

    fn field(&self, mode: &Mode, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        match mode {
            Mode::Smooth { cell } => self.map().branch_value(cell, t, x).ok(),
            Mode::Sliding { surfaces, cells, .. } => {
                let w = self.sliding_weights(t, x, surfaces, cells, false)?;
                let values: Vec<Vec<f64>> = cells
                    .iter()
                    .map(|c| self.map().branch_value(c, t, x).ok())
                    .collect::<Option<_>>()?;
                Some(combine(&values, &w))
            }
            Mode::Stopped { .. } => Some(vec![0.0; x.len()]),
        }
    }

    fn project(&self, x: &mut [f64], surfaces: &[usize]) {
        for _ in 0..8 {
            let mut worst = 0.0f64;
            for &i in surfaces {
                let Ok((s, g)) = self.map().switches()[i].value_and_gradient(0.0, x) else {
                    return;
                };
                let gg = dot(&g, &g);
                if gg == 0.0 {
                    return;
                }
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= s * gi / gg;
                }
                worst = worst.max(s.abs() / gg.sqrt());
            }
            if worst <= 1e-15 * (1.0 + norm(x)) {
                return;
            }
        }
    }

    /// Signs the current mode keeps fixed, and the surfaces it slides on.
    fn watched(&self, mode: &Mode) -> (Vec<(usize, f64)>, Vec<usize>) {
        let (cell, sliding) = match mode {
            Mode::Smooth { cell } => (cell, vec![]),
            Mode::Sliding { surfaces, cells, .. } => (&cells[0], surfaces.clone()),
            Mode::Stopped { .. } => return (vec![], vec![]),
        };
        let fixed = cell
            .0
            .iter()
            .enumerate()
            .filter(|(i, _)| !sliding.contains(i))
            .map(|(i, s)| (i, sign_value(*s)))
            .collect();
        (fixed, sliding)
    }

    fn trigger(&self, mode: &Mode, t: f64, x: &[f64]) -> Option<Trigger> {
        if !self.map().domain().contains(x) {
            return Some(Trigger::Domain);
        }
        let (fixed, _) = self.watched(mode);
        let mut crossed = Vec::new();
        for (i, s) in fixed {
            let Ok((v, g)) = self.map().switches()[i].value_and_gradient(0.0, x) else {
                continue;
            };
            if s * v < -0.5 * self.p.event_tol * norm(&g) {
                crossed.push(i);
            }
        }
        if !crossed.is_empty() {
            return Some(Trigger::Surfaces(crossed));
        }
        if let Mode::Sliding { surfaces, cells, .. } = mode {
            match self.sliding_weights(t, x, surfaces, cells, true) {
                Some(w) if surfaces.len() == 1 => {
                    if w[0] > 1.0 {
                        return Some(Trigger::Exit(cells[0].clone()));
                    }
                    if w[0] < 0.0 {
                        return Some(Trigger::Exit(cells[1].clone()));
                    }
                }
                Some(_) => {}
                None => {
                    // Leave along the cell with the largest weight of the unconstrained combination.
                    let w = self.sliding_weights(t, x, surfaces, cells, false).unwrap_or_default();
                    let best = (0..cells.len())
                        .max_by(|&a, &b| w.get(a).copied().unwrap_or(0.0).total_cmp(&w.get(b).copied().unwrap_or(0.0)))
                        .unwrap_or(0);
                    return Some(Trigger::Exit(cells[best].clone()));
                }
            }
        }
        None
    }

    fn node_mode(&self, mode: &Mode, t: f64, x: &[f64]) -> Mode {
        match mode {
            Mode::Sliding { surfaces, cells, weights } => {
                let w = self
                    .sliding_weights(t, x, surfaces, cells, true)
                    .unwrap_or_else(|| weights.clone());
                let mut w: Vec<f64> = w.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    w.iter_mut().for_each(|v| *v /= total);
                }
                Mode::Sliding {
                    surfaces: surfaces.clone(),
                    cells: cells.clone(),
                    weights: w,
                }
            }
            m => m.clone(),
        }
    }

    fn apply(&self, decision: Decision, previous: &Mode, t: f64, active: Vec<usize>, events: &mut Vec<Event>, warnings: &mut Vec<String>) -> Mode {
        match decision {
            Decision::Crossing { target } => {
                events.push(Event {
                    t,
                    surfaces: active,
                    kind: EventKind::Crossing,
                    tangency: false,
                });
                Mode::Smooth { cell: target }
            }
            Decision::Sliding {
                surfaces,
                cells,
                weights,
                tangency,
            } => {
                let kind = match previous {
                    Mode::Sliding { surfaces: s, .. } if *s == surfaces => EventKind::Crossing,
                    _ => EventKind::SlidingEntry,
                };
                if tangency {
                    warnings.push(format!("tangential contact treated as sliding entry at t = {t}"));
                }
                events.push(Event {
                    t,
                    surfaces: active,
                    kind,
                    tangency,
                });
                Mode::Sliding {
                    surfaces,
                    cells,
                    weights,
                }
            }
            Decision::Ambiguous => {
                warnings.push(format!("non-unique continuation (repulsive surface) at t = {t}; stopped"));
                events.push(Event {
                    t,
                    surfaces: active,
                    kind: EventKind::Stop,
                    tangency: false,
                });
                Mode::Stopped {
                    reason: StopReason::Ambiguous,
                }
            }
        }
    }

    fn initial_mode(&self, events: &mut Vec<Event>, warnings: &mut Vec<String>) -> Result<(Mode, Vec<f64>), SolveError> {
        let x0 = self.p.x0.clone();
        let tol = self.map().surface_tol();
        let sig = self.map().switch_values(&x0)?;
        let active: Vec<usize> = (0..sig.len()).filter(|&i| sig[i].abs() <= tol).collect();
        if active.is_empty() {
            let cell = self.map().exact_cell(&x0).filter(|c| self.map().branches().contains_key(c));
            let cell = cell.ok_or_else(|| SolveError::NoCell(x0.clone()))?;
            return Ok((Mode::Smooth { cell }, x0));
        }
        let d = decide_at_surface(&self.f, 0.0, &x0, &active)?;
        let mode = self.apply(d, &Mode::Stopped { reason: StopReason::Ambiguous }, 0.0, active, events, warnings);
        Ok((mode, x0))
    }

    fn run(&self) -> Result<Trajectory, SolveError> {
        let p = self.p;
        let mut events = Vec::new();
        let mut warnings = Vec::new();
        let (mut mode, mut x) = self.initial_mode(&mut events, &mut warnings)?;
        let mut t = 0.0;
        let mut nodes = vec![Node {
            t,
            x: x.clone(),
            mode: self.node_mode(&mode, t, &x),
        }];
        let mut segments = Vec::new();
        let mut h = 1e-3 * p.t_end;
        while t < p.t_end && !matches!(mode, Mode::Stopped { .. }) {
            if events.len() >= MAX_EVENTS {
                return Err(SolveError::Zeno {
                    events: events.len(),
                    t,
                    x,
                });
            }
            let remaining = p.t_end - t;
            let last = h >= remaining;
            h = h.min(remaining);
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(SolveError::StepUnderflow { t, x });
            }
            let field = |s: f64, y: &[f64]| self.field(&mode, s, y);
            let Some(k1) = field(t, &x) else {
                return Err(SolveError::StepUnderflow { t, x });
            };
            let Some(step) = dp_step(&field, t, &x, &k1, h) else {
                h *= 0.25;
                continue;
            };
            let err = (step
                .err
                .iter()
                .zip(x.iter().zip(&step.y_new))
                .map(|(e, (a, b))| {
                    let sc = p.atol + p.rtol * a.abs().max(b.abs());
                    (e / sc).powi(2)
                })
                .sum::<f64>()
                / x.len() as f64)
                .sqrt();
            if err > 1.0 {
                h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                continue;
            }
            // The stored cubic must also reproduce the derivative where its
            // error peaks (it vanishes at the midpoint).
            let Some(k_end) = field(t + h, &step.y_new) else {
                h *= 0.25;
                continue;
            };
            let probe = Segment::hermite(t, &x, &k1, t + h, &step.y_new, &k_end);
            let mut interp_ratio = 0.0f64;
            let mut eval_failed = false;
            for theta in [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()] {
                let Some(f_probe) = field(t + theta * h, &step.dense(theta)) else {
                    eval_failed = true;
                    break;
                };
                let d = probe.derivative(t + theta * h);
                let fscale = f_probe.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let tol = 10.0 * (p.atol + p.rtol * fscale);
                let e = d.iter().zip(&f_probe).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                interp_ratio = interp_ratio.max(e / tol);
            }
            if eval_failed {
                h *= 0.25;
                continue;
            }
            if interp_ratio > 1.0 {
                h *= (0.9 * interp_ratio.powf(-1.0 / 3.0)).clamp(0.2, 0.9);
                continue;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };

            // Scan for events on the dense output.
            let probe_at = |theta: f64| {
                let y = step.dense(theta);
                self.trigger(&mode, t + theta * h, &y).is_some()
            };
            let hit = [0.25, 0.5, 0.75, 1.0].into_iter().find(|&th| probe_at(th));
            match hit {
                None => {
                    let mut y1 = step.y_new.clone();
                    if let Mode::Sliding { surfaces, .. } = &mode {
                        self.project(&mut y1, surfaces);
                    }
                    let t1 = if last { p.t_end } else { t + h };
                    let f1 = self.field(&mode, t1, &y1).unwrap_or(k_end);
                    segments.push(Segment::hermite(t, &x, &k1, t1, &y1, &f1));
                    t = t1;
                    x = y1;
                    mode = self.node_mode(&mode, t, &x);
                    nodes.push(Node {
                        t,
                        x: x.clone(),
                        mode: mode.clone(),
                    });
                    h *= factor;
                }
                Some(th) => {
                    let mut lo = th - 0.25;
                    let mut hi = th;
                    while (hi - lo) * h > p.event_tol {
                        let m = 0.5 * (lo + hi);
                        if probe_at(m) {
                            hi = m;
                        } else {
                            lo = m;
                        }
                    }
                    let te = t + hi * h;
                    let mut xe = step.dense(hi);
                    let trig = self.trigger(&mode, te, &xe).expect("bracket end triggers");
                    let (_, sliding) = self.watched(&mode);
                    let active: Vec<usize> = match &trig {
                        Trigger::Surfaces(c) => {
                            let mut a = sliding.clone();
                            a.extend(c);
                            a.sort_unstable();
                            a
                        }
                        _ => sliding.clone(),
                    };
                    if !matches!(trig, Trigger::Domain) {
                        self.project(&mut xe, &active);
                    }
                    let fe = self.field(&mode, te, &xe).unwrap_or_else(|| k1.clone());
                    if te > t {
                        segments.push(Segment::hermite(t, &x, &k1, te, &xe, &fe));
                    }
                    let previous = mode.clone();
                    mode = match trig {
                        Trigger::Domain => {
                            events.push(Event {
                                t: te,
                                surfaces: vec![],
                                kind: EventKind::Stop,
                                tangency: false,
                            });
                            warnings.push(format!("trajectory left the domain at t = {te}"));
                            Mode::Stopped {
                                reason: StopReason::DomainExit,
                            }
                        }
                        Trigger::Exit(target) => {
                            events.push(Event {
                                t: te,
                                surfaces: sliding,
                                kind: EventKind::SlidingExit,
                                tangency: false,
                            });
                            Mode::Smooth { cell: target }
                        }
                        Trigger::Surfaces(crossed) => {
                            let d = decide_at_surface(&self.f, te, &xe, &active)?;
                            let _ = crossed;
                            self.apply(d, &previous, te, active, &mut events, &mut warnings)
                        }
                    };
                    t = te;
                    x = xe;
                    mode = self.node_mode(&mode, t, &x);
                    nodes.push(Node {
                        t,
                        x: x.clone(),
                        mode: mode.clone(),
                    });
                }
            }
        }
        Ok(Trajectory {
            nodes,
            segments,
            events,
            event_tol: p.event_tol,
            warnings,
        })
    }
}

/// Integrates the problem in the Filippov sense.
pub fn integrate(p: &IVProblem) -> Result<Trajectory, SolveError> {
    let f = FilippovMap::new(p.rhs.clone())?;
    Integrator { p, f }.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub sample_times: Vec<f64>,
    pub violations: Vec<f64>,
    pub max_violation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Checks `x'(t) ∈ F(t, x(t))` at `samples` stratified times away from events.
pub fn verify_inclusion(tr: &Trajectory, f: &FilippovMap, samples: usize, tol: f64) -> ResidualReport {
    let t_end = tr.t_end();
    let window = 10.0 * tr.event_tol;
    let mut times = Vec::with_capacity(samples);
    let mut violations = Vec::with_capacity(samples);
    for k in 0..samples {
        let mut t = t_end * (k as f64 + 0.5) / samples as f64;
        // Step out of event neighbourhoods.
        for _ in 0..4 {
            match tr.events.iter().find(|e| (e.t - t).abs() < window) {
                Some(e) => t = if e.t + 2.0 * window < t_end { e.t + 2.0 * window } else { e.t - 2.0 * window },
                None => break,
            }
        }
        let (Some(x), Some(v)) = (tr.state_at(t), tr.derivative_at(t)) else {
            continue;
        };
        let violation = match filippov_set(f, t, &x) {
            Ok(hull) => hull.violation(&v),
            Err(_) => f64::INFINITY,
        };
        times.push(t);
        violations.push(violation);
    }
    let max_violation = violations.iter().cloned().fold(0.0, f64::max);
    ResidualReport {
        sample_times: times,
        violations,
        max_violation,
        tol,
        pass: max_violation <= tol,
    }
}
