//! Closed convex hulls: exact vertex lists up to dimension 3, support tables above.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HullError {
    #[error("convex hull of an empty point set")]
    Empty,
    #[error("point {index} has length {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
}

/// Hull tolerance used when none is given.
pub const DEFAULT_HULL_TOL: f64 = 1e-6;

const LOW_DISCREPANCY_DIRECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HullRep {
    /// Extreme points; 2D lists are counterclockwise from the lowest-leftmost vertex.
    Vertices { vertices: Vec<Vec<f64>> },
    Support {
        directions: Vec<Vec<f64>>,
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexApprox {
    pub dim: usize,
    pub rep: HullRep,
    pub tol: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(d: &[f64]) -> Vec<f64> {
    let n = norm(d);
    if n == 0.0 {
        d.to_vec()
    } else {
        d.iter().map(|v| v / n).collect()
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// The fixed direction set of a dimension: the 2n signed axes followed by
/// normalized Halton points of `[-1, 1]^n`.
pub fn direction_set(n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * n + LOW_DISCREPANCY_DIRECTIONS);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[i] = s;
            out.push(d);
        }
    }
    if n == 1 {
        return out;
    }
    let mut k = 1u64;
    while out.len() < 2 * n + LOW_DISCREPANCY_DIRECTIONS {
        let p: Vec<f64> = (0..n)
            .map(|i| 2.0 * radical_inverse(k, PRIMES[i % PRIMES.len()] + 2 * (i / PRIMES.len()) as u64) - 1.0)
            .collect();
        k += 1;
        if norm(&p) > 1e-3 {
            out.push(normalized(&p));
        }
    }
    out
}

/// Closest point of `conv(points)` to `target` with its convex weights
/// (Wolfe's minimum-norm-point algorithm on the shifted points).
pub fn nearest_point(points: &[Vec<f64>], target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<Vec<f64>> = points.iter().map(|q| sub(q, target)).collect();
    let scale = p.iter().map(|q| dot(q, q)).fold(0.0, f64::max).max(1e-300);
    let eps = 1e-14 * scale;
    let first = (0..p.len())
        .min_by(|&a, &b| dot(&p[a], &p[a]).total_cmp(&dot(&p[b], &p[b])))
        .expect("nonempty point set");
    let mut set = vec![first];
    let mut lambda = vec![1.0];
    let combo = |set: &[usize], lambda: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; target.len()];
        for (&i, &l) in set.iter().zip(lambda) {
            for (xk, pk) in x.iter_mut().zip(&p[i]) {
                *xk += l * pk;
            }
        }
        x
    };
    for _ in 0..(10 * p.len() + 100) {
        let x = combo(&set, &lambda);
        let xx = dot(&x, &x);
        let j = (0..p.len())
            .min_by(|&a, &b| dot(&x, &p[a]).total_cmp(&dot(&x, &p[b])))
            .unwrap();
        if dot(&x, &p[j]) >= xx - eps || set.contains(&j) {
            break;
        }
        set.push(j);
        lambda.push(0.0);
        loop {
            let mu = affine_minimizer(&set.iter().map(|&i| p[i].as_slice()).collect::<Vec<_>>());
            if mu.iter().all(|&m| m > 1e-15) {
                lambda = mu;
                break;
            }
            let theta = lambda
                .iter()
                .zip(&mu)
                .filter(|(_, &m)| m <= 1e-15)
                .map(|(&l, &m)| l / (l - m))
                .fold(1.0, f64::min);
            for (l, m) in lambda.iter_mut().zip(&mu) {
                *l += theta * (m - *l);
            }
            let keep: Vec<bool> = lambda.iter().map(|&l| l > 1e-15).collect();
            let mut k = 0;
            set.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            lambda.retain(|&l| l > 1e-15);
            let total: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= total);
            if set.len() <= 1 {
                lambda = vec![1.0; set.len()];
                break;
            }
        }
    }
    let x = combo(&set, &lambda);
    let mut weights = vec![0.0; points.len()];
    for (&i, &l) in set.iter().zip(&lambda) {
        weights[i] += l;
    }
    (x.iter().zip(target).map(|(a, b)| a + b).collect(), weights)
}

/// Weights μ (summing to one) minimizing ‖Σ μ_i p_i‖.
fn affine_minimizer(p: &[&[f64]]) -> Vec<f64> {
    let k = p.len();
    let mut m = DMatrix::<f64>::zeros(k + 1, k + 1);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = dot(p[i], p[j]);
        }
        m[(i, k)] = 1.0;
        m[(k, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = solve_linear(m, &rhs).unwrap_or_else(|| DVector::from_element(k + 1, 1.0 / k as f64));
    (0..k).map(|i| sol[i]).collect()
}

/// Solves `m x = rhs`, LU first and SVD (least squares) for singular systems;
/// `None` unless the residual is small.
pub(crate) fn solve_linear(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = m.abs().max() + rhs.abs().max();
    let ok = |x: &DVector<f64>| {
        x.iter().all(|v| v.is_finite())
            && (&m * x - rhs).abs().max() <= 1e-10 * (scale + m.abs().max() * x.abs().max())
    };
    if let Some(x) = m.clone().lu().solve(rhs) {
        if ok(&x) {
            return Some(x);
        }
    }
    let x = m.clone().svd(true, true).solve(rhs, 1e-13 * scale).ok()?;
    ok(&x).then_some(x)
}

fn cross2(o: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear points dropped, result counterclockwise.
fn hull_2d(mut pts: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    pts.sort_by(|a, b| lex_cmp(a, b));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let scale = pts
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1e-300);
    let eps = 1e-14 * scale * scale;
    let mut lower: Vec<Vec<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= eps {
            lower.pop();
        }
        lower.push(p.clone());
    }
    let mut upper: Vec<Vec<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= eps {
            upper.pop();
        }
        upper.push(p.clone());
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() == 2 && lower[0] == lower[1] {
        lower.pop();
    }
    lower
}

/// Orthonormal basis of the affine hull of `pts` around `pts[0]`.
fn affine_basis(pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = pts
        .iter()
        .map(|p| norm(&sub(p, &pts[0])))
        .fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if scale == 0.0 {
        return basis;
    }
    loop {
        // Point farthest from the current affine span.
        let residual = |p: &Vec<f64>| {
            let mut r = sub(p, &pts[0]);
            for b in &basis {
                let c = dot(&r, b);
                r.iter_mut().zip(b).for_each(|(ri, bi)| *ri -= c * bi);
            }
            r
        };
        let best = pts
            .iter()
            .map(residual)
            .max_by(|a, b| norm(a).total_cmp(&norm(b)))
            .unwrap();
        if norm(&best) <= 1e-10 * scale || basis.len() == pts[0].len() {
            return basis;
        }
        basis.push(normalized(&best));
    }
}

fn segment(pts: &[Vec<f64>], dir: &[f64]) -> Vec<Vec<f64>> {
    let lo = pts
        .iter()
        .min_by(|a, b| dot(a, dir).total_cmp(&dot(b, dir)).then(lex_cmp(a, b)))
        .unwrap();
    let hi = pts
        .iter()
        .max_by(|a, b| dot(a, dir).total_cmp(&dot(b, dir)).then(lex_cmp(b, a)))
        .unwrap();
    let mut v = vec![lo.clone(), hi.clone()];
    v.sort_by(|a, b| lex_cmp(a, b));
    v
}

/// Exact hull vertices for dimension ≤ 3.
fn exact_vertices(pts: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = pts[0].len();
    let basis = affine_basis(&pts);
    match basis.len() {
        0 => vec![pts[0].clone()],
        1 => segment(&pts, &basis[0]),
        2 if n == 2 => hull_2d(pts),
        2 => {
            // Planar set in 3D: hull in plane coordinates, mapped back.
            let o = pts[0].clone();
            let coords: Vec<Vec<f64>> = pts
                .iter()
                .map(|p| {
                    let r = sub(p, &o);
                    vec![dot(&r, &basis[0]), dot(&r, &basis[1])]
                })
                .collect();
            let hull = hull_2d(coords.clone());
            hull.iter()
                .map(|h| {
                    let i = coords.iter().position(|c| c == h).unwrap();
                    pts[i].clone()
                })
                .collect()
        }
        _ => extreme_points(pts),
    }
}

/// Points not in the hull of the others (full-dimensional case).
fn extreme_points(mut pts: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    pts.sort_by(|a, b| lex_cmp(a, b));
    pts.dedup();
    let scale = pts
        .iter()
        .map(|p| norm(&sub(p, &pts[0])))
        .fold(0.0, f64::max);
    // Cheap prefilter: points extreme in some fixed direction are vertices.
    let dirs = direction_set(pts[0].len());
    let mut keep = vec![false; pts.len()];
    for d in &dirs {
        let i = (0..pts.len())
            .max_by(|&a, &b| dot(&pts[a], d).total_cmp(&dot(&pts[b], d)))
            .unwrap();
        keep[i] = true;
    }
    let mut out = Vec::new();
    for i in 0..pts.len() {
        if keep[i] {
            out.push(pts[i].clone());
            continue;
        }
        let others: Vec<Vec<f64>> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| p.clone())
            .collect();
        let (q, _) = nearest_point(&others, &pts[i]);
        if norm(&sub(&q, &pts[i])) > 1e-10 * scale {
            out.push(pts[i].clone());
        }
    }
    out
}

/// Closed convex hull of a finite point set.
pub fn convex_hull(points: &[Vec<f64>], tol: f64) -> Result<ConvexApprox, HullError> {
    let first = points.first().ok_or(HullError::Empty)?;
    let n = first.len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != n {
            return Err(HullError::DimensionMismatch {
                index: i,
                expected: n,
                found: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(HullError::NonFinite(i));
        }
    }
    let rep = if n <= 3 {
        HullRep::Vertices {
            vertices: exact_vertices(points.to_vec()),
        }
    } else {
        let directions = direction_set(n);
        let values = directions
            .iter()
            .map(|d| points.iter().map(|p| dot(p, d)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        HullRep::Support { directions, values }
    };
    Ok(ConvexApprox { dim: n, rep, tol })
}

impl ConvexApprox {
    pub fn vertices(&self) -> Option<&[Vec<f64>]> {
        match &self.rep {
            HullRep::Vertices { vertices } => Some(vertices),
            HullRep::Support { .. } => None,
        }
    }

    /// Support function h(d) = max over the set of ⟨v, d⟩, with `d` normalized.
    pub fn support(&self, d: &[f64]) -> f64 {
        let d = normalized(d);
        match &self.rep {
            HullRep::Vertices { vertices } => vertices
                .iter()
                .map(|v| dot(v, &d))
                .fold(f64::NEG_INFINITY, f64::max),
            HullRep::Support { directions, values } => {
                let mut idx: Vec<usize> = (0..directions.len()).collect();
                idx.sort_by(|&a, &b| dot(&directions[b], &d).total_cmp(&dot(&directions[a], &d)));
                idx.iter()
                    .take(3)
                    .map(|&i| values[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Distance from `v` to the set (exact rep), or the largest support
    /// excess over the direction set (support rep).
    pub fn violation(&self, v: &[f64]) -> f64 {
        match &self.rep {
            HullRep::Vertices { vertices } => {
                let (q, _) = nearest_point(vertices, v);
                norm(&sub(&q, v))
            }
            HullRep::Support { directions, values } => directions
                .iter()
                .zip(values)
                .map(|(d, h)| dot(v, d) - h)
                .fold(0.0, f64::max),
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        self.violation(v) <= tol
    }

    /// Symmetric support deviation over the fixed direction set.
    pub fn hausdorff(&self, other: &ConvexApprox) -> f64 {
        direction_set(self.dim)
            .iter()
            .map(|d| (self.support(d) - other.support(d)).abs())
            .fold(0.0, f64::max)
    }

    /// Largest distance between two extreme points (support width for support reps).
    pub fn diameter(&self) -> f64 {
        match &self.rep {
            HullRep::Vertices { vertices } => {
                let mut best = 0.0f64;
                for a in vertices {
                    for b in vertices {
                        best = best.max(norm(&sub(a, b)));
                    }
                }
                best
            }
            HullRep::Support { directions, .. } => directions
                .iter()
                .map(|d| self.support(d) + self.support(&d.iter().map(|v| -v).collect::<Vec<_>>()))
                .fold(0.0, f64::max),
        }
    }

    /// Nearest point of the set to `v` (exact rep only).
    pub fn nearest(&self, v: &[f64]) -> Option<Vec<f64>> {
        self.vertices().map(|vs| nearest_point(vs, v).0)
    }
}
