//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use common::*;
use filippov_core::essrange::{
    canonical_null_set, canonical_null_set_in, closure_image_minus_null, essential_range, restrict_and_compare,
    EssentialRange, RangeSettings, Setting,
};
use filippov_core::expr::Expr;
use filippov_core::filippov::{filippov_set, filippov_set_generic, singleton_check, FilippovMap};
use filippov_core::piecewise::{Override, PiecewiseMap};
use filippov_core::region::{
    ball_constraint, measure_estimate, DomainBox, MeasureModel, NegligibilityIdeal, NullGenerator, NullSet, Region,
};
use filippov_core::solver::{integrate, verify_inclusion, EventKind, IVProblem, Mode, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus() -> Vec<(&'static str, PiecewiseMap)> {
    vec![
        ("neg-sign", neg_sign()),
        ("dry-friction", dry_friction()),
        ("relay", relay()),
        ("tilted", tilted()),
        ("corner", corner()),
    ]
}

/// Region used for range queries: the domain, shrunk for maps with
/// state-dependent branches to keep covers small.
fn query_region(f: &PiecewiseMap) -> Region {
    let d = f.domain();
    if f.dim() == 1 {
        return Region::full(d.clone());
    }
    Region::full(DomainBox::new(vec![-0.5; f.dim()], vec![0.5; f.dim()]).unwrap())
}

fn lebesgue(f: &PiecewiseMap) -> (NegligibilityIdeal, MeasureModel) {
    (NegligibilityIdeal::Lebesgue, MeasureModel::lebesgue(f.domain().clone()))
}

fn settings(resolution: f64) -> RangeSettings {
    RangeSettings {
        resolution,
        ..RangeSettings::default()
    }
}

fn range(f: &PiecewiseMap, q: &Region, ideal: &NegligibilityIdeal, m: &MeasureModel, s: &RangeSettings) -> EssentialRange {
    essential_range(
        f,
        q,
        0.0,
        &Setting {
            ideal,
            measure: m,
            settings: s,
        },
    )
    .unwrap()
}

fn random_point(d: &DomainBox, rng: &mut ChaCha8Rng) -> Vec<f64> {
    d.sample(rng)
}

/// A random null set: a point cloud, an axis-aligned hyperplane or a flat box.
fn random_null_set(f: &PiecewiseMap, rng: &mut ChaCha8Rng, kind: usize) -> NullSet {
    let d = f.domain();
    let m = f.dim();
    match kind % 3 {
        0 => NullSet::points((0..3).map(|_| random_point(d, rng)).collect()),
        1 => {
            let c = rng.random_range(d.lower()[0] * 0.9..d.upper()[0] * 0.9);
            NullSet::surface(Expr::parse(&format!("x1 - {c}"), m).unwrap())
        }
        _ => {
            let mut lo = random_point(d, rng);
            let mut hi: Vec<f64> = lo.iter().zip(d.upper()).map(|(l, u)| l + 0.3 * (u - l)).collect();
            lo[0] = hi[0];
            hi[0] = lo[0];
            NullSet::new(vec![NullGenerator::degenerate_box(lo, hi).unwrap()])
        }
    }
}

fn with_null_override(f: &PiecewiseMap, set: NullSet, rng: &mut ChaCha8Rng) -> PiecewiseMap {
    let value = (0..f.codomain_dim()).map(|_| rng.random_range(-50.0..50.0)).collect();
    f.clone().with_override(Override { set, value }).unwrap()
}

/// Points on every switching surface (at the origin for the corpus) plus random ones.
fn probe_points(f: &PiecewiseMap, rng: &mut ChaCha8Rng, random: usize) -> Vec<Vec<f64>> {
    let m = f.dim();
    let mut pts = vec![vec![0.0; m]];
    if m == 2 {
        pts.push(vec![0.0, 0.7]);
        pts.push(vec![0.5, 0.15]);
    }
    pts.extend((0..random).map(|_| {
        let d = f.domain();
        let shrunk = DomainBox::new(d.lower().iter().map(|v| v * 0.9).collect(), d.upper().iter().map(|v| v * 0.9).collect()).unwrap();
        shrunk.sample(rng)
    }));
    pts
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = settings(1e-3);
    let mut checks = 0;
    for (name, f) in corpus() {
        let (ideal, m) = lebesgue(&f);
        let q = query_region(&f);
        let base = range(&f, &q, &ideal, &m, &s);
        let fm = FilippovMap::new(f.clone()).unwrap();
        let probes = probe_points(&f, &mut rng, 10);
        for k in 0..3 {
            let set = random_null_set(&f, &mut rng, k);
            let g = with_null_override(&f, set, &mut rng);
            let other = range(&g, &q, &ideal, &m, &s);
            if base.is_exact() {
                ensure(base.points == other.points, || format!("{name}: exact ranges differ"))?;
            } else {
                let d = base.hausdorff(&other);
                ensure(d <= 2.0 * s.resolution, || format!("{name}: covers differ by {d}"))?;
            }
            let gm = FilippovMap::new(g).unwrap();
            for x in &probes {
                ensure(filippov_set(&fm, 0.0, x).unwrap() == filippov_set(&gm, 0.0, x).unwrap(), || {
                    format!("{name}: fast sets differ at {x:?}")
                })?;
                checks += 1;
            }
            let x = &probes[0];
            let a = filippov_set_generic(&fm, 0.0, x).unwrap().hull;
            let b = filippov_set_generic(&gm, 0.0, x).unwrap().hull;
            let d = a.hausdorff(&b);
            ensure(d <= 2.0 * H, || format!("{name}: generic hulls differ by {d} at {x:?}"))?;
        }
    }
    Ok(format!("5 maps x 3 overrides, {checks} fast-path comparisons"))
}

fn override_corpus() -> Vec<(&'static str, PiecewiseMap, Vec<f64>)> {
    corpus()
        .into_iter()
        .map(|(name, f)| {
            let v = vec![99.0; f.codomain_dim()];
            let g = with_point_override(&f, &vec![0.0; f.dim()], &v);
            (name, g, v)
        })
        .collect()
}

fn intersection_instance(maps: Vec<(&'static str, PiecewiseMap, Vec<f64>)>, ideal_for: impl Fn(&PiecewiseMap) -> NegligibilityIdeal) -> Outcome {
    let s = settings(1e-3);
    for (name, f, value) in &maps {
        let ideal = ideal_for(f);
        let m = MeasureModel::lebesgue(f.domain().clone());
        let q = query_region(f);
        let setting = Setting {
            ideal: &ideal,
            measure: &m,
            settings: &s,
        };
        let ess = essential_range(f, &q, 0.0, &setting).unwrap();
        let n0 = canonical_null_set_in(f, &q, &ideal).components;
        let cl = closure_image_minus_null(f, &q, &n0, 0.0, &setting).unwrap();
        let d = ess.hausdorff(&cl);
        ensure(d <= 2.0 * s.resolution, || format!("{name}: canonical removal differs by {d}"))?;
        let all = closure_image_minus_null(f, &q, &NullSet::empty(), 0.0, &setting).unwrap();
        ensure(ess.contained_in(&all, 2.0 * s.resolution), || format!("{name}: empty removal is not a superset"))?;
        ensure(all.points.contains(value), || format!("{name}: override value missing without removal"))?;
        ensure(!ess.points.contains(value), || format!("{name}: override value is essential"))?;
    }
    Ok(format!("{} maps", maps.len()))
}

fn criterion_2() -> Outcome {
    intersection_instance(override_corpus(), |_| NegligibilityIdeal::Lebesgue)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut maps = corpus();
    maps.push(("linear", linear()));
    let mut total = 0;
    for (name, f) in maps {
        let fm = FilippovMap::new(f.clone()).unwrap();
        let mut done = 0;
        while done < 100 {
            let x = random_point(f.domain(), &mut rng);
            if !f.is_continuous_at(0.0, &x, 1e-12).unwrap() {
                continue;
            }
            let (single, value) = singleton_check(&fm, 0.0, &x, 1e-6).unwrap();
            ensure(single, || format!("{name}: not a singleton at {x:?}"))?;
            let direct = f.eval_raw(0.0, &x).unwrap();
            let err = value.unwrap().iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(err <= 1e-9, || format!("{name}: value off by {err} at {x:?}"))?;
            done += 1;
        }
        total += done;
    }
    Ok(format!("{total} continuity points"))
}

fn criterion_4() -> Outcome {
    let f = neg_sign();
    // Oracle: dense sampling over shrinking balls with the surface removed.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..10 {
        let r = 0.1 * 0.5f64.powi(k);
        let (mut l, mut h) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..2000 {
            let x = rng.random_range(-r..r);
            if x == 0.0 {
                continue;
            }
            let v = f.eval_raw(0.0, &[x]).unwrap()[0];
            l = l.min(v);
            h = h.max(v);
        }
        (lo, hi) = (l, h);
    }
    let fm = FilippovMap::new(f).unwrap();
    let fast = filippov_set(&fm, 0.0, &[0.0]).unwrap();
    let v = fast.vertices().unwrap();
    ensure(v.len() == 2, || format!("fast vertices {v:?}"))?;
    let fast_err = (v[0][0] - lo).abs().max((v[1][0] - hi).abs());
    ensure(fast_err <= 1e-9, || format!("fast endpoints off by {fast_err}"))?;
    let g = filippov_set_generic(&fm, 0.0, &[0.0]).unwrap();
    let gv = g.hull.vertices().unwrap();
    let gen_err = (gv[0][0] - lo).abs().max((gv[gv.len() - 1][0] - hi).abs());
    ensure(gen_err <= 1e-6, || format!("generic endpoints off by {gen_err}"))?;
    Ok(format!("oracle [{lo}, {hi}], fast error {fast_err:.1e}, generic error {gen_err:.1e}"))
}

fn solve(f: PiecewiseMap, x0: &[f64], t: f64) -> Trajectory {
    integrate(&IVProblem::new(f, x0.to_vec(), t).unwrap()).unwrap()
}

fn criterion_5() -> Outcome {
    let a = solve(neg_sign(), &[1.0], 2.0);
    let x2 = a.x_end()[0];
    ensure(x2.abs() <= 1e-8 && a.t_end() == 2.0, || format!("sign map x(2) = {x2}"))?;

    let b = solve(dry_friction(), &[1.0], 4.0);
    let entry = b
        .events
        .iter()
        .find(|e| e.kind == EventKind::SlidingEntry)
        .ok_or("dry friction never sticks")?;
    ensure((entry.t - 2.0).abs() <= 1e-8, || format!("sticking time {}", entry.t))?;
    match &b.nodes.last().unwrap().mode {
        Mode::Sliding { weights, .. } => ensure(
            (weights[0] - 0.75).abs() <= 1e-9 && (weights[1] - 0.25).abs() <= 1e-9,
            || format!("weights {weights:?}"),
        )?,
        m => return Err(format!("dry friction ends in {m:?}")),
    }

    let c = solve(relay(), &[1.0, 0.0], 8.0);
    let drift = c
        .nodes
        .iter()
        .map(|n| (0.5 * n.x[1] * n.x[1] + n.x[0].abs() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(drift <= 1e-6 && c.t_end() == 8.0, || format!("relay energy drift {drift}"))?;
    Ok(format!("|x(2)| = {:.1e}, sticking at {}, relay drift {drift:.1e}", x2.abs(), entry.t))
}

fn solver_cases() -> Vec<(&'static str, PiecewiseMap, Vec<f64>, f64)> {
    vec![
        ("neg-sign", neg_sign(), vec![1.0], 2.0),
        ("dry-friction", dry_friction(), vec![1.0], 4.0),
        ("relay", relay(), vec![1.0, 0.0], 8.0),
        ("tilted", tilted(), vec![-1.0, 1.0], 3.0),
        ("corner", corner(), vec![1.0, 0.5], 3.0),
        ("linear", linear(), vec![1.0, -0.5], 2.0),
    ]
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, f, x0, t) in solver_cases() {
        let fm = FilippovMap::new(f.clone()).unwrap();
        let tr = solve(f, &x0, t);
        let rep = verify_inclusion(&tr, &fm, 500, 1e-6);
        ensure(rep.pass, || format!("{name}: max violation {}", rep.max_violation))?;
        worst = worst.max(rep.max_violation);
    }
    let fm = FilippovMap::new(neg_sign()).unwrap();
    let bad = verify_inclusion(&solve(neg_sign(), &[1.0], 2.0).shifted(&[0.1]), &fm, 500, 1e-6);
    ensure(!bad.pass && bad.max_violation > 0.05, || format!("corrupted trajectory violation {}", bad.max_violation))?;
    Ok(format!("6 trajectories, worst violation {worst:.1e}; corrupted {:.3}", bad.max_violation))
}

fn criterion_7() -> Outcome {
    let s = settings(1e-3);
    let mut exact = 0;
    for (name, f) in corpus() {
        let (ideal, m) = lebesgue(&f);
        let setting = Setting {
            ideal: &ideal,
            measure: &m,
            settings: &s,
        };
        let q = query_region(&f);
        let (lo, hi) = (q.base().lower().to_vec(), q.base().upper().to_vec());
        let frac = |a: f64, b: f64| -> DomainBox {
            DomainBox::new(
                lo.iter().zip(&hi).map(|(l, h)| l + a * (h - l)).collect(),
                lo.iter().zip(&hi).map(|(l, h)| l + b * (h - l)).collect(),
            )
            .unwrap()
        };
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let radius = 0.3 * (hi[0] - lo[0]);
        let subs = [
            Region::full(frac(0.1, 0.45)),
            Region::full(frac(0.3, 0.9)),
            Region::cell(q.base().clone(), vec![ball_constraint(&center, radius)]).unwrap(),
        ];
        for (k, sub) in subs.iter().enumerate() {
            let rep = restrict_and_compare(&f, &q, sub, 0.0, &setting).map_err(|e| format!("{name}: {e}"))?;
            ensure(rep.range_contained, || format!("{name} sub {k}: range not contained"))?;
            ensure(rep.null_contained, || format!("{name} sub {k}: null set not contained"))?;
            if rep.restricted.is_exact() && rep.full.is_exact() {
                exact += 1;
            }
        }
    }
    Ok(format!("15 restrictions, {exact} on exact paths"))
}

fn criterion_8() -> Outcome {
    let h = 1e-3;
    let f = map(&[-1.0], &[1.0], &[], &[("", &["x1"])]);
    let density = Expr::parse("max(0, min(1, 1000*min(x1, 1 - x1)))", 1).unwrap();
    let m = MeasureModel::with_density(f.domain().clone(), density, 0).unwrap();
    let ideal = NegligibilityIdeal::Lebesgue;
    let er = range(&f, &Region::full(f.domain().clone()), &ideal, &m, &settings(h));
    ensure(!er.boxes.is_empty(), || "empty cover".into())?;
    let mut boxes: Vec<(f64, f64)> = er.boxes.iter().map(|b| (b.lower[0], b.upper[0])).collect();
    boxes.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Hausdorff distance between the union of the cover and [0, 1].
    let mut excess: f64 = 0.0;
    for &(l, u) in &boxes {
        excess = excess.max(-l).max(u - 1.0);
    }
    let mut gap: f64 = boxes[0].0.max(0.0) - 0.0;
    let mut reach = boxes[0].1;
    for &(l, u) in &boxes[1..] {
        if l > reach {
            gap = gap.max(0.5 * (l - reach));
        }
        reach = reach.max(u);
    }
    gap = gap.max(1.0 - reach);
    let d = excess.max(gap);
    ensure(d <= h, || format!("Hausdorff distance {d}"))?;
    Ok(format!("{} boxes, Hausdorff distance {d:.2e}", boxes.len()))
}

fn criterion_9() -> Outcome {
    let maps: Vec<_> = override_corpus().into_iter().take(3).collect();
    intersection_instance(maps, |f| {
        let mut gens = canonical_null_set(f, &Region::full(f.domain().clone())).components.generators;
        gens.retain(|g| matches!(g, NullGenerator::Points(_)));
        gens.push(NullGenerator::Surface(f.switches()[0].clone()));
        NegligibilityIdeal::generated(gens)
    })
}

/// Serialized outputs of a representative slice of the suite.
fn payloads() -> Vec<String> {
    let mut out = Vec::new();
    let f = tilted();
    let (ideal, m) = lebesgue(&f);
    let s = RangeSettings {
        seed: 17,
        ..settings(1e-2)
    };
    out.push(serde_json::to_string(&range(&f, &query_region(&f), &ideal, &m, &s)).unwrap());
    let fm = FilippovMap::new(f.clone()).unwrap();
    out.push(serde_json::to_string(&filippov_set_generic(&fm, 0.0, &[0.0, 0.0]).unwrap()).unwrap());
    for (_, f, x0, t) in solver_cases() {
        let fm = FilippovMap::new(f.clone()).unwrap();
        let tr = solve(f, &x0, t);
        out.push(serde_json::to_string(&tr).unwrap());
        out.push(serde_json::to_string(&verify_inclusion(&tr, &fm, 100, 1e-6)).unwrap());
    }
    let base = DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let disc = Region::cell(base.clone(), vec![ball_constraint(&[0.0, 0.0], 0.7)]).unwrap();
    out.push(serde_json::to_string(&measure_estimate(&disc, &MeasureModel::lebesgue(base), 20_000, 5).unwrap()).unwrap());
    out
}

fn criterion_10() -> Outcome {
    let a = payloads();
    let b = payloads();
    ensure(a == b, || "payloads differ between runs".into())?;
    let bytes: usize = a.iter().map(String::len).sum();
    Ok(format!("{} payloads, {bytes} bytes identical", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("null-modification invariance", criterion_1),
        ("essential range equals the intersection instance", criterion_2),
        ("singleton collapse at continuity points", criterion_3),
        ("sign-map Filippov set", criterion_4),
        ("solver closed forms", criterion_5),
        ("inclusion verification", criterion_6),
        ("restriction containments", criterion_7),
        ("support of a density", criterion_8),
        ("generated-ideal variant", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
}
