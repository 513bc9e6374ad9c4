mod common;

use common::*;
use filippov_core::filippov::FilippovMap;
use filippov_core::solver::{integrate, verify_inclusion, EventKind, IVProblem, Mode, StopReason};

fn solve(f: filippov_core::piecewise::PiecewiseMap, x0: &[f64], t: f64) -> filippov_core::solver::Trajectory {
    integrate(&IVProblem::new(f, x0.to_vec(), t).unwrap()).unwrap()
}

#[test]
fn dry_friction_sticks_at_two() {
    let tr = solve(dry_friction(), &[1.0], 4.0);
    let entry = tr.events.iter().find(|e| e.kind == EventKind::SlidingEntry).unwrap();
    assert!((entry.t - 2.0).abs() <= 1e-8, "{}", entry.t);
    let last = tr.nodes.last().unwrap();
    match &last.mode {
        Mode::Sliding { weights, .. } => {
            assert!((weights[0] - 0.75).abs() <= 1e-9);
            assert!((weights[1] - 0.25).abs() <= 1e-9);
        }
        m => panic!("{m:?}"),
    }
    assert!(last.x[0].abs() <= 1e-10);
}

#[test]
fn relay_oscillator_conserves_energy() {
    let tr = solve(relay(), &[1.0, 0.0], 8.0);
    assert!(tr.events.iter().all(|e| e.kind == EventKind::Crossing));
    assert!(tr.events.len() >= 2);
    for n in &tr.nodes {
        let energy = 0.5 * n.x[1] * n.x[1] + n.x[0].abs();
        assert!((energy - 1.0).abs() <= 1e-6, "t = {}: {energy}", n.t);
    }
    assert_eq!(tr.t_end(), 8.0);
}

#[test]
fn sliding_nodes_stay_on_surface_with_convex_weights() {
    for (f, x0) in [(tilted(), vec![-1.0, 1.0]), (neg_sign(), vec![1.5])] {
        let switches = f.switches().to_vec();
        let tr = solve(f, &x0, 3.0);
        let mut slid = false;
        for n in &tr.nodes {
            if let Mode::Sliding { surfaces, weights, .. } = &n.mode {
                slid = true;
                let sum: f64 = weights.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(weights.iter().all(|w| (0.0..=1.0).contains(w)));
                for &i in surfaces {
                    assert!(switches[i].eval(0.0, &n.x).unwrap().abs() <= 1e-9);
                }
            }
        }
        assert!(slid);
    }
}

#[test]
fn corner_is_reached_and_held() {
    let tr = solve(corner(), &[1.0, 0.5], 3.0);
    let x = tr.x_end();
    assert!(x[0].abs() <= 1e-8 && x[1].abs() <= 1e-8, "{x:?}");
    let f = FilippovMap::new(corner()).unwrap();
    assert!(verify_inclusion(&tr, &f, 300, 1e-6).pass);
}

#[test]
fn repulsive_start_stops_ambiguous() {
    let f = map(&[-1.0], &[1.0], &["x1"], &[("+", &["1"]), ("-", &["-1"])]);
    let tr = solve(f, &[0.0], 1.0);
    assert_eq!(
        tr.nodes.last().unwrap().mode,
        Mode::Stopped {
            reason: StopReason::Ambiguous
        }
    );
    assert!(!tr.warnings.is_empty());
}

#[test]
fn domain_exit_is_reported() {
    let f = map(&[-1.0], &[1.0], &[], &[("", &["1"])]);
    let tr = solve(f, &[0.0], 5.0);
    assert!((tr.t_end() - 1.0).abs() <= 1e-9);
    assert_eq!(
        tr.nodes.last().unwrap().mode,
        Mode::Stopped {
            reason: StopReason::DomainExit
        }
    );
}

#[test]
fn verification_passes_on_corpus_and_catches_corruption() {
    let cases = [
        (neg_sign(), vec![1.0], 2.0),
        (dry_friction(), vec![1.0], 4.0),
        (relay(), vec![1.0, 0.0], 8.0),
        (tilted(), vec![-1.0, 1.0], 3.0),
        (linear(), vec![1.0, -0.5], 2.0),
    ];
    for (f, x0, t) in cases {
        let fm = FilippovMap::new(f.clone()).unwrap();
        let tr = solve(f, &x0, t);
        let rep = verify_inclusion(&tr, &fm, 500, 1e-6);
        assert!(rep.pass, "case {x0:?}: max violation {} at {:?}", rep.max_violation, rep.sample_times[rep.violations.iter().position(|v| *v == rep.max_violation).unwrap()]);
    }
    let fm = FilippovMap::new(neg_sign()).unwrap();
    let tr = solve(neg_sign(), &[1.0], 2.0);
    let bad = verify_inclusion(&tr.shifted(&[0.1]), &fm, 500, 1e-6);
    assert!(!bad.pass && bad.max_violation > 0.05);
}

#[test]
fn null_overrides_leave_trajectories_bit_identical() {
    let base = solve(relay(), &[1.0, 0.0], 8.0);
    let modified = solve(with_point_override(&relay(), &[0.0, -1.0], &[99.0, 99.0]), &[1.0, 0.0], 8.0);
    assert_eq!(base, modified);
    let fm = FilippovMap::new(with_point_override(&neg_sign(), &[0.0], &[99.0])).unwrap();
    let tr = solve(neg_sign(), &[1.0], 2.0);
    assert!(verify_inclusion(&tr, &fm, 500, 1e-6).pass);
}

#[test]
fn halving_tolerances_barely_moves_the_endpoint() {
    for (f, x0, t) in [
        (relay(), vec![1.0, 0.0], 8.0),
        (tilted(), vec![-1.0, 1.0], 3.0),
        (linear(), vec![1.0, -0.5], 2.0),
    ] {
        let a = integrate(&IVProblem::new(f.clone(), x0.clone(), t).unwrap()).unwrap();
        let b = integrate(
            &IVProblem::new(f, x0, t)
                .unwrap()
                .with_tolerances(0.5e-8, 0.5e-10)
                .unwrap(),
        )
        .unwrap();
        let d = a
            .x_end()
            .iter()
            .zip(b.x_end())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(d <= 10.0 * 1e-8, "{d}");
    }
}

#[test]
fn trajectory_is_continuous_at_nodes() {
    let tr = solve(tilted(), &[-1.0, 1.0], 3.0);
    for w in tr.segments.windows(2) {
        let end = w[0].value(w[0].t1);
        let start = w[1].value(w[1].t0);
        for (a, b) in end.iter().zip(&start) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
    for w in tr.nodes.windows(2) {
        assert!(w[0].t < w[1].t);
    }
    assert_eq!(tr.nodes[0].x, vec![-1.0, 1.0]);
}

#[test]
fn bound_check_rejects_large_branches() {
    let p = IVProblem::new(relay(), vec![1.0, 0.0], 1.0).unwrap();
    assert!(p.clone().with_bound(10.0, 1).is_ok());
    assert!(p.with_bound(1.0, 1).is_err());
}
