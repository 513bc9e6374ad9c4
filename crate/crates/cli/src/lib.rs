//! Command implementations behind the `filippov` binary.

pub mod problem;

use std::time::Instant;

use filippov_core::essrange::{canonical_null_set_in, essential_range, RangeSettings, Setting};
use filippov_core::filippov::{filippov_set, filippov_set_generic, FilippovMap};
use filippov_core::region::Region;
use filippov_core::solver::{integrate, verify_inclusion, IVProblem, Mode, StopReason, Trajectory};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::problem::{LoadError, Problem, QuerySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn config(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub results: Value,
    pub warnings: Vec<String>,
    pub wall_time_ms: f64,
}

impl RunReport {
    /// The report without its timing, which is the only nondeterministic field.
    pub fn payload(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("reports serialize");
        v.as_object_mut().expect("object").remove("wall_time_ms");
        v
    }
}

/// Overrides from the command line; `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    /// Seed used when neither the flag nor the file sets one.
    pub default_seed: Option<u64>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub event_tol: Option<f64>,
    pub hull_tol: Option<f64>,
    pub resolution: Option<f64>,
    pub query: Option<String>,
}

/// Result of a command: the report and the exit status it implies.
pub struct Outcome {
    pub report: RunReport,
    pub exit: i32,
    /// Set by `solve`.
    pub trajectory: Option<Trajectory>,
}

struct Run<'a> {
    problem: Problem,
    opts: &'a Options,
    seed: u64,
    warnings: Vec<String>,
    start: Instant,
}

impl<'a> Run<'a> {
    fn load(path: &str, opts: &'a Options) -> Result<Self, CliError> {
        let start = Instant::now();
        let problem = Problem::load(path)?;
        let seed = opts.seed.or(problem.file.seed).or(opts.default_seed).unwrap_or(0);
        Ok(Run {
            problem,
            opts,
            seed,
            warnings: Vec::new(),
            start,
        })
    }

    fn warn(&mut self, w: String) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }

    fn query(&self, kind: &str) -> Result<Option<&QuerySpec>, CliError> {
        let Some(name) = &self.opts.query else {
            return Ok(self.problem.file.queries.iter().find(|q| q.kind() == kind));
        };
        match self.problem.file.query(name) {
            Some(q) if q.kind() == kind => Ok(Some(q)),
            Some(q) => Err(config(format!("query `{name}` is a {} query, not {kind}", q.kind()))),
            None => Err(config(format!("unknown query `{name}`"))),
        }
    }

    fn filippov_map(&self) -> Result<FilippovMap, CliError> {
        let mut f = FilippovMap::new(self.problem.map.clone())
            .map_err(config)?
            .with_ideal(self.problem.ideal.clone())
            .with_measure(self.problem.measure.clone())
            .with_range_settings(RangeSettings {
                seed: self.seed,
                ..RangeSettings::default()
            });
        if let Some(h) = self.opts.hull_tol {
            f = f.with_hull_tol(h);
        }
        Ok(f)
    }

    fn finish(self, command: &str, results: Value, exit: i32, trajectory: Option<Trajectory>) -> Outcome {
        Outcome {
            report: RunReport {
                command: command.to_string(),
                config_hash: self.problem.file.config_hash(),
                seed: self.seed,
                results,
                warnings: self.warnings,
                wall_time_ms: self.start.elapsed().as_secs_f64() * 1e3,
            },
            exit,
            trajectory,
        }
    }
}

pub fn cmd_check(path: &str, opts: &Options) -> Result<Outcome, CliError> {
    let run = Run::load(path, opts)?;
    let f = &run.problem.map;
    let results = json!({
        "valid": true,
        "dims": { "m": f.dim(), "n": f.codomain_dim() },
        "switches": f.switches().len(),
        "cells": f.owned_cells().map(|c| c.to_string()).collect::<Vec<_>>(),
        "overrides": f.overrides().len(),
        "queries": run.problem.file.queries.iter().map(|q| json!({"name": q.name(), "kind": q.kind()})).collect::<Vec<_>>(),
    });
    Ok(run.finish("check", results, EXIT_OK, None))
}

pub fn cmd_ess_range(path: &str, opts: &Options) -> Result<Outcome, CliError> {
    let mut run = Run::load(path, opts)?;
    let domain = run.problem.map.domain().clone();
    let (name, base, t, resolution) = match run.query("ess-range")? {
        Some(QuerySpec::EssRange {
            name,
            region,
            t,
            resolution,
        }) => {
            let base = match region {
                Some(r) => filippov_core::region::DomainBox::new(r.lower.clone(), r.upper.clone())
                    .ok()
                    .and_then(|b| b.intersect(&domain))
                    .ok_or_else(|| config(format!("query `{name}`: region does not meet the domain")))?,
                None => domain.clone(),
            };
            (Some(name.clone()), base, *t, *resolution)
        }
        _ => (None, domain.clone(), 0.0, None),
    };
    let settings = RangeSettings {
        resolution: opts.resolution.or(resolution).unwrap_or(RangeSettings::default().resolution),
        seed: run.seed,
        ..RangeSettings::default()
    };
    let q = Region::full(base);
    let s = Setting {
        ideal: &run.problem.ideal,
        measure: &run.problem.measure,
        settings: &settings,
    };
    let range = essential_range(&run.problem.map, &q, t, &s).map_err(config)?;
    if range.low_confidence > 0 {
        run.warn(format!(
            "{} cover boxes kept on Monte Carlo evidence without a certificate",
            range.low_confidence
        ));
    }
    if !range.resolution_reached {
        run.warn(format!("depth cap reached before resolution {}", range.resolution));
    }
    let null = canonical_null_set_in(&run.problem.map, &q, &run.problem.ideal);
    let results = json!({
        "query": name,
        "t": t,
        "exact": range.is_exact(),
        "range": range,
        "canonical_null_set": (null.components),
    });
    Ok(run.finish("ess-range", results, EXIT_OK, None))
}

pub fn cmd_filippov_set(
    path: &str,
    opts: &Options,
    t: Option<f64>,
    x: Option<Vec<f64>>,
    generic: bool,
) -> Result<Outcome, CliError> {
    let run = Run::load(path, opts)?;
    let (name, t, x, generic) = match (x, run.query("filippov-set")?) {
        (Some(x), _) => (None, t.unwrap_or(0.0), x, generic),
        (None, Some(QuerySpec::FilippovSet { name, t: qt, x, generic: g })) => {
            (Some(name.clone()), t.unwrap_or(*qt), x.clone(), generic || *g)
        }
        (None, _) => return Err(config("no point given: pass --x or add a filippov-set query")),
    };
    if x.len() != run.problem.map.dim() {
        return Err(config(format!("--x needs {} coordinates", run.problem.map.dim())));
    }
    let f = run.filippov_map()?;
    let results = if generic {
        let g = filippov_set_generic(&f, t, &x).map_err(config)?;
        json!({
            "query": name, "t": t, "x": x, "method": "generic",
            "vertices": g.hull.vertices(), "hull": g.hull, "radius": g.radius, "steps": g.steps,
        })
    } else {
        let h = filippov_set(&f, t, &x).map_err(config)?;
        json!({ "query": name, "t": t, "x": x, "method": "fast", "vertices": h.vertices(), "hull": h })
    };
    Ok(run.finish("filippov-set", results, EXIT_OK, None))
}

pub fn cmd_solve(path: &str, opts: &Options) -> Result<Outcome, CliError> {
    let mut run = Run::load(path, opts)?;
    let Some(ivp) = run.problem.file.ivp.clone() else {
        return Err(config("no [ivp] block"));
    };
    let (q_end, q_rtol, q_atol) = match run.query("solve")? {
        Some(QuerySpec::Solve { t_end, rtol, atol, .. }) => (*t_end, *rtol, *atol),
        _ => (None, None, None),
    };
    let mut p = IVProblem::new(run.problem.map.clone(), ivp.x0.clone(), q_end.unwrap_or(ivp.t_end)).map_err(config)?;
    let rtol = opts.rtol.or(q_rtol).or(ivp.rtol);
    let atol = opts.atol.or(q_atol).or(ivp.atol);
    if rtol.is_some() || atol.is_some() {
        let (r, a) = (rtol.unwrap_or(p.rtol()), atol.unwrap_or(p.atol()));
        p = p.with_tolerances(r, a).map_err(config)?;
    }
    if let Some(e) = opts.event_tol.or(ivp.event_tol) {
        p = p.with_event_tol(e).map_err(config)?;
    }
    if let Some(m) = ivp.bound {
        p = p.with_bound(m, run.seed).map_err(config)?;
    }
    let tr = integrate(&p).map_err(config)?;
    for w in &tr.warnings {
        run.warn(w.clone());
    }
    if let Some(Mode::Stopped { reason }) = tr.nodes.last().map(|n| &n.mode) {
        let r = match reason {
            StopReason::DomainExit => "domain exit",
            StopReason::Ambiguous => "ambiguous continuation",
        };
        run.warn(format!("integration stopped at t = {} ({r})", tr.t_end()));
    }
    let results = json!({ "trajectory": tr });
    Ok(run.finish("solve", results, EXIT_OK, Some(tr)))
}

/// Reads a trajectory written by `solve`: either the bare trajectory or a
/// full report carrying one.
pub fn read_trajectory(path: &str) -> Result<Trajectory, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {path}: {e}")))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| config(format!("{path}: {e}")))?;
    let inner = match value.get("results").and_then(|r| r.get("trajectory")) {
        Some(t) => t.clone(),
        None => value,
    };
    serde_json::from_value(inner).map_err(|e| config(format!("{path}: not a trajectory: {e}")))
}

pub fn cmd_verify(
    path: &str,
    trajectory: &str,
    opts: &Options,
    samples: Option<usize>,
    tol: Option<f64>,
) -> Result<Outcome, CliError> {
    let run = Run::load(path, opts)?;
    let tr = read_trajectory(trajectory)?;
    if tr.nodes.is_empty() || tr.segments.is_empty() {
        return Err(config(format!("{trajectory}: trajectory has no segments")));
    }
    if tr.nodes[0].x.len() != run.problem.map.dim() {
        return Err(config(format!("{trajectory}: state dimension does not match the problem")));
    }
    let (q_samples, q_tol) = match run.query("verify")? {
        Some(QuerySpec::Verify { samples, tol, .. }) => (*samples, *tol),
        _ => (None, None),
    };
    let samples = samples.or(q_samples).unwrap_or(500);
    let tol = tol.or(q_tol).unwrap_or(1e-6);
    if samples == 0 || !(tol > 0.0) {
        return Err(config("samples and tol must be positive"));
    }
    let f = run.filippov_map()?;
    let rep = verify_inclusion(&tr, &f, samples, tol);
    let exit = if rep.pass { EXIT_OK } else { EXIT_PROPERTY };
    let results = json!({ "trajectory": trajectory, "report": rep });
    Ok(run.finish("verify", results, exit, None))
}

/// Flat export: `t, x1..xm, mode` per node.
pub fn trajectory_csv(tr: &Trajectory) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let m = tr.nodes.first().map_or(0, |n| n.x.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("x{i}")));
    header.push("mode".into());
    w.write_record(&header).expect("in-memory write");
    for n in &tr.nodes {
        let mut row = vec![n.t.to_string()];
        row.extend(n.x.iter().map(f64::to_string));
        row.push(n.mode.label());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Tabular view of a report's results, one `key,value` style row per item.
pub fn tabular(report: &RunReport) -> String {
    let mut out = String::new();
    let r = &report.results;
    match report.command.as_str() {
        "ess-range" => {
            out.push_str("kind,lower,upper\n");
            for p in r["range"]["points"].as_array().into_iter().flatten() {
                out.push_str(&format!("point,{},{}\n", join(p), join(p)));
            }
            for b in r["range"]["boxes"].as_array().into_iter().flatten() {
                out.push_str(&format!("box,{},{}\n", join(&b["lower"]), join(&b["upper"])));
            }
        }
        "filippov-set" => {
            out.push_str("vertex\n");
            for v in r["vertices"].as_array().into_iter().flatten() {
                out.push_str(&format!("{}\n", join(v)));
            }
        }
        "verify" => {
            out.push_str("t,violation\n");
            let rep = &r["report"];
            let times = rep["sample_times"].as_array().cloned().unwrap_or_default();
            let viol = rep["violations"].as_array().cloned().unwrap_or_default();
            for (t, v) in times.iter().zip(&viol) {
                out.push_str(&format!("{t},{v}\n"));
            }
        }
        _ => {
            out.push_str("key,value\n");
            for (k, v) in r.as_object().into_iter().flatten() {
                out.push_str(&format!("{k},{v}\n"));
            }
        }
    }
    out
}

fn join(v: &Value) -> String {
    v.as_array()
        .map(|a| a.iter().map(Value::to_string).collect::<Vec<_>>().join(" "))
        .unwrap_or_default()
}
