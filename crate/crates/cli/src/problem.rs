//! TOML problem files.
//!
//! Loading is all-or-nothing: the document is parsed into plain data, then
//! every expression, set and block is validated before anything is returned.

use std::collections::{BTreeMap, BTreeSet};

use filippov_core::expr::Expr;
use filippov_core::piecewise::{CellId, Override, PiecewiseMap};
use filippov_core::region::{
    validate_regular_surface, DomainBox, MeasureModel, NegligibilityIdeal, NullGenerator, NullSet,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl LoadError {
    pub fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        LoadError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// State dimension.
    pub m: usize,
    /// Value dimension.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSpec {
    pub name: String,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Points { points: Vec<Vec<f64>> },
    Surface { expr: String },
    /// A box with at least one flat side.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSpec {
    pub set: GeneratorSpec,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub density: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IdealSpec {
    Lebesgue,
    Generated { generators: Vec<GeneratorSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvpSpec {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub event_tol: Option<f64>,
    /// Optional a-priori bound on |f|, checked by sampling.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QuerySpec {
    EssRange {
        name: String,
        /// Defaults to the whole domain.
        region: Option<BoxSpec>,
        #[serde(default)]
        t: f64,
        resolution: Option<f64>,
    },
    FilippovSet {
        name: String,
        #[serde(default)]
        t: f64,
        x: Vec<f64>,
        #[serde(default)]
        generic: bool,
    },
    Solve {
        name: String,
        t_end: Option<f64>,
        rtol: Option<f64>,
        atol: Option<f64>,
    },
    Verify {
        name: String,
        samples: Option<usize>,
        tol: Option<f64>,
    },
}

impl QuerySpec {
    pub fn name(&self) -> &str {
        match self {
            QuerySpec::EssRange { name, .. }
            | QuerySpec::FilippovSet { name, .. }
            | QuerySpec::Solve { name, .. }
            | QuerySpec::Verify { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            QuerySpec::EssRange { .. } => "ess-range",
            QuerySpec::FilippovSet { .. } => "filippov-set",
            QuerySpec::Solve { .. } => "solve",
            QuerySpec::Verify { .. } => "verify",
        }
    }
}

/// The document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub dims: Dims,
    pub domain: BoxSpec,
    #[serde(default, rename = "switch")]
    pub switches: Vec<SwitchSpec>,
    pub branches: BTreeMap<String, Vec<String>>,
    #[serde(default, rename = "override")]
    pub overrides: Vec<OverrideSpec>,
    pub measure: Option<MeasureSpec>,
    pub ideal: Option<IdealSpec>,
    pub ivp: Option<IvpSpec>,
    #[serde(default, rename = "query")]
    pub queries: Vec<QuerySpec>,
    pub seed: Option<u64>,
}

impl ProblemFile {
    pub fn parse(text: &str, path: &str) -> Result<Self, LoadError> {
        toml::from_str(text).map_err(|e| LoadError::Syntax {
            path: path.to_string(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    /// SHA-256 of the canonical JSON form (sorted keys, shortest round-trip
    /// numbers), so formatting and key order do not change the digest.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("problem files serialize");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn query(&self, name: &str) -> Option<&QuerySpec> {
        self.queries.iter().find(|q| q.name() == name)
    }
}

/// A validated problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub file: ProblemFile,
    pub map: PiecewiseMap,
    pub measure: MeasureModel,
    pub ideal: NegligibilityIdeal,
}

fn domain_box(spec: &BoxSpec, m: usize, field: &str) -> Result<DomainBox, LoadError> {
    if spec.lower.len() != m || spec.upper.len() != m {
        return Err(LoadError::invalid(field, format!("bounds must have {m} entries")));
    }
    DomainBox::new(spec.lower.clone(), spec.upper.clone()).map_err(|e| LoadError::invalid(field, e))
}

fn expr(text: &str, m: usize, field: &str) -> Result<Expr, LoadError> {
    Expr::parse(text, m).map_err(|e| LoadError::invalid(field, e))
}

fn generator(spec: &GeneratorSpec, domain: &DomainBox, field: &str) -> Result<NullGenerator, LoadError> {
    let m = domain.dim();
    match spec {
        GeneratorSpec::Points { points } => {
            if let Some(p) = points.iter().find(|p| p.len() != m) {
                return Err(LoadError::invalid(field, format!("point {p:?} does not have {m} coordinates")));
            }
            Ok(NullGenerator::Points(points.clone()))
        }
        GeneratorSpec::Surface { expr: text } => {
            let e = expr(text, m, field)?;
            validate_regular_surface(&e, domain, 0).map_err(|e| LoadError::invalid(field, e))?;
            Ok(NullGenerator::Surface(e))
        }
        GeneratorSpec::Box { lower, upper } => {
            if lower.len() != m || upper.len() != m {
                return Err(LoadError::invalid(field, format!("bounds must have {m} entries")));
            }
            NullGenerator::degenerate_box(lower.clone(), upper.clone()).map_err(|e| LoadError::invalid(field, e))
        }
    }
}

fn check_tol(v: Option<f64>, field: &str) -> Result<(), LoadError> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(LoadError::invalid(field, format!("must be positive, got {x}"))),
        _ => Ok(()),
    }
}

impl Problem {
    pub fn load(path: &str) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_string(),
            source,
        })?;
        Problem::from_file(ProblemFile::parse(&text, path)?)
    }

    pub fn from_file(file: ProblemFile) -> Result<Self, LoadError> {
        let Dims { m, n } = file.dims;
        if m == 0 || n == 0 {
            return Err(LoadError::invalid("dims", "m and n must be positive"));
        }
        let domain = domain_box(&file.domain, m, "domain")?;
        let seed = file.seed.unwrap_or(0);

        let mut names = BTreeSet::new();
        let mut switches = Vec::with_capacity(file.switches.len());
        for (i, s) in file.switches.iter().enumerate() {
            let field = format!("switch[{i}] `{}`", s.name);
            if !names.insert(s.name.as_str()) {
                return Err(LoadError::invalid(field, "duplicate switch name"));
            }
            switches.push(expr(&s.expr, m, &field)?);
        }

        let mut branches = BTreeMap::new();
        for (key, exprs) in &file.branches {
            let field = format!("branches.\"{key}\"");
            let id: CellId = key.parse().map_err(|e| LoadError::invalid(&field, e))?;
            if exprs.len() != n {
                return Err(LoadError::invalid(field, format!("expected {n} expressions, found {}", exprs.len())));
            }
            let parsed = exprs
                .iter()
                .enumerate()
                .map(|(j, e)| expr(e, m, &format!("{field}[{j}]")))
                .collect::<Result<Vec<_>, _>>()?;
            branches.insert(id, parsed);
        }

        let mut overrides = Vec::with_capacity(file.overrides.len());
        for (i, o) in file.overrides.iter().enumerate() {
            let field = format!("override[{i}]");
            if o.value.len() != n || o.value.iter().any(|v| !v.is_finite()) {
                return Err(LoadError::invalid(field, format!("value must be {n} finite numbers")));
            }
            overrides.push(Override {
                set: NullSet::new(vec![generator(&o.set, &domain, &format!("{field}.set"))?]),
                value: o.value.clone(),
            });
        }

        let map = PiecewiseMap::new(domain.clone(), n, switches, branches, overrides)
            .map_err(|e| LoadError::invalid("branches/switches/overrides", e))?;

        let measure = match &file.measure {
            None => MeasureModel::lebesgue(domain.clone()),
            Some(spec) => MeasureModel::with_density(domain.clone(), expr(&spec.density, m, "measure.density")?, seed)
                .map_err(|e| LoadError::invalid("measure.density", e))?,
        };

        let ideal = match &file.ideal {
            None | Some(IdealSpec::Lebesgue) => NegligibilityIdeal::Lebesgue,
            Some(IdealSpec::Generated { generators }) => NegligibilityIdeal::generated(
                generators
                    .iter()
                    .enumerate()
                    .map(|(i, g)| generator(g, &domain, &format!("ideal.generators[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };

        if let Some(ivp) = &file.ivp {
            if ivp.x0.len() != m {
                return Err(LoadError::invalid("ivp.x0", format!("must have {m} entries")));
            }
            if !domain.contains_interior(&ivp.x0) {
                return Err(LoadError::invalid("ivp.x0", "must lie in the interior of the domain"));
            }
            if !(ivp.t_end.is_finite() && ivp.t_end > 0.0) {
                return Err(LoadError::invalid("ivp.t_end", "must be positive"));
            }
            check_tol(ivp.rtol, "ivp.rtol")?;
            check_tol(ivp.atol, "ivp.atol")?;
            check_tol(ivp.event_tol, "ivp.event_tol")?;
            check_tol(ivp.bound, "ivp.bound")?;
        }

        let mut qnames = BTreeSet::new();
        for (i, q) in file.queries.iter().enumerate() {
            let field = format!("query[{i}] `{}`", q.name());
            if !qnames.insert(q.name()) {
                return Err(LoadError::invalid(field, "duplicate query name"));
            }
            match q {
                QuerySpec::EssRange { region, resolution, .. } => {
                    if let Some(r) = region {
                        domain_box(r, m, &format!("{field}.region"))?;
                    }
                    check_tol(*resolution, &format!("{field}.resolution"))?;
                }
                QuerySpec::FilippovSet { x, .. } => {
                    if x.len() != m || !domain.contains_interior(x) {
                        return Err(LoadError::invalid(format!("{field}.x"), format!("must be {m} coordinates inside the domain")));
                    }
                }
                QuerySpec::Solve { t_end, rtol, atol, .. } => {
                    if file.ivp.is_none() {
                        return Err(LoadError::invalid(field, "solve queries need an [ivp] block"));
                    }
                    check_tol(*t_end, &format!("{field}.t_end"))?;
                    check_tol(*rtol, &format!("{field}.rtol"))?;
                    check_tol(*atol, &format!("{field}.atol"))?;
                }
                QuerySpec::Verify { samples, tol, .. } => {
                    if *samples == Some(0) {
                        return Err(LoadError::invalid(format!("{field}.samples"), "must be positive"));
                    }
                    check_tol(*tol, &format!("{field}.tol"))?;
                }
            }
        }

        Ok(Problem {
            file,
            map,
            measure,
            ideal,
        })
    }
}
