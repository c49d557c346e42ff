//! TOML run configurations, dotted `key=value` overrides, artifact writing
//! and the run manifest.
//!
//! A config file looks like
//!
//! ```toml
//! kind = "convergence"
//! seed = 20240501
//! samples = 1000
//! t_end = 2.0
//! schemes = ["truncated-milstein"]
//! reference_exponent = 13
//! coarse_exponents = [7, 8, 9, 10]
//! output_dir = "out/convergence"
//!
//! [model]
//! name = "paper-example"
//!
//! [policy]
//! exponent = 5.0
//! epsilon = 0.1
//! delta_star = 1.0
//! ```
//!
//! Omitted keys take the defaults of [`RunConfig::default`]. Overrides address
//! keys by dotted path (`policy.epsilon=0.3`, `model.params.sigma=0`) and take
//! TOML values; anything that does not parse as a TOML value is a string.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brownian::{sample_path, PathGrid, GENERATOR_ID};
use crate::experiments::{moment_sweep, strong_error, ExperimentSpec, MomentSweep, Reference};
use crate::model::{builtin_model_with, ModelParams, SdeSystem};
use crate::scheme::{simulate, Scheme, Trajectory};
use crate::truncation::{validate_policy, AdmissiblePolicy, TruncationContext, TruncationPolicy, ValidationReport};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Convergence,
    Moments,
    ValidatePolicy,
    SinglePath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: ModelParams,
}

/// Power-family policy `mu(u) = scale * u^exponent`, `h(delta) = delta^-epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub family: String,
    pub scale: f64,
    pub exponent: f64,
    pub epsilon: f64,
    pub delta_star: f64,
    pub grid_points: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            family: "power".into(),
            scale: 1.0,
            exponent: 5.0,
            epsilon: 0.1,
            delta_star: 1.0,
            grid_points: crate::truncation::DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Monte Carlo sample count `M`.
    pub samples: usize,
    pub t_end: f64,
    pub schemes: Vec<Scheme>,
    pub reference: Reference,
    pub reference_exponent: u32,
    /// Coarse steps `2^-k` for convergence runs, the step list for moment runs.
    pub coarse_exponents: Vec<u32>,
    /// Step `2^-k` of a single-path run.
    pub step_exponent: u32,
    /// Brownian stream used by a single-path run.
    pub sample_index: u64,
    pub error_power: f64,
    pub moment_orders: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_q: Option<f64>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ExperimentKind::Convergence,
            seed: 20240501,
            samples: 1000,
            t_end: 2.0,
            schemes: vec![Scheme::TruncatedMilstein],
            reference: Reference::TruncatedMilstein,
            reference_exponent: 13,
            coarse_exponents: vec![7, 8, 9, 10],
            step_exponent: 6,
            sample_index: 0,
            error_power: 1.0,
            moment_orders: vec![1.0],
            rate_p: None,
            rate_q: None,
            output_dir: PathBuf::from("out"),
            model: ModelConfig {
                name: "paper-example".into(),
                params: ModelParams::new(),
            },
            policy: PolicyConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies one `dotted.key=value` override to a parsed config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let (last, path) = parts.split_last().unwrap();
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?)
    }

    fn from_table(table: toml::Table) -> Result<RunConfig> {
        if !table.contains_key("kind") {
            return Err(Error::Config("missing key 'kind'".into()));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))
    }

    /// Reads `path` and applies the overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string()))))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn build_model(&self) -> Result<SdeSystem> {
        builtin_model_with(&self.model.name, &self.model.params)
    }

    /// Validates the policy; rejections carry the full report.
    pub fn build_policy(&self) -> Result<AdmissiblePolicy> {
        let p = &self.policy;
        if p.family != "power" {
            return Err(Error::Config(format!("unknown policy family '{}'; available: power", p.family)));
        }
        let policy = TruncationPolicy::power(p.scale, p.exponent, p.epsilon, p.delta_star)?;
        let admissible = validate_policy(policy, p.grid_points)?;
        if !(p.epsilon > 0.0 && p.epsilon <= 0.25) {
            return Err(Error::Config(format!("epsilon = {} is outside (0, 1/4]", p.epsilon)));
        }
        Ok(admissible)
    }

    fn rate_condition(&self) -> Result<Option<(f64, f64)>> {
        match (self.rate_p, self.rate_q) {
            (Some(p), Some(q)) => Ok(Some((p, q))),
            (None, None) => Ok(None),
            _ => Err(Error::Config("rate_p and rate_q must be given together".into())),
        }
    }

    pub fn experiment_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::new(
            self.build_model()?,
            self.schemes.clone(),
            self.build_policy()?,
            self.t_end,
            self.reference_exponent,
            self.coarse_exponents.clone(),
            self.samples,
            self.seed,
        );
        spec.error_power = self.error_power;
        spec.reference = self.reference;
        spec.rate_condition = self.rate_condition()?;
        Ok(spec)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Contents of `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub library_version: String,
    pub generator: String,
    pub seed: u64,
    /// File name to lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(one_line(&e.to_string())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files produced by [`run`] and a human-readable summary.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Runs the configured experiment and writes its artifacts plus the manifest
/// under `config.output_dir`. `workers` only affects speed.
pub fn run(config: &RunConfig, workers: usize) -> Result<RunOutcome> {
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let summary = match config.kind {
        ExperimentKind::ValidatePolicy => {
            let policy = config.build_policy()?;
            let text = format_validation(policy.report());
            files.push(("policy_report.txt", text.clone().into_bytes()));
            text
        }
        ExperimentKind::Convergence => {
            let report = strong_error(&config.experiment_spec()?, workers)?;
            let (mut errors, mut slopes) = (Vec::new(), Vec::new());
            report.write_errors_csv(&mut errors).expect("write to memory");
            report.write_slopes_csv(&mut slopes).expect("write to memory");
            files.push(("errors.csv", errors));
            files.push(("slopes.csv", slopes));
            let mut s = String::new();
            for w in &report.warnings {
                let _ = writeln!(s, "warning: {w}");
            }
            s + &report.summary()
        }
        ExperimentKind::Moments => {
            let table = moment_sweep(
                &MomentSweep {
                    system: config.build_model()?,
                    scheme: *config
                        .schemes
                        .first()
                        .ok_or_else(|| Error::Config("schemes is empty".into()))?,
                    policy: config.build_policy()?,
                    t_end: config.t_end,
                    p_list: config.moment_orders.clone(),
                    exponents: config.coarse_exponents.clone(),
                    samples: config.samples,
                    seed: config.seed,
                },
                workers,
            )?;
            let (mut rows, mut trend) = (Vec::new(), Vec::new());
            table.write_csv(&mut rows).expect("write to memory");
            table.write_trend_csv(&mut trend).expect("write to memory");
            files.push(("moments.csv", rows));
            files.push(("moment_trend.csv", trend));
            let mut s = format!("max sup-moment {:.6}\n", table.max_sup_moment());
            for (p, slope) in &table.trends {
                let _ = writeln!(s, "p = {p}: trend slope {slope:.4}");
            }
            s
        }
        ExperimentKind::SinglePath => {
            let csv = single_path(config)?;
            let rows = csv.lines().count() - 1;
            files.push(("trajectories.csv", csv.into_bytes()));
            format!("{rows} rows\n")
        }
    };

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut artifacts = BTreeMap::new();
    let mut paths = Vec::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        artifacts.insert(name.to_string(), sha256_hex(bytes));
        paths.push(path);
    }
    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION").into(),
        generator: GENERATOR_ID.into(),
        seed: config.seed,
        artifacts,
        config: config.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    paths.push(path);
    Ok(RunOutcome {
        artifacts: paths,
        summary,
    })
}

fn format_validation(report: &ValidationReport) -> String {
    let mut s = format!(
        "policy {}: {} on {} grid points\n",
        report.label,
        if report.passed() { "admissible" } else { "rejected" },
        report.grid_points
    );
    for c in &report.conditions {
        let _ = writeln!(
            s,
            "{:4} {:28} worst {:.6e} at {:.6e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.worst_value,
            c.worst_at
        );
    }
    s
}

/// Every configured scheme on one shared path, as a wide CSV: column `t`,
/// then per scheme one column per coordinate and a `<scheme>:blown_up` flag.
/// Rows after a blow-up leave the scheme's state cells empty.
pub fn single_path(config: &RunConfig) -> Result<String> {
    if config.schemes.is_empty() {
        return Err(Error::Config("schemes is empty".into()));
    }
    let system = config.build_model()?;
    let grid = PathGrid::dyadic(config.t_end, config.step_exponent)?;
    let path = sample_path(grid, system.noise_dim(), config.seed, config.sample_index)?;
    let ctx = if config.schemes.iter().any(|s| s.is_truncated()) {
        Some(TruncationContext::new(&config.build_policy()?, grid.step())?)
    } else {
        None
    };
    let trajectories: Vec<Trajectory> = config
        .schemes
        .iter()
        .map(|&s| simulate(&system, s, &path, if s.is_truncated() { ctx.as_ref() } else { None }))
        .collect::<Result<_>>()?;

    let d = system.state_dim();
    let mut out = String::from("t");
    for s in &config.schemes {
        if d == 1 {
            let _ = write!(out, ",{s}");
        } else {
            for i in 0..d {
                let _ = write!(out, ",{s}[{i}]");
            }
        }
    }
    for s in &config.schemes {
        let _ = write!(out, ",{s}:blown_up");
    }
    out.push('\n');
    for k in 0..=grid.steps() {
        let _ = write!(out, "{}", grid.time(k));
        for tr in &trajectories {
            for i in 0..d {
                if k < tr.len() {
                    let _ = write!(out, ",{}", tr.state(k)[i]);
                } else {
                    out.push(',');
                }
            }
        }
        for tr in &trajectories {
            let blown = tr.blow_up().is_some_and(|b| k >= b);
            let _ = write!(out, ",{}", blown as u8);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_kind_and_unknown_keys_are_errors() {
        assert!(RunConfig::from_toml_str("seed = 3").is_err());
        assert!(RunConfig::from_toml_str("kind = \"moments\"\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("kind = \"moments\"\n[policy]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("kind = \"sideways\"").is_err());
        assert!(RunConfig::from_toml_str("kind = \"moments\"\nschemes = [\"rk4\"]").is_err());
    }

    #[test]
    fn overrides() {
        let mut t: toml::Table = toml::from_str("kind = \"convergence\"\n[policy]\nepsilon = 0.1").unwrap();
        apply_override(&mut t, "policy.epsilon=0.3").unwrap();
        apply_override(&mut t, "model.name=gbm").unwrap();
        apply_override(&mut t, "model.params.sigma = 0").unwrap();
        apply_override(&mut t, "coarse_exponents=[3,4,5]").unwrap();
        apply_override(&mut t, "schemes=[\"euler-maruyama\"]").unwrap();
        let c = RunConfig::from_table(t.clone()).unwrap();
        assert_eq!(c.policy.epsilon, 0.3);
        assert_eq!(c.model.name, "gbm");
        assert_eq!(c.model.params["sigma"], 0.0);
        assert_eq!(c.coarse_exponents, vec![3, 4, 5]);
        assert_eq!(c.schemes, vec![Scheme::EulerMaruyama]);
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "policy.epsilon.x=1").is_err());
        apply_override(&mut t, "nonsense=1").unwrap();
        assert!(RunConfig::from_table(t).is_err());
    }

    #[test]
    fn policy_checks() {
        let mut c = RunConfig::default();
        assert!(c.build_policy().is_ok());
        c.policy.epsilon = 0.3;
        match c.build_policy() {
            Err(Error::PolicyRejected(r)) => {
                assert!(r.failed().any(|f| f.name == crate::truncation::COND_QUARTER_ROOT))
            }
            other => panic!("{other:?}"),
        }
        c.policy.epsilon = 0.1;
        c.policy.family = "tamed".into();
        assert!(c.build_policy().is_err());
        c.policy.family = "power".into();
        c.rate_p = Some(1.0);
        assert!(c.experiment_spec().is_err());
    }

    #[test]
    fn single_path_rows() {
        let mut c = RunConfig {
            kind: ExperimentKind::SinglePath,
            t_end: 1.0,
            step_exponent: 0,
            schemes: vec![Scheme::TruncatedMilstein, Scheme::EulerMaruyama],
            ..RunConfig::default()
        };
        let csv = single_path(&c).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "t,truncated-milstein,euler-maruyama,truncated-milstein:blown_up,euler-maruyama:blown_up"
        );
        assert!(lines[1].starts_with("0,1,1,0,0"));
        c.model.name = "linear-2d-diagonal".into();
        let csv = single_path(&c).unwrap();
        assert!(csv.starts_with("t,truncated-milstein[0],truncated-milstein[1],euler-maruyama[0]"));
    }

    #[test]
    fn zero_noise_gbm_paths_follow_exponential() {
        let c = RunConfig {
            kind: ExperimentKind::SinglePath,
            t_end: 1.0,
            step_exponent: 8,
            schemes: Scheme::ALL.to_vec(),
            model: ModelConfig {
                name: "gbm".into(),
                params: ModelParams::from([("sigma".into(), 0.0)]),
            },
            policy: PolicyConfig {
                scale: 0.2,
                exponent: 1.0,
                epsilon: 0.2,
                ..PolicyConfig::default()
            },
            ..RunConfig::default()
        };
        let csv = single_path(&c).unwrap();
        let delta = 2f64.powi(-8);
        for line in csv.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            let exact = (0.05 * v[0]).exp();
            for y in &v[1..5] {
                assert!((y - exact).abs() <= 0.5 * 0.05 * 0.05 * v[0] * exact * delta * 1.01 + 1e-15);
            }
        }
    }
}
