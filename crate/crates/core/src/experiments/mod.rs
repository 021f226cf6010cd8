//! Declarative experiment runs.
//!
//! A run is described by a JSON config naming the experiment kind, a master
//! seed, a list of seed indices and kind-specific parameters. Seed index `i`
//! runs with seed [`seed::run_seed`]`(master_seed, i)`; every random stream
//! inside a run is derived from that seed by counter, so seeds can execute
//! in parallel and still produce the rows of a serial run. Rows are sorted
//! by seed index, then parameters, before they are written.
//!
//! CSV columns, in order: `experiment, seed_index, seed, parameters, metric,
//! value`. `parameters` is a `;`-separated list of `key=value` pairs.

mod certify;
mod linear;
mod nonlinear_gen;

pub use certify::{
    aliasing_instance, causal_instance, fully_aliased_instance, line_pair, model_error_instance,
    value_instance, BoundsParams, CausalCheck, FanoParams, ModelErrorCase, ValueCase,
};
pub use linear::{
    converse_check, converse_family, ConverseCheck, ConverseParams, IdentifiabilityParams, LinearGenParams,
    CONVERSE_TEST_ENV, CONVERSE_TRAIN_ENVS,
};
pub use nonlinear_gen::NonlinearGenParams;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LinearGen,
    IcpIdentifiability,
    Bounds,
    Fano,
    NonlinearGen,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LinearGen => "linear-gen",
            ExperimentKind::IcpIdentifiability => "icp-identifiability",
            ExperimentKind::Bounds => "bounds",
            ExperimentKind::Fano => "fano",
            ExperimentKind::NonlinearGen => "nonlinear-gen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    master_seed: u64,
    seeds: Vec<u64>,
    #[serde(default)]
    output: Option<String>,
    #[serde(default)]
    params: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    LinearGen(LinearGenParams),
    IcpIdentifiability(IdentifiabilityParams),
    Bounds(BoundsParams),
    Fano(FanoParams),
    NonlinearGen(NonlinearGenParams),
}

impl Params {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Params::LinearGen(_) => ExperimentKind::LinearGen,
            Params::IcpIdentifiability(_) => ExperimentKind::IcpIdentifiability,
            Params::Bounds(_) => ExperimentKind::Bounds,
            Params::Fano(_) => ExperimentKind::Fano,
            Params::NonlinearGen(_) => ExperimentKind::NonlinearGen,
        }
    }

    /// Defaults of `kind`.
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::LinearGen => Params::LinearGen(Default::default()),
            ExperimentKind::IcpIdentifiability => Params::IcpIdentifiability(Default::default()),
            ExperimentKind::Bounds => Params::Bounds(Default::default()),
            ExperimentKind::Fano => Params::Fano(Default::default()),
            ExperimentKind::NonlinearGen => Params::NonlinearGen(Default::default()),
        }
    }

    fn parse(kind: ExperimentKind, v: Value) -> Result<Self> {
        fn de<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::config("params", e.to_string()))
        }
        let p = match kind {
            ExperimentKind::LinearGen => Params::LinearGen(de(v)?),
            ExperimentKind::IcpIdentifiability => Params::IcpIdentifiability(de(v)?),
            ExperimentKind::Bounds => Params::Bounds(de(v)?),
            ExperimentKind::Fano => Params::Fano(de(v)?),
            ExperimentKind::NonlinearGen => Params::NonlinearGen(de(v)?),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Params::LinearGen(p) => p.validate(),
            Params::IcpIdentifiability(p) => p.validate(),
            Params::Bounds(p) => p.validate(),
            Params::Fano(p) => p.validate(),
            Params::NonlinearGen(p) => p.validate(),
        }
    }
}

/// A parsed and validated experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Seed indices.
    pub seeds: Vec<u64>,
    /// CSV file name; defaults to `<kind>.csv`.
    pub output: Option<String>,
    pub params: Params,
}

impl ExperimentConfig {
    pub fn new(params: Params, master_seed: u64, seeds: Vec<u64>) -> Result<Self> {
        let cfg = Self {
            master_seed,
            seeds,
            output: None,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> ExperimentKind {
        self.params.kind()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let raw: RawConfig = serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))?;
        let params = Params::parse(raw.kind, raw.params.unwrap_or_else(|| Value::Object(Default::default())))?;
        let cfg = Self {
            master_seed: raw.master_seed,
            seeds: raw.seeds,
            output: raw.output,
            params,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed index required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seed indices must be distinct"));
        }
        if let Some(out) = &self.output {
            let p = Path::new(out);
            if out.is_empty() || p.components().count() != 1 || p.is_absolute() {
                return Err(Error::config("output", "must be a plain file name"));
            }
        }
        self.params.validate()
    }

    /// The config with every default filled in.
    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "kind": self.kind(),
            "master_seed": self.master_seed,
            "seeds": self.seeds,
            "output": self.output,
            "params": self.params,
        })
    }

    pub fn output_name(&self) -> String {
        self.output.clone().unwrap_or_else(|| format!("{}.csv", self.kind().name()))
    }

    pub fn seed_of(&self, index: u64) -> u64 {
        seed::run_seed(self.master_seed, index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed_index: u64,
    pub seed: u64,
    pub parameters: String,
    pub metric: String,
    pub value: f64,
}

/// `key=value` pairs joined by `;`.
pub fn param_string(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Rows and property violations produced by one seed.
#[derive(Debug, Default)]
pub(crate) struct SeedOutput {
    rows: Vec<(String, String, f64)>,
    violations: Vec<String>,
}

impl SeedOutput {
    pub(crate) fn push(&mut self, parameters: &str, metric: &str, value: f64) {
        self.rows.push((parameters.to_string(), metric.to_string(), value));
    }

    pub(crate) fn flag(&mut self, holds: bool, what: impl FnOnce() -> String) {
        if !holds {
            self.violations.push(what());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub kind: ExperimentKind,
    pub rows: Vec<ResultRow>,
    /// Failed property checks; non-empty means the suite was violated.
    pub violations: Vec<String>,
}

impl RunOutput {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Values of `metric` whose parameters contain every pair of `filter`.
    pub fn values(&self, metric: &str, filter: &[(&str, &str)]) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .filter(|r| {
                let pairs: Vec<&str> = r.parameters.split(';').collect();
                filter.iter().all(|(k, v)| pairs.contains(&format!("{k}={v}").as_str()))
            })
            .map(|r| r.value)
            .collect()
    }
}

fn run_one(params: &Params, index: u64, seed: u64) -> Result<SeedOutput> {
    match params {
        Params::LinearGen(p) => linear::run_linear_gen(p, seed),
        Params::IcpIdentifiability(p) => linear::run_icp_identifiability(p, seed),
        Params::Bounds(p) => certify::run_bounds(p, seed),
        Params::Fano(p) => certify::run_fano(p, index, seed),
        Params::NonlinearGen(p) => nonlinear_gen::run_nonlinear_gen(p, seed),
    }
}

/// Runs every seed of `cfg` on `jobs` worker threads (`None`: one per
/// core). The output does not depend on `jobs`.
pub fn run(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<RunOutput> {
    let work = || -> Result<Vec<(u64, u64, SeedOutput)>> {
        cfg.seeds
            .par_iter()
            .map(|&i| {
                let s = cfg.seed_of(i);
                run_one(&cfg.params, i, s).map(|o| (i, s, o))
            })
            .collect()
    };
    let outputs = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let kind = cfg.kind();
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (index, seed, out) in outputs {
        for (parameters, metric, value) in out.rows {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("metric {metric} ({parameters}) of seed index {index}")));
            }
            rows.push(ResultRow {
                experiment: kind.name().to_string(),
                seed_index: index,
                seed,
                parameters,
                metric,
                value,
            });
        }
        violations.extend(out.violations.into_iter().map(|v| format!("seed index {index}: {v}")));
    }
    rows.sort_by(|a, b| (a.seed_index, &a.parameters).cmp(&(b.seed_index, &b.parameters)));
    violations.sort();
    Ok(RunOutput { kind, rows, violations })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOutput {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSeed {
    pub index: u64,
    pub seed: u64,
}

/// Written next to every CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub code_version: String,
    pub config: Value,
    pub seeds: Vec<ManifestSeed>,
    pub output: ManifestOutput,
    pub violations: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, out: &RunOutput, csv: &[u8]) -> Self {
        Self {
            code_version: CODE_VERSION.to_string(),
            config: cfg.to_value(),
            seeds: cfg.seeds.iter().map(|&i| ManifestSeed { index: i, seed: cfg.seed_of(i) }).collect(),
            output: ManifestOutput {
                path: cfg.output_name(),
                sha256: sha256_hex(csv),
                rows: out.rows.len(),
            },
            violations: out.violations.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn manifest_path(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
        let name = cfg.output_name();
        let stem = Path::new(&name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(name);
        dir.join(format!("{stem}.manifest.json"))
    }
}

/// Paths written by [`run_and_write`].
#[derive(Debug, Clone)]
pub struct Written {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub output: RunOutput,
}

/// Runs `cfg` and writes the CSV and its manifest into `dir`.
pub fn run_and_write(cfg: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> Result<Written> {
    let output = run(cfg, jobs)?;
    let csv = output.to_csv()?;
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(cfg.output_name());
    std::fs::write(&csv_path, &csv)?;
    let manifest = Manifest::new(cfg, &output, &csv);
    let manifest_path = Manifest::manifest_path(dir, cfg);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(Written {
        csv: csv_path,
        manifest: manifest_path,
        output,
    })
}

/// Stable-median of a sample; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_errors() {
        let bad = r#"{"kind": "fano", "master_seed": 1, "seeds": [0], "colour": 3}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config { .. })));
        let bad = r#"{"kind": "fano", "master_seed": 1, "seeds": [0], "params": {"instance": 3}}"#;
        match ExperimentConfig::from_json(bad) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "params");
                assert!(message.contains("instance"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = r#"{"kind": "plots", "master_seed": 1, "seeds": [0]}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn seeds_must_be_nonempty_and_distinct() {
        for seeds in ["[]", "[1, 1]"] {
            let text = format!(r#"{{"kind": "fano", "master_seed": 1, "seeds": {seeds}}}"#);
            match ExperimentConfig::from_json(&text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, "seeds"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn config_round_trips_with_defaults_filled_in() {
        let cfg = ExperimentConfig::from_json(r#"{"kind": "bounds", "master_seed": 4, "seeds": [0, 2]}"#).unwrap();
        let back = ExperimentConfig::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.output_name(), "bounds.csv");
    }

    #[test]
    fn parameter_filter_matches_whole_pairs() {
        let out = RunOutput {
            kind: ExperimentKind::Fano,
            rows: vec![ResultRow {
                experiment: "fano".into(),
                seed_index: 0,
                seed: 0,
                parameters: param_string(&[("a", "10".into()), ("b", "x".into())]),
                metric: "m".into(),
                value: 1.5,
            }],
            violations: vec![],
        };
        assert_eq!(out.values("m", &[("a", "10")]), vec![1.5]);
        assert!(out.values("m", &[("a", "1")]).is_empty());
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
