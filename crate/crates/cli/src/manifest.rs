//! Experiment manifests and ground-truth descriptors (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tps_sdf::pipeline::ExtractOptions;
use tps_sdf::synthetic::Shape;
use tps_sdf::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// Synthetic input: a shape sampled `count` times with optional noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: Shape,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Noise standard deviation as a fraction of the shape's bounding scale.
    #[serde(default)]
    pub noise: f64,
    /// Tip-biased density (moon only).
    #[serde(default)]
    pub nonuniform: bool,
}

fn default_count() -> usize {
    300
}

impl SyntheticSpec {
    pub fn validate(&self) -> CliResult<()> {
        self.shape.validate()?;
        if self.count < 3 {
            return Err(CliError::invalid("synthetic sample count must be at least 3"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(CliError::invalid("noise must be a finite non-negative fraction"));
        }
        if self.nonuniform && !matches!(self.shape, Shape::Moon2d { .. }) {
            return Err(CliError::invalid("nonuniform sampling is only defined for moon2d"));
        }
        Ok(())
    }
}

/// What a reconstruction is measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Analytic shape, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    /// Reference mesh (OBJ) or polyline file otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
    /// How the input cloud was produced, for the record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRecord {
    pub count: usize,
    pub noise: f64,
    pub noise_sigma: f64,
    pub nonuniform: bool,
    pub seed: u64,
}

impl GroundTruth {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut gt: GroundTruth = toml::from_str(&text).map_err(|e| CliError::parse(path, &e))?;
        if let Some(m) = &gt.mesh {
            gt.mesh = Some(resolve(path.parent(), m));
        }
        if gt.shape.is_none() == gt.mesh.is_none() {
            return Err(CliError::invalid("ground truth needs exactly one of `shape` or `mesh`"));
        }
        Ok(gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Point cloud file (XYZ or PLY).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub output: PathBuf,
    /// Seeds both synthetic sampling and training.
    pub seed: u64,
    /// Any of `cd_l1`, `cd_l2`, `nc`, `sign`; computed when ground truth exists.
    pub metrics: Vec<String>,
    pub eval_samples: usize,
    /// Contour spacing of 2-D field rasters, in normalized units.
    pub raster_spacing: f64,
    pub train: TrainConfig,
    pub extract: ExtractOptions,
}

pub const METRICS: [&str; 4] = ["cd_l1", "cd_l2", "nc", "sign"];

impl Default for Manifest {
    fn default() -> Self {
        Self {
            name: "run".into(),
            input: None,
            synthetic: None,
            ground_truth: None,
            output: PathBuf::from("out"),
            seed: 0,
            metrics: METRICS.iter().map(|s| s.to_string()).collect(),
            eval_samples: 100_000,
            raster_spacing: 0.05,
            train: TrainConfig::default(),
            extract: ExtractOptions::default(),
        }
    }
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

impl Manifest {
    /// Parses a manifest, applies `key=value` overrides (TOML values, dotted
    /// keys) and resolves relative paths against the manifest's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| CliError::parse(p, &e))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut m: Manifest = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::invalid(format!("manifest: {}", one_line(&e.to_string()))))?;
        let base = path.and_then(Path::parent);
        m.input = m.input.map(|p| resolve(base, &p));
        m.ground_truth = m.ground_truth.map(|p| resolve(base, &p));
        m.output = resolve(base, &m.output);
        m.train.seed = m.seed;
        Ok(m)
    }

    pub fn validate(&self) -> CliResult<()> {
        match (&self.input, &self.synthetic) {
            (Some(p), None) => {
                if !p.exists() {
                    return Err(CliError::invalid(format!("input {} does not exist", p.display())));
                }
            }
            (None, Some(s)) => s.validate()?,
            _ => return Err(CliError::invalid("manifest needs exactly one of `input` or `synthetic`")),
        }
        if let Some(g) = &self.ground_truth {
            if !g.exists() {
                return Err(CliError::invalid(format!("ground truth {} does not exist", g.display())));
            }
        }
        for m in &self.metrics {
            if !METRICS.contains(&m.as_str()) {
                return Err(CliError::invalid(format!("unknown metric {m:?}")));
            }
        }
        if self.eval_samples == 0 {
            return Err(CliError::invalid("eval_samples must be positive"));
        }
        if !(self.raster_spacing > 0.0) {
            return Err(CliError::invalid("raster_spacing must be positive"));
        }
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(CliError::invalid("run name must be non-empty without whitespace"));
        }
        self.train.validate()?;
        Ok(())
    }

    /// The manifest with every default written out and paths absolute.
    pub fn resolved_toml(&self) -> CliResult<String> {
        let mut m = self.clone();
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        m.input = m.input.as_deref().map(abs);
        m.ground_truth = m.ground_truth.as_deref().map(abs);
        m.output = abs(&m.output);
        toml::to_string(&m).map_err(|e| CliError::internal(e.to_string()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `a.b.c=value`, where value is parsed as TOML and falls back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::invalid(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::invalid(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
