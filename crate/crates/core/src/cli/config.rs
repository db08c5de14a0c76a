use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::doubling::DoublingConfig;
use crate::error::{Error, Result};
use crate::path_space::FamilyConfig;

pub const CONFIG_SCHEMA: &str = "cihj.experiment.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Slope constant `L`; defaults to the family slope bound.
    #[serde(default)]
    pub l: Option<f64>,
    /// Rows written to `penalty_pairs.csv`; the summary always covers every pair.
    #[serde(default = "default_csv_rows")]
    pub csv_rows: usize,
}

fn default_csv_rows() -> usize {
    100_000
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { l: None, csv_rows: default_csv_rows() }
    }
}

/// A functional fed to `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    /// The `solve_dp` table of the configured problem.
    Value,
    /// That table with `delta` added at one entry.
    ValuePerturbed { t_idx: usize, member: usize, delta: f64 },
    /// A table CSV as written by `solve`.
    Table { path: PathBuf },
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub phi1: PhiSpec,
    pub phi2: PhiSpec,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { phi1: PhiSpec::Value, phi2: PhiSpec::Value }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiCheckConfig {
    /// Anchor/point pairs drawn from the family.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Grid refinement factors applied to the family grid.
    #[serde(default = "default_refinements")]
    pub refinements: Vec<usize>,
    /// Future step counts for the switch-point exhibit.
    #[serde(default = "default_exhibit_steps")]
    pub exhibit_m_fut: Vec<usize>,
}

fn default_samples() -> usize {
    100
}

fn default_refinements() -> Vec<usize> {
    vec![1, 2, 4]
}

fn default_exhibit_steps() -> Vec<usize> {
    vec![256, 512, 1024]
}

impl Default for CiCheckConfig {
    fn default() -> Self {
        CiCheckConfig {
            samples: default_samples(),
            refinements: default_refinements(),
            exhibit_m_fut: default_exhibit_steps(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub sampling: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schema: Option<String>,
    pub family: FamilyConfig,
    /// More families for `solve`; every check is repeated per family.
    #[serde(default)]
    pub extra_families: Vec<FamilyConfig>,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    pub schedule: Vec<(f64, f64)>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Bellman problem file; the unit-speed problem when absent.
    #[serde(default)]
    pub problem: Option<PathBuf>,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub ci_check: CiCheckConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_tolerance() -> f64 {
    1e-12
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Parse, resolve relative paths against `base`, and validate.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok((cfg, text))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.problem.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output.as_mut() {
            fix(p);
        }
        for phi in [&mut self.compare.phi1, &mut self.compare.phi2] {
            if let PhiSpec::Table { path } = phi {
                fix(path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.schema {
            if s != CONFIG_SCHEMA {
                return Err(Error::Config(format!("config schema `{s}`, expected `{CONFIG_SCHEMA}`")));
            }
        }
        self.doubling()?;
        for f in std::iter::once(&self.family).chain(&self.extra_families) {
            f.build()?;
        }
        if let Some(l) = self.penalty.l {
            if !(l.is_finite() && l >= self.family.slope_bound) {
                return Err(Error::Config(format!(
                    "penalty.l = {l} must be finite and at least the slope bound {}",
                    self.family.slope_bound
                )));
            }
        }
        if self.ci_check.refinements.is_empty() || self.ci_check.refinements.contains(&0) {
            return Err(Error::Config("ci_check.refinements must be non-empty positive factors".into()));
        }
        if self.ci_check.exhibit_m_fut.is_empty() || self.ci_check.exhibit_m_fut.contains(&0) {
            return Err(Error::Config("ci_check.exhibit_m_fut must be non-empty and positive".into()));
        }
        let mut files: Vec<&PathBuf> = self.problem.iter().collect();
        for phi in [&self.compare.phi1, &self.compare.phi2] {
            if let PhiSpec::Table { path } = phi {
                files.push(path);
            }
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn doubling(&self) -> Result<DoublingConfig> {
        DoublingConfig::new(self.schedule.clone(), self.tolerance)
    }

    pub fn penalty_l(&self) -> f64 {
        self.penalty.l.unwrap_or(self.family.slope_bound)
    }
}
