//! TOML run configuration: sections [system], [sweep], [numerics], [output].
//! Unknown keys are rejected so typos fail loudly.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use std::path::Path;

use ctd_core::{PhaseFunction, SystemSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Phase function by variant name, e.g. { Harmonic = { omega = 1.0 } }
    /// or { Quartic = { a = 0.25, shift = 0.0 } }.
    pub hamiltonian: PhaseFunction,
    /// Driver, e.g. "LinearP" or "LinearQ".
    pub driver: PhaseFunction,
    pub hbar: f64,
    pub dof: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub e: Vec<f64>,
    pub e_prime: Vec<f64>,
    pub tau: Vec<f64>,
    pub epsilon: f64,
    #[serde(default = "default_pathways")]
    pub pathways: Vec<String>,
}

fn default_pathways() -> Vec<String> {
    vec!["all".into()]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    pub grid_n: usize,
    pub box_min: f64,
    pub box_max: f64,
    pub j_max: Option<i64>,
    /// Simpson panels per half time axis for the quadrature double-FT.
    pub quadrature_steps: usize,
    pub background_half_width: f64,
    pub background_base_resolution: usize,
    /// Frozen per-run σ offset for the semiclassical sum.
    pub sigma_offset: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            grid_n: 512,
            box_min: -10.0,
            box_max: 10.0,
            j_max: None,
            quadrature_steps: 1 << 16,
            background_half_width: 6.0,
            background_base_resolution: 64,
            sigma_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: String,
    pub records: String,
    pub orbit_records: String,
    pub report: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            csv: "results.csv".into(),
            records: "results.jsonl".into(),
            orbit_records: "orbits.jsonl".into(),
            report: "report.json".into(),
        }
    }
}

/// Pathway selection resolved from config or the --pathways flag.
#[derive(Debug, Clone, Copy, Default)]
pub struct PathwaySelection {
    pub semiclassical: bool,
    pub eigen: bool,
    pub double_ft: bool,
}

impl PathwaySelection {
    pub fn parse(names: &[String]) -> Result<Self> {
        let mut sel = Self::default();
        for name in names {
            match name.as_str() {
                "all" => {
                    sel.semiclassical = true;
                    sel.eigen = true;
                    sel.double_ft = true;
                }
                "semiclassical" | "sc" => sel.semiclassical = true,
                "eigen" | "eigen_sum" => sel.eigen = true,
                "double_ft" => sel.double_ft = true,
                other => bail!("unknown pathway {other:?} (valid: semiclassical, eigen, double_ft, all)"),
            }
        }
        if !(sel.semiclassical || sel.eigen || sel.double_ft) {
            bail!("no pathway selected");
        }
        Ok(sel)
    }

    pub fn needs_quantum(&self) -> bool {
        self.eigen || self.double_ft
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Config = toml::from_str(&text)
            .with_context(|| format!("config parse error in {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let sweep = &self.sweep;
        if sweep.e.is_empty() || sweep.e_prime.is_empty() || sweep.tau.is_empty() {
            bail!("sweep lists e, e_prime, tau must be nonempty");
        }
        if !(sweep.epsilon > 0.0) {
            bail!("epsilon must be positive, got {}", sweep.epsilon);
        }
        if !(self.system.hbar > 0.0) {
            bail!("hbar must be positive, got {}", self.system.hbar);
        }
        if self.numerics.grid_n < 8 || !(self.numerics.box_min < self.numerics.box_max) {
            bail!("bad numerics grid/box");
        }
        self.system_spec()?;
        Ok(())
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        SystemSpec::new(
            self.system.hamiltonian.clone(),
            self.system.driver.clone(),
            self.system.hbar,
            self.system.dof,
        )
        .map_err(|e| anyhow::anyhow!("invalid system: {e}"))
    }

    /// Grid points in deterministic (E, E', τ) nesting order.
    pub fn grid_points(&self) -> Vec<(f64, f64, f64)> {
        let mut points = Vec::new();
        for &e in &self.sweep.e {
            for &ep in &self.sweep.e_prime {
                for &tau in &self.sweep.tau {
                    points.push((e, ep, tau));
                }
            }
        }
        points
    }
}
