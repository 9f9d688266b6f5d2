//! Experiment configuration: a flat, versioned, human-readable TOML file
//! with one section per pipeline stage.
//!
//! There is no schema migration: the `version` field must match
//! [`CONFIG_VERSION`] exactly, otherwise loading fails hard. The seed is
//! mandatory — no wall-clock fallback — so every run is reproducible from
//! the file alone.

use anyhow::{bail, Context, Result};
use metastab_core::maps::PiecewiseLinearMap;
use metastab_core::noise::NoiseModel;
use metastab_core::scenarios::{self, Scenario};
use metastab_core::wells::{DeltaMatrix, WellError};
use metastab_core::WellId;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// The config format this build reads.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioSection,
    pub noise: NoiseSection,
    pub wells: WellsSection,
    pub grid: GridSection,
    pub simulate: SimulateSection,
    pub resolvent: ResolventSection,
    pub outputs: OutputsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    /// Branch offset of the two-well families; forbidden for `three_well`.
    pub b: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    TwoWell,
    TwoWellA,
    ThreeWell,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Noise sizes, strictly decreasing.
    pub eps_grid: Vec<f64>,
    /// Exponent of the asymmetric upper noise range `ε^q`.
    pub exponent_q: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellsSection {
    /// Hole half-width applied to every adjacent component pair.
    pub delta: f64,
    /// Per-pair replacements for the uniform value.
    #[serde(default)]
    pub overrides: Vec<WellsOverride>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellsOverride {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Ambient cell count: a power of two, at least 256.
    pub n_cells: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n_samples: usize,
    /// Time horizon of the long trajectory run.
    pub horizon: f64,
    /// Base seed; mandatory so runs never depend on the wall clock.
    pub seed: u64,
    pub beta_rule: BetaRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// Clock rate `β = 1/q_ε` (the sped-up convention).
    InverseQ,
    /// Clock rate `β = 1`.
    Unit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventSection {
    /// Resolvent parameters λ, all positive.
    pub lambda: Vec<f64>,
    /// Reduced right-hand side, one entry per well.
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    pub dir: PathBuf,
}

impl ExperimentConfig {
    pub fn kappa(&self) -> usize {
        match self.scenario.kind {
            ScenarioKind::ThreeWell => 3,
            _ => 2,
        }
    }

    pub fn scenario(&self) -> Scenario {
        match self.scenario.kind {
            ScenarioKind::TwoWell => scenarios::two_well(self.scenario.b.unwrap()),
            ScenarioKind::TwoWellA => scenarios::two_well_a(self.scenario.b.unwrap()),
            ScenarioKind::ThreeWell => scenarios::three_well(),
        }
    }

    pub fn delta_matrix(&self, map: &PiecewiseLinearMap) -> Result<DeltaMatrix, WellError> {
        let mut deltas = DeltaMatrix::uniform_adjacent(map, self.wells.delta)?;
        for o in &self.wells.overrides {
            deltas.set(WellId(o.i), WellId(o.j), o.delta);
        }
        Ok(deltas)
    }

    pub fn beta(&self, noise: &NoiseModel) -> f64 {
        match self.simulate.beta_rule {
            BetaRule::InverseQ => 1.0 / noise.q_eps(),
            BetaRule::Unit => 1.0,
        }
    }
}

/// A parsed and validated config together with run-wide provenance: the
/// content hash of the file, the effective seed, and the effective output
/// directory (both after command-line overrides).
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub fn load(path: &Path, seed_override: Option<u64>, out_override: Option<&Path>) -> Result<Loaded> {
    let bytes = fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut hash = String::with_capacity(64);
    for byte in Sha256::digest(&bytes) {
        write!(hash, "{byte:02x}").expect("writing to a string cannot fail");
    }
    let text = std::str::from_utf8(&bytes)
        .with_context(|| format!("config {} is not UTF-8", path.display()))?;
    let config: ExperimentConfig = toml::from_str(text)
        .map_err(|e| anyhow::anyhow!("cannot parse config {}:\n{e}", path.display()))?;
    if config.version != CONFIG_VERSION {
        bail!(
            "config version {} is not supported; this build reads version {CONFIG_VERSION}",
            config.version
        );
    }
    validate(&config)?;
    let seed = seed_override.unwrap_or(config.simulate.seed);
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.outputs.dir.clone());
    Ok(Loaded {
        config,
        hash,
        seed,
        out_dir,
    })
}

fn validate(c: &ExperimentConfig) -> Result<()> {
    match c.scenario.kind {
        ScenarioKind::TwoWell | ScenarioKind::TwoWellA => {
            let b = match c.scenario.b {
                Some(b) => b,
                None => bail!("scenario: the two-well families need the branch offset b"),
            };
            if !(b > 0.0 && b < 0.5) {
                bail!("scenario: b = {b} must lie in (0, 1/2)");
            }
            for &eps in &c.noise.eps_grid {
                if eps >= b {
                    bail!("noise: ε = {eps} must be smaller than b = {b}");
                }
            }
        }
        ScenarioKind::ThreeWell => {
            if c.scenario.b.is_some() {
                bail!("scenario: three_well does not take b");
            }
        }
    }

    if c.noise.eps_grid.is_empty() {
        bail!("noise: eps_grid must not be empty");
    }
    for &eps in &c.noise.eps_grid {
        if !(eps.is_finite() && eps > 0.0) {
            bail!("noise: ε = {eps} must be positive");
        }
    }
    for pair in c.noise.eps_grid.windows(2) {
        if pair[1] >= pair[0] {
            bail!(
                "noise: eps_grid must be strictly decreasing, got {} before {}",
                pair[0],
                pair[1]
            );
        }
    }
    if !(c.noise.exponent_q > 1.0 && c.noise.exponent_q.is_finite()) {
        bail!("noise: exponent_q = {} must exceed 1", c.noise.exponent_q);
    }

    if !(c.wells.delta.is_finite() && c.wells.delta >= 0.0) {
        bail!("wells: delta = {} must be nonnegative", c.wells.delta);
    }
    let kappa = c.kappa();
    for o in &c.wells.overrides {
        if o.i == 0 || o.i > kappa || o.j == 0 || o.j > kappa || o.i == o.j {
            bail!("wells: override ({}, {}) is not a valid well pair", o.i, o.j);
        }
        if !(o.delta.is_finite() && o.delta >= 0.0) {
            bail!("wells: override delta = {} must be nonnegative", o.delta);
        }
    }

    if c.grid.n_cells < 256 || !c.grid.n_cells.is_power_of_two() {
        bail!(
            "grid: n_cells = {} must be a power of two, at least 256",
            c.grid.n_cells
        );
    }

    if c.simulate.n_samples == 0 {
        bail!("simulate: n_samples must be positive");
    }
    if !(c.simulate.horizon.is_finite() && c.simulate.horizon > 0.0) {
        bail!("simulate: horizon = {} must be positive", c.simulate.horizon);
    }

    if c.resolvent.lambda.is_empty() {
        bail!("resolvent: lambda must not be empty");
    }
    for &l in &c.resolvent.lambda {
        if !(l.is_finite() && l > 0.0) {
            bail!("resolvent: λ = {l} must be positive");
        }
    }
    if c.resolvent.g.len() != kappa {
        bail!(
            "resolvent: g has {} entries but the scenario has {kappa} wells",
            c.resolvent.g.len()
        );
    }
    Ok(())
}
