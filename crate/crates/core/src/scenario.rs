//! Declarative scenario runner behind the command-line tool.
//!
//! A scenario is a flat JSON document describing one state, a base detection
//! chain, optional per-panel overrides and an optional parameter sweep. It
//! produces either Wigner grids (one per panel, with a quality report) or a
//! sweep table of a closed-form quantity, plus a manifest that hashes every
//! emitted file. Data files are a pure function of the configuration; the
//! only timestamp lives in the manifest.
//!
//! Decibel convention, for both squeezing and amplification:
//! `dB = (20 / ln 10) · r`, so `r = 3` is 26.06 dB and `r = 2.3` is 19.98 dB.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::{AmplifierParams, CrystalParams, DetectionChain, EffectiveLoss};
use crate::error::{Error, Result};
use crate::homodyne::{sample_quadratures, PhaseSchedule};
use crate::metrics::{fidelity_bsv, wigner_depth, QualityReport};
use crate::states::{StateKind, StateSpec};
use crate::tomography::{
    closed_form_grid, reconstruct, reconstruct_analytic, AxisSummary, ReconstructionConfig,
    WignerSidecar, WIGNER_FORMAT,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "homotomo-manifest/1";
/// Environment variable naming the parent directory for scenario outputs
/// when neither `--out` nor `output_dir` is given.
pub const OUT_DIR_ENV: &str = "HOMOTOMO_OUT_DIR";

/// Decibels per unit of squeezing or gain parameter, `20 / ln 10`.
pub fn db_per_r() -> f64 {
    20.0 / std::f64::consts::LN_10
}

pub fn r_to_db(r: f64) -> f64 {
    r * db_per_r()
}

pub fn db_to_r(db: f64) -> f64 {
    db / db_per_r()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// One Wigner grid per panel plus a quality report.
    Grids,
    /// A table of `quantity` over the sweep (0, 1 or 2 dimensions).
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Closed-form overlap fidelity; Gaussian states only.
    Fidelity,
    /// Closed-form value at the origin; single-photon states only.
    Depth,
    EpsilonR,
}

impl Quantity {
    fn column(self) -> &'static str {
        match self {
            Quantity::Fidelity => "fidelity",
            Quantity::Depth => "depth",
            Quantity::EpsilonR => "epsilon_r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Infinite statistics.
    #[default]
    Analytic,
    /// Monte-Carlo homodyne data, reconstructed from empirical
    /// characteristic functions.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticMethod {
    /// Tabulate the blurred closed form directly.
    #[default]
    ClosedForm,
    /// Run the characteristic-function inversion on the noise-free CF.
    Inversion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    RRaw,
    AmpDb,
    EtaD,
    EtaI,
    R1,
    R1Db,
}

impl SweepParam {
    fn column(self) -> &'static str {
        match self {
            SweepParam::RRaw => "r_raw",
            SweepParam::AmpDb => "amp_db",
            SweepParam::EtaD => "eta_d",
            SweepParam::EtaI => "eta_i",
            SweepParam::R1 => "r1",
            SweepParam::R1Db => "r1_db",
        }
    }
}

/// One sweep axis: either explicit `values` or `n` uniform points from
/// `start` to `stop` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDim {
    pub param: SweepParam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl SweepDim {
    pub fn range(param: SweepParam, start: f64, stop: f64, n: usize) -> Self {
        Self {
            param,
            values: None,
            start: Some(start),
            stop: Some(stop),
            n: Some(n),
        }
    }

    fn points(&self, key: &str) -> Result<Vec<f64>> {
        let pts = match (&self.values, self.start, self.stop, self.n) {
            (Some(v), None, None, None) => v.clone(),
            (None, Some(a), Some(b), Some(n)) => {
                if n == 0 {
                    return Err(Error::config(format!("{key}.n"), "need at least one point"));
                }
                crate::tomography::linspace(a, b, n)
            }
            _ => {
                return Err(Error::config(
                    key,
                    "give either `values` or all of `start`, `stop` and `n`",
                ))
            }
        };
        if pts.is_empty() {
            return Err(Error::config(
                format!("{key}.values"),
                "need at least one value",
            ));
        }
        if let Some(v) = pts.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(
                format!("{key}.values"),
                format!("non-finite value {v}"),
            ));
        }
        Ok(pts)
    }
}

/// Per-panel (or per-series) overrides of the base parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Panel {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplifier: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amp_db: Option<f64>,
}

impl Panel {
    pub fn labeled(label: &str) -> Self {
        Self {
            label: label.to_string(),
            ..Self::default()
        }
    }
}

/// Optional replacements for the default [`ReconstructionConfig`] fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_xi: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_theta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apodization_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale_gain: Option<f64>,
}

impl ReconstructionOverrides {
    fn apply(&self, mut c: ReconstructionConfig) -> ReconstructionConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        take!(
            xi_max,
            n_xi,
            n_theta,
            q_half_width,
            p_half_width,
            grid_n,
            apodization_alpha
        );
        if self.spectral_window.is_some() {
            c.spectral_window = self.spectral_window;
        }
        if self.rescale_gain.is_some() {
            c.rescale_gain = self.rescale_gain;
        }
        c
    }
}

fn one() -> f64 {
    1.0
}

fn bbo_k() -> f64 {
    CrystalParams::bbo().k()
}

fn bbo_d() -> f64 {
    CrystalParams::bbo().d()
}

fn default_n_per_phase() -> usize {
    100_000
}

fn default_phases() -> PhaseSchedule {
    PhaseSchedule::Uniform { n: 180 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub output: OutputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<Quantity>,
    pub state: StateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1_db: Option<f64>,
    #[serde(default = "one")]
    pub eta_i: f64,
    #[serde(default = "one")]
    pub eta_d: f64,
    #[serde(default)]
    pub amplifier: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amp_db: Option<f64>,
    /// Bulk absorption of the amplifier crystal, 1/m.
    #[serde(default = "bbo_k")]
    pub crystal_k: f64,
    /// Amplifier crystal length, m.
    #[serde(default = "bbo_d")]
    pub crystal_d: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub panels: Vec<Panel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepDim>,
    #[serde(default)]
    pub mode: Mode,
    /// How analytic-mode grids are produced; sampled mode always inverts.
    #[serde(default)]
    pub method: AnalyticMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_per_phase")]
    pub n_per_phase: usize,
    #[serde(default = "default_phases")]
    pub phases: PhaseSchedule,
    /// Also write each simulated dataset (large) next to its grid.
    #[serde(default)]
    pub write_datasets: bool,
    #[serde(default)]
    pub reconstruction: ReconstructionOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// A minimal grid scenario for `state`; every other field at its default.
    pub fn new(id: &str, output: OutputKind, state: StateKind) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.to_string(),
            description: String::new(),
            output,
            quantity: None,
            state,
            r1: None,
            r1_db: None,
            eta_i: 1.0,
            eta_d: 1.0,
            amplifier: false,
            r_raw: None,
            amp_db: None,
            crystal_k: bbo_k(),
            crystal_d: bbo_d(),
            panels: Vec::new(),
            sweep: Vec::new(),
            mode: Mode::Analytic,
            method: AnalyticMethod::ClosedForm,
            seed: 0,
            n_per_phase: default_n_per_phase(),
            phases: default_phases(),
            write_datasets: false,
            reconstruction: ReconstructionOverrides::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every field and resolves every panel and sweep point, so a
    /// config that validates can only fail at run time for numerical reasons.
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    fn plan(&self) -> Result<Plan> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::config("id", "use letters, digits, `_` or `-` only"));
        }
        if self.mode == Mode::Sampled && self.n_per_phase == 0 {
            return Err(Error::config(
                "n_per_phase",
                "at least one sample per phase is required",
            ));
        }
        self.phases
            .phases()
            .map_err(|e| Error::config("phases", e.to_string()))?;

        let panels = if self.panels.is_empty() {
            vec![Panel::labeled("main")]
        } else {
            self.panels.clone()
        };
        let mut seen = BTreeSet::new();
        for (i, p) in panels.iter().enumerate() {
            let key = format!("panels[{i}].label");
            if !valid_label(&p.label) {
                return Err(Error::config(
                    key,
                    "start with a letter or digit, then use letters, digits, `_`, `-` or `.`",
                ));
            }
            if matches!(
                p.label.as_str(),
                "report" | "manifest" | "scenario" | "sweep"
            ) {
                return Err(Error::config(
                    key,
                    format!("`{}` is reserved for output files", p.label),
                ));
            }
            if !seen.insert(p.label.clone()) {
                return Err(Error::config(key, format!("duplicate label `{}`", p.label)));
            }
        }

        match self.output {
            OutputKind::Grids => {
                if !self.sweep.is_empty() {
                    return Err(Error::config(
                        "sweep",
                        "grid scenarios take no sweep; use panels",
                    ));
                }
                if self.quantity.is_some() {
                    return Err(Error::config(
                        "quantity",
                        "only sweep scenarios take a quantity",
                    ));
                }
                let resolved = panels
                    .iter()
                    .enumerate()
                    .map(|(i, p)| self.resolve(&format!("panels[{i}]"), p, &[]))
                    .collect::<Result<Vec<_>>>()?;
                for (i, r) in resolved.iter().enumerate() {
                    let cfg = self.reconstruction_config(r);
                    cfg.validate().map_err(|e| {
                        Error::config(format!("panels[{i}].reconstruction"), e.to_string())
                    })?;
                }
                Ok(Plan::Grids(resolved))
            }
            OutputKind::Sweep => {
                let quantity = self
                    .quantity
                    .ok_or_else(|| Error::config("quantity", "sweep scenarios need a quantity"))?;
                if self.sweep.len() > 2 {
                    return Err(Error::config(
                        "sweep",
                        format!(
                            "at most two dimensions (curve or surface), got {}",
                            self.sweep.len()
                        ),
                    ));
                }
                if self.sweep.len() == 2 && self.sweep[0].param == self.sweep[1].param {
                    return Err(Error::config(
                        "sweep[1].param",
                        "both dimensions sweep the same parameter",
                    ));
                }
                let axes = self
                    .sweep
                    .iter()
                    .enumerate()
                    .map(|(i, d)| d.points(&format!("sweep[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                let mut points = Vec::new();
                for (i, p) in panels.iter().enumerate() {
                    let key = format!("panels[{i}]");
                    for coords in cartesian(&axes) {
                        let assignment: Vec<(SweepParam, f64)> = self
                            .sweep
                            .iter()
                            .map(|d| d.param)
                            .zip(coords.iter().copied())
                            .collect();
                        let resolved = self.resolve(&key, p, &assignment)?;
                        check_quantity(quantity, &resolved.state, &key)?;
                        points.push(SweepPoint {
                            series: p.label.clone(),
                            coords,
                            resolved,
                        });
                    }
                }
                Ok(Plan::Sweep { quantity, points })
            }
        }
    }

    /// Base parameters, then panel overrides, then sweep coordinates.
    fn resolve(&self, key: &str, panel: &Panel, sweep: &[(SweepParam, f64)]) -> Result<Resolved> {
        let wrap = |field: &str, e: Error| Error::config(format!("{key}.{field}"), e.to_string());
        let mut r1 = squeeze_value(self.r1, self.r1_db).map_err(|e| Error::config("r1", e))?;
        if panel.r1.is_some() || panel.r1_db.is_some() {
            r1 = squeeze_value(panel.r1, panel.r1_db)
                .map_err(|e| Error::config(format!("{key}.r1"), e))?;
        }
        let mut eta_i = panel.eta_i.unwrap_or(self.eta_i);
        let mut eta_d = panel.eta_d.unwrap_or(self.eta_d);
        let mut amplifier = panel.amplifier.unwrap_or(self.amplifier);
        let mut gain =
            squeeze_value(self.r_raw, self.amp_db).map_err(|e| Error::config("r_raw", e))?;
        if panel.r_raw.is_some() || panel.amp_db.is_some() {
            gain = squeeze_value(panel.r_raw, panel.amp_db)
                .map_err(|e| Error::config(format!("{key}.r_raw"), e))?;
        }
        let mut clamped = false;
        for &(param, v) in sweep {
            match param {
                SweepParam::RRaw => {
                    amplifier = true;
                    gain = Some(v);
                }
                SweepParam::AmpDb => {
                    amplifier = true;
                    gain = Some(db_to_r(v));
                }
                SweepParam::EtaD => eta_d = v,
                SweepParam::EtaI => eta_i = v,
                SweepParam::R1 => r1 = Some(v),
                SweepParam::R1Db => r1 = Some(db_to_r(v)),
            }
        }

        let state = match (self.state.is_squeezed(), r1) {
            (true, Some(r)) => StateSpec::new(self.state, r).map_err(|e| wrap("r1", e))?,
            (true, None) => {
                return Err(Error::config(
                    "r1",
                    format!("{} needs `r1` or `r1_db`", self.state),
                ))
            }
            (false, Some(r)) if r != 0.0 => {
                return Err(Error::config(
                    "r1",
                    format!("{} takes no squeezing", self.state),
                ))
            }
            (false, _) => StateSpec::new(self.state, 0.0).map_err(|e| wrap("r1", e))?,
        };

        let amp = if amplifier {
            let crystal = CrystalParams::new(self.crystal_k, self.crystal_d)
                .map_err(|e| Error::config("crystal_k", e.to_string()))?;
            let mut r_raw = gain.ok_or_else(|| {
                Error::config(
                    format!("{key}.r_raw"),
                    "amplifier enabled but neither `r_raw` nor `amp_db` given",
                )
            })?;
            let floor = 0.5 * crystal.absorption();
            if !sweep.is_empty() && r_raw >= 0.0 && r_raw < floor {
                // a sweep from r_raw = 0 starts at the gain that just
                // compensates absorption
                r_raw = floor;
                clamped = true;
            }
            Some(AmplifierParams::new(r_raw, crystal).map_err(|e| wrap("r_raw", e))?)
        } else {
            None
        };
        let chain = DetectionChain::new(eta_i, eta_d, amp).map_err(|e| wrap("eta", e))?;
        let eff = chain.effective_loss().map_err(|e| wrap("chain", e))?;
        Ok(Resolved {
            label: panel.label.clone(),
            state,
            chain,
            eff,
            clamped,
        })
    }

    fn reconstruction_config(&self, r: &Resolved) -> ReconstructionConfig {
        let base = match self.mode {
            Mode::Analytic => ReconstructionConfig::analytic(&r.state, &r.eff),
            Mode::Sampled => ReconstructionConfig::sampled(&r.state, &r.eff),
        };
        self.reconstruction.apply(base)
    }
}

/// Labels become file names: no separators, no leading dot.
fn valid_label(label: &str) -> bool {
    label
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphanumeric())
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn squeeze_value(r: Option<f64>, db: Option<f64>) -> std::result::Result<Option<f64>, String> {
    match (r, db) {
        (Some(_), Some(_)) => Err("give the value in r or in dB, not both".into()),
        (Some(r), None) => Ok(Some(r)),
        (None, Some(db)) => Ok(Some(db_to_r(db))),
        (None, None) => Ok(None),
    }
}

fn check_quantity(q: Quantity, state: &StateSpec, key: &str) -> Result<()> {
    let ok = match q {
        Quantity::Fidelity => state.kind().is_gaussian(),
        Quantity::Depth => !state.kind().is_gaussian(),
        Quantity::EpsilonR => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::config(
            "quantity",
            format!(
                "`{}` has no closed form for {} ({key})",
                q.column(),
                state.kind()
            ),
        ))
    }
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone)]
struct Resolved {
    label: String,
    state: StateSpec,
    chain: DetectionChain,
    eff: EffectiveLoss,
    clamped: bool,
}

#[derive(Debug, Clone)]
struct SweepPoint {
    series: String,
    coords: Vec<f64>,
    resolved: Resolved,
}

enum Plan {
    Grids(Vec<Resolved>),
    Sweep {
        quantity: Quantity,
        points: Vec<SweepPoint>,
    },
}

/// Command-line adjustments applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write here instead of the configured or default directory.
    pub out_dir: Option<PathBuf>,
    /// Force Monte-Carlo mode.
    pub sampled: bool,
    pub seed: Option<u64>,
}

impl RunOptions {
    /// `--out`, then `output_dir`, then `$HOMOTOMO_OUT_DIR/<id>`, then `out/<id>`.
    pub fn output_dir(&self, config: &ScenarioConfig) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        if let Some(d) = &config.output_dir {
            return d.clone();
        }
        let parent = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"));
        parent.join(&config.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub scenario: String,
    pub tool: String,
    /// RFC 3339 creation time; the only non-reproducible field of a run.
    pub created: String,
    pub mode: Mode,
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Serialize)]
struct PanelReport {
    label: String,
    grid: String,
    source: String,
    state: StateSpec,
    chain: DetectionChain,
    effective_loss: EffectiveLoss,
    report: QualityReport,
    /// Closed-form fidelity for Gaussian states.
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity_closed_form: Option<f64>,
    /// Closed-form value at the origin for single-photon states.
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_closed_form: Option<f64>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct GridReport {
    format: &'static str,
    scenario: String,
    mode: Mode,
    panels: Vec<PanelReport>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

/// Runs a scenario and writes its outputs; the manifest is written last.
pub fn run_scenario(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut config = config.clone();
    if opts.sampled {
        config.mode = Mode::Sampled;
    }
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let plan = config.plan()?;
    let dir = opts.output_dir(&config);
    fs::create_dir_all(&dir)?;

    let mut out = Outputs {
        dir: dir.clone(),
        files: Vec::new(),
    };
    let mut warnings = Vec::new();
    let mut notes = Vec::new();

    let mut echo = config.clone();
    echo.output_dir = None;
    out.write("scenario.json", &pretty_json(&echo)?)?;

    match plan {
        Plan::Grids(panels) => run_grids(&config, &panels, &mut out, &mut warnings, &mut notes)?,
        Plan::Sweep { quantity, points } => {
            if config.mode == Mode::Sampled {
                notes.push(
                    "sweep quantities are closed-form; sampled mode does not change them".into(),
                );
            }
            run_sweep(&config, quantity, &points, &mut out, &mut notes)?
        }
    }

    out.files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        scenario: config.id.clone(),
        tool: format!("homotomo {}", env!("CARGO_PKG_VERSION")),
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        mode: config.mode,
        files: out.files,
        warnings,
        notes,
    };
    fs::write(dir.join("manifest.json"), pretty_json(&manifest)?)?;
    Ok(RunSummary {
        out_dir: dir,
        manifest,
    })
}

fn run_grids(
    config: &ScenarioConfig,
    panels: &[Resolved],
    out: &mut Outputs,
    warnings: &mut Vec<String>,
    notes: &mut Vec<String>,
) -> Result<()> {
    let mut reports = Vec::with_capacity(panels.len());
    for (index, panel) in panels.iter().enumerate() {
        let rc = config.reconstruction_config(panel);
        let eps = panel.eff.epsilon_r;
        let mut dataset_sha256 = None;
        let (grid, source) = match (config.mode, config.method) {
            (Mode::Analytic, AnalyticMethod::ClosedForm) => (
                closed_form_grid(&panel.state, eps, rc.q_axis(), rc.p_axis())?,
                "closed_form",
            ),
            (Mode::Analytic, AnalyticMethod::Inversion) => (
                reconstruct_analytic(&panel.state, &panel.chain, &rc)?,
                "analytic_reconstruction",
            ),
            (Mode::Sampled, _) => {
                let phases = config.phases.phases()?;
                let seed = config.seed.wrapping_add(index as u64);
                let ds = sample_quadratures(
                    &panel.state,
                    &panel.chain,
                    &phases,
                    config.n_per_phase,
                    seed,
                )?;
                dataset_sha256 = Some(ds.content_hash());
                if config.write_datasets {
                    let stem = format!("{}_quadratures", panel.label);
                    let (csv, json) = ds.write(&out.dir, &stem)?;
                    for path in [csv, json] {
                        let bytes = fs::read(&path)?;
                        out.record(
                            &path.file_name().expect("file name").to_string_lossy(),
                            &bytes,
                        );
                    }
                }
                (reconstruct(&ds, &rc)?, "sampled_reconstruction")
            }
        };
        let panel_warnings: Vec<String> = grid.metadata.warnings.clone();
        warnings.extend(
            panel_warnings
                .iter()
                .map(|w| format!("{}: {w}", panel.label)),
        );
        let norm = grid.integral();
        if panel_warnings.is_empty() && (norm - 1.0).abs() > 0.01 {
            warnings.push(format!(
                "{}: grid integral {norm:.5} differs from 1 by more than 0.01",
                panel.label
            ));
        }

        let sidecar = WignerSidecar {
            format: WIGNER_FORMAT.to_string(),
            label: panel.label.clone(),
            source: source.to_string(),
            state: panel.state,
            chain: Some(panel.chain),
            epsilon_r: eps,
            config: Some(rc),
            dataset_sha256,
            q_axis: AxisSummary::of(grid.q_axis()),
            p_axis: AxisSummary::of(grid.p_axis()),
            metadata: grid.metadata.clone(),
        };
        let csv_name = format!("{}.csv", panel.label);
        out.write(&csv_name, grid.to_csv_string().as_bytes())?;
        out.write(&format!("{}.json", panel.label), &pretty_json(&sidecar)?)?;

        let ideal = closed_form_grid(
            &panel.state,
            0.0,
            grid.q_axis().to_vec(),
            grid.p_axis().to_vec(),
        )?;
        let report = QualityReport::evaluate(&ideal, &grid, eps)?;
        let r1 = panel.state.r1();
        reports.push(PanelReport {
            label: panel.label.clone(),
            grid: csv_name,
            source: source.to_string(),
            state: panel.state,
            chain: panel.chain,
            effective_loss: panel.eff,
            report,
            fidelity_closed_form: panel
                .state
                .kind()
                .is_gaussian()
                .then(|| fidelity_bsv(r1, eps))
                .transpose()?,
            depth_closed_form: (!panel.state.kind().is_gaussian())
                .then(|| wigner_depth(r1, eps))
                .transpose()?,
            warnings: panel_warnings,
        });
    }
    if config.mode == Mode::Sampled {
        notes.push(format!(
            "panel i is simulated with seed {} + i; {} samples per phase",
            config.seed, config.n_per_phase
        ));
    }
    let report = GridReport {
        format: "homotomo-report/1",
        scenario: config.id.clone(),
        mode: config.mode,
        panels: reports,
    };
    out.write("report.json", &pretty_json(&report)?)
}

fn run_sweep(
    config: &ScenarioConfig,
    quantity: Quantity,
    points: &[SweepPoint],
    out: &mut Outputs,
    notes: &mut Vec<String>,
) -> Result<()> {
    let values = points
        .par_iter()
        .map(|pt| {
            let eps = pt.resolved.eff.epsilon_r;
            let r1 = pt.resolved.state.r1();
            let v = match quantity {
                Quantity::Fidelity => fidelity_bsv(r1, eps)?,
                Quantity::Depth => wigner_depth(r1, eps)?,
                Quantity::EpsilonR => eps,
            };
            Ok((eps, v))
        })
        .collect::<Result<Vec<_>>>()?;

    if points.iter().any(|p| p.resolved.clamped) {
        let floor = 0.5 * config.crystal_k * config.crystal_d;
        notes.push(format!(
            "gain values below k·d/2 = {floor:e} are evaluated at k·d/2 (zero effective squeezing)"
        ));
    }

    let mut csv = String::new();
    csv.push_str("series");
    for d in &config.sweep {
        let _ = write!(csv, ",{}", d.param.column());
    }
    let _ = writeln!(
        csv,
        ",epsilon_r{}",
        if quantity == Quantity::EpsilonR {
            String::new()
        } else {
            format!(",{}", quantity.column())
        }
    );
    for (pt, (eps, v)) in points.iter().zip(values) {
        csv.push_str(&pt.series);
        for c in &pt.coords {
            let _ = write!(csv, ",{c}");
        }
        let _ = write!(csv, ",{eps:.16e}");
        if quantity != Quantity::EpsilonR {
            let _ = write!(csv, ",{v:.16e}");
        }
        csv.push('\n');
    }
    let name = match config.sweep.len() {
        0 => "point.csv",
        1 => "curve.csv",
        _ => "surface.csv",
    };
    out.write(name, csv.as_bytes())
}

/// Sweep CSV parsed back into columns, for consumers and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl SweepTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("empty sweep table".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut fields = line.split(',');
            let series = fields.next().unwrap_or_default().to_string();
            let nums = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("`{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if nums.len() + 1 != header.len() {
                return Err(Error::Format(format!(
                    "row `{line}` does not match the header"
                )));
            }
            rows.push((series, nums));
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name).map(|i| i - 1)
    }
}

/// Built-in scenarios reproducing the published figures.
pub const PRESET_IDS: [&str; 5] = ["fig2", "fig3", "fig5", "fig6", "fig7"];

fn bbo_scenario(
    id: &str,
    description: &str,
    output: OutputKind,
    state: StateKind,
) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(id, output, state);
    c.description = description.to_string();
    c.r1 = Some(3.0);
    c.eta_i = 0.9999;
    c
}

fn plain(label: &str, eta_d: f64) -> Panel {
    Panel {
        eta_i: Some(1.0),
        eta_d: Some(eta_d),
        amplifier: Some(false),
        ..Panel::labeled(label)
    }
}

fn amplified(label: &str, eta_d: f64, r_raw: f64) -> Panel {
    Panel {
        eta_d: Some(eta_d),
        amplifier: Some(true),
        r_raw: Some(r_raw),
        ..Panel::labeled(label)
    }
}

pub fn preset(id: &str) -> Option<ScenarioConfig> {
    let c = match id {
        "fig2" => {
            let mut c = bbo_scenario(
                "fig2",
                "Bright squeezed vacuum, r1 = 3 (26 dB): ideal; eta_d = 95%; eta_d = 95% after 20 dB (r2 = 2.3) of BBO amplification",
                OutputKind::Grids,
                StateKind::SqueezedVacuum,
            );
            c.panels = vec![
                plain("a_ideal", 1.0),
                plain("b_eta95", 0.95),
                amplified("c_eta95_amp20db", 0.95, 2.3),
            ];
            c
        }
        "fig3" => {
            let mut c = bbo_scenario(
                "fig3",
                "Fidelity of bright squeezed vacuum vs amplification r2 in [0, 4] (81 points) for r1 in {1.7, 3} and eta_d in {45, 75, 95}%",
                OutputKind::Sweep,
                StateKind::SqueezedVacuum,
            );
            c.quantity = Some(Quantity::Fidelity);
            c.amplifier = true;
            c.panels = [1.7, 3.0]
                .iter()
                .flat_map(|&r1| {
                    [0.45, 0.75, 0.95].into_iter().map(move |eta| Panel {
                        r1: Some(r1),
                        eta_d: Some(eta),
                        ..Panel::labeled(&format!("r1_{}_eta_{}", r1, (eta * 100.0_f64).round()))
                    })
                })
                .collect();
            c.sweep = vec![SweepDim::range(SweepParam::RRaw, 0.0, 4.0, 81)];
            c
        }
        "fig5" => {
            let mut c = bbo_scenario(
                "fig5",
                "Squeezed single photon, r1 = 3 (26 dB): ideal; eta_d = 95%; eta_d = 95% after 20 dB (r2 = 2.3) of BBO pre-amplification",
                OutputKind::Grids,
                StateKind::SqueezedSinglePhoton,
            );
            c.panels = vec![
                plain("a_ideal", 1.0),
                plain("b_eta95", 0.95),
                amplified("c_eta95_amp20db", 0.95, 2.3),
            ];
            c
        }
        "fig6" => {
            let mut c = bbo_scenario(
                "fig6",
                "Squeezed single photon, r1 = 3, eta_d = 45%: no amplification; 20 dB (r2 = 2.3); 30 dB (r2 = 3.45) of BBO pre-amplification",
                OutputKind::Grids,
                StateKind::SqueezedSinglePhoton,
            );
            c.panels = vec![
                plain("a_eta45", 0.45),
                amplified("b_eta45_amp20db", 0.45, 2.3),
                amplified("c_eta45_amp30db", 0.45, 3.45),
            ];
            c
        }
        "fig7" => {
            let mut c = bbo_scenario(
                "fig7",
                "Depth W(0,0) of the squeezed single photon, r1 = 3, over eta_d in [40, 100]% and r2 in [0, 4] with BBO amplification",
                OutputKind::Sweep,
                StateKind::SqueezedSinglePhoton,
            );
            c.quantity = Some(Quantity::Depth);
            c.amplifier = true;
            c.panels = vec![Panel::labeled("depth")];
            c.sweep = vec![
                SweepDim::range(SweepParam::EtaD, 0.4, 1.0, 61),
                SweepDim::range(SweepParam::RRaw, 0.0, 4.0, 81),
            ];
            c
        }
        _ => return None,
    };
    Some(c)
}

/// Resolves a command-line argument: a preset id or a path to a JSON config.
pub fn load_config(arg: &str) -> Result<ScenarioConfig> {
    if let Some(c) = preset(arg) {
        return Ok(c);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::config(
            "config",
            format!(
                "`{arg}` is neither a preset ({}) nor an existing file",
                PRESET_IDS.join(", ")
            ),
        ));
    }
    ScenarioConfig::load(path)
}

/// Text table of the built-in presets.
pub fn list_presets() -> String {
    let mut s = String::from("id    output  state                   description\n");
    for id in PRESET_IDS {
        let c = preset(id).expect("every listed preset exists");
        let output = match c.output {
            OutputKind::Grids => "grids",
            OutputKind::Sweep => "sweep",
        };
        let _ = writeln!(
            s,
            "{id:<5} {output:<7} {:<23} {}",
            c.state.to_string(),
            c.description
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn db_convention() {
        assert_relative_eq!(r_to_db(3.0), 26.057_668_914_195_11, max_relative = 1e-12);
        assert_relative_eq!(r_to_db(2.3), 19.977_546_167_549_58, max_relative = 1e-12);
        assert_relative_eq!(db_to_r(r_to_db(1.234)), 1.234, max_relative = 1e-15);
    }

    #[test]
    fn presets_validate() {
        for id in PRESET_IDS {
            preset(id).unwrap().validate().unwrap();
        }
        assert!(preset("fig4").is_none());
        assert_eq!(list_presets().lines().count(), 1 + PRESET_IDS.len());
    }

    #[test]
    fn presets_echo_bbo_constants() {
        for id in PRESET_IDS {
            let c = preset(id).unwrap();
            assert_eq!(
                (c.crystal_k, c.crystal_d, c.eta_i, c.r1),
                (0.1, 1e-3, 0.9999, Some(3.0))
            );
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = |json: &str| match ScenarioConfig::from_json(json) {
            Err(Error::Config { key, .. }) => key,
            Err(e) => format!("other: {e}"),
            Ok(_) => "ok".into(),
        };
        let base =
            r#""schema_version": 1, "id": "t", "output": "grids", "state": "squeezed_vacuum""#;
        assert_eq!(err(&format!("{{{base}}}")), "r1");
        assert_eq!(
            err(&format!("{{{base}, \"r1\": 1, \"eta_d\": 1.5}}")),
            "panels[0].eta"
        );
        assert_eq!(
            err(r#"{"schema_version": 2, "id": "t", "output": "grids", "state": "vacuum"}"#),
            "schema_version"
        );
        assert_eq!(
            err(&format!("{{{base}, \"r1\": 1, \"amplifier\": true}}")),
            "panels[0].r_raw"
        );
        assert_eq!(err(&format!("{{{base}, \"r1\": 1, \"r1_db\": 3}}")), "r1");
        let sweep = r#""schema_version": 1, "id": "t", "output": "sweep", "state": "squeezed_vacuum", "r1": 1"#;
        assert_eq!(err(&format!("{{{sweep}}}")), "quantity");
        assert_eq!(
            err(&format!("{{{sweep}, \"quantity\": \"depth\"}}")),
            "quantity"
        );
        assert_eq!(
            err(&format!(
                "{{{sweep}, \"quantity\": \"fidelity\", \"sweep\": [{{\"param\": \"eta_d\"}}]}}"
            )),
            "sweep[0]"
        );
        let unknown =
            ScenarioConfig::from_json(&format!("{{{base}, \"r1\": 1, \"bogus\": 0}}")).unwrap_err();
        assert!(unknown.to_string().contains("bogus"));
        assert!(unknown.is_config_error());
    }

    #[test]
    fn sweep_axes_and_clamping() {
        let mut c = preset("fig3").unwrap();
        c.panels.truncate(1);
        let Plan::Sweep { points, .. } = c.plan().unwrap() else {
            panic!("sweep plan")
        };
        assert_eq!(points.len(), 81);
        assert!(points[0].resolved.clamped);
        assert!(!points[1].resolved.clamped);
        assert_eq!(points[0].resolved.eff.r_eff, 0.0);
    }

    #[test]
    fn cartesian_order_is_row_major() {
        let grid = cartesian(&[vec![1.0, 2.0], vec![10.0, 20.0, 30.0]]);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1], vec![1.0, 20.0]);
        assert_eq!(grid[3], vec![2.0, 10.0]);
        assert_eq!(cartesian(&[]), vec![Vec::<f64>::new()]);
    }

    #[test]
    fn sweep_table_round_trip() {
        let t = SweepTable::parse("series,r_raw,epsilon_r,depth\na,0.5,1e-2,-3e-1\n").unwrap();
        assert_eq!(t.column("depth"), Some(2));
        assert_eq!(t.rows[0].1, vec![0.5, 1e-2, -3e-1]);
        assert!(SweepTable::parse("series,x\na,1,2\n").is_err());
    }
}
