//! Wigner-function reconstruction through characteristic functions.
//!
//! Quadrature samples at phase θ give the ray `C(ξ e^{iθ})` of the joint
//! characteristic function; rescaling the ξ axis by the chain gain removes
//! the attenuation/amplification bias, and a polar inverse Fourier
//! transform (the inverse Radon transform in characteristic-function form)
//! yields `W(q, p)`. No noise deconvolution is attempted: the result is the
//! input Wigner function blurred by a Gaussian of variance `ε_r/2` per axis.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{damped_char_value, damped_second_moment, DetectionChain, EffectiveLoss};
use crate::error::{ensure_finite, Error, Result};
use crate::homodyne::QuadratureDataset;
use crate::states::StateSpec;

/// Values of `|C|` below this are dropped from the inversion sum.
const NEGLIGIBLE_CHAR: f64 = 1e-17;
/// Phases per inversion work unit; fixed so sums do not depend on threads.
const THETA_CHUNK: usize = 8;
const TRUNCATION_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Radius of the characteristic-function disk, in input-state units.
    pub xi_max: f64,
    pub n_xi: usize,
    /// Phases used for analytic grids; sampled grids use the dataset's phases.
    pub n_theta: usize,
    pub q_half_width: f64,
    pub p_half_width: f64,
    pub grid_n: usize,
    /// Gaussian taper `e^{−α ξ²}` applied before inversion.
    pub apodization_alpha: f64,
    /// Per-phase cutoff at `c / σ_θ` (σ_θ the quadrature spread at that
    /// phase), rolled off with a raised cosine over one more `1/σ_θ`.
    #[serde(default)]
    pub spectral_window: Option<f64>,
    /// Override for the rescaling gain `g`; `None` takes it from the chain.
    #[serde(default)]
    pub rescale_gain: Option<f64>,
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(key, why));
        if !(self.xi_max.is_finite() && self.xi_max > 0.0) {
            return bad("xi_max", format!("must be positive, got {}", self.xi_max));
        }
        if self.n_xi < 2 {
            return bad("n_xi", format!("need at least 2 points, got {}", self.n_xi));
        }
        if self.n_theta < 8 {
            return bad(
                "n_theta",
                format!("need at least 8 phases, got {}", self.n_theta),
            );
        }
        if self.grid_n < 32 {
            return bad(
                "grid_n",
                format!("need at least 32 points, got {}", self.grid_n),
            );
        }
        for (key, v) in [
            ("q_half_width", self.q_half_width),
            ("p_half_width", self.p_half_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        if !(self.apodization_alpha.is_finite() && self.apodization_alpha >= 0.0) {
            return bad(
                "apodization_alpha",
                format!("must be non-negative, got {}", self.apodization_alpha),
            );
        }
        if let Some(c) = self.spectral_window {
            if !(c.is_finite() && c > 0.0) {
                return bad("spectral_window", format!("must be positive, got {c}"));
            }
        }
        if let Some(g) = self.rescale_gain {
            if !(g.is_finite() && g > 0.0) {
                return bad("rescale_gain", format!("must be positive, got {g}"));
            }
        }
        Ok(())
    }

    /// Defaults for noise-free grids: ξ reaches 12 envelope standard
    /// deviations of the narrowest phase, the Wigner grid spans ±6 standard
    /// deviations per axis, no taper. Elongated states oscillate faster in
    /// θ, so the phase count grows in steps of 180 with the aspect ratio.
    pub fn analytic(state: &StateSpec, eff: &EffectiveLoss) -> Self {
        let (q_sd, p_sd) = blurred_axis_sd(state, eff.epsilon_r);
        let s = state.squeeze_factor();
        let envelope_min = 0.5 * (s.min(1.0 / s) + eff.epsilon_r);
        let aspect = q_sd.max(p_sd) / q_sd.min(p_sd);
        Self {
            xi_max: 12.0 / envelope_min.sqrt(),
            n_xi: 512,
            n_theta: 180 * (0.5 * aspect).ceil().max(1.0) as usize,
            q_half_width: 6.0 * q_sd,
            p_half_width: 6.0 * p_sd,
            grid_n: 257,
            apodization_alpha: 0.0,
            spectral_window: None,
            rescale_gain: None,
        }
    }

    /// Defaults for Monte-Carlo data: per-phase cutoff at 4 inverse
    /// standard deviations in ξ (where a Gaussian CF is down to e^{−8}), a light Gaussian taper, and a ξ range that just
    /// covers the widest per-phase window.
    pub fn sampled(state: &StateSpec, eff: &EffectiveLoss) -> Self {
        let base = Self::analytic(state, eff);
        let window = 4.0;
        let (q_sd, p_sd) = blurred_axis_sd(state, eff.epsilon_r);
        let xi_max = (window + 1.0) / q_sd.min(p_sd);
        Self {
            xi_max,
            n_xi: 256,
            apodization_alpha: 1e-3 / (xi_max * xi_max),
            spectral_window: Some(window),
            ..base
        }
    }

    pub fn q_axis(&self) -> Vec<f64> {
        linspace(-self.q_half_width, self.q_half_width, self.grid_n)
    }

    pub fn p_axis(&self) -> Vec<f64> {
        linspace(-self.p_half_width, self.p_half_width, self.grid_n)
    }

    fn gain(&self, chain: &DetectionChain) -> Result<f64> {
        match self.rescale_gain {
            Some(g) => Ok(g),
            None => Ok(chain.effective_loss()?.gain_scale),
        }
    }
}

/// Standard deviations of the reconstructed (blurred) state along q and p.
fn blurred_axis_sd(state: &StateSpec, epsilon: f64) -> (f64, f64) {
    (
        (state.quadrature_second_moment(0.0) + 0.5 * epsilon).sqrt(),
        (state.quadrature_second_moment(0.5 * PI) + 0.5 * epsilon).sqrt(),
    )
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + i as f64 * step })
                .collect()
        }
    }
}

/// Characteristic function sampled on rays: `values[[t, k]] = C(ξ_k e^{iθ_t})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarCharGrid {
    xi: Vec<f64>,
    theta: Vec<f64>,
    values: Array2<Complex64>,
    /// Quadrature standard deviation at each phase, in the units of `1/ξ`.
    phase_sd: Vec<f64>,
}

impl PolarCharGrid {
    pub fn new(
        xi_max: f64,
        theta: Vec<f64>,
        values: Array2<Complex64>,
        phase_sd: Vec<f64>,
    ) -> Result<Self> {
        let (n_t, n_xi) = values.dim();
        if n_t != theta.len() || n_t != phase_sd.len() {
            return Err(Error::AxisMismatch(format!(
                "{} phases, {} spreads, {} value rows",
                theta.len(),
                phase_sd.len(),
                n_t
            )));
        }
        if n_xi < 2 || xi_max.is_nan() || xi_max <= 0.0 {
            return Err(Error::invalid(
                "xi",
                "need at least two ξ nodes and ξ_max > 0",
            ));
        }
        if theta.windows(2).any(|w| w[0] >= w[1]) || theta.iter().any(|t| !(0.0..PI).contains(t)) {
            return Err(Error::invalid(
                "theta",
                "phases must be strictly increasing within [0, π)",
            ));
        }
        Ok(Self {
            xi: linspace(0.0, xi_max, n_xi),
            theta,
            values,
            phase_sd,
        })
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn xi_max(&self) -> f64 {
        *self.xi.last().expect("grid has ξ nodes")
    }

    pub fn xi_step(&self) -> f64 {
        self.xi_max() / (self.xi.len() - 1) as f64
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn phase_sd(&self) -> &[f64] {
        &self.phase_sd
    }
}

/// Direct empirical characteristic function `Ĉ_θ(ξ) = (1/n) Σ_j e^{iξ q_j}`
/// at every dataset phase. The raw ξ axis is `[0, xi_max / g]` so that after
/// [`unbiased_rescale`] by `g` it spans `[0, xi_max]`.
pub fn empirical_char_fn(
    dataset: &QuadratureDataset,
    config: &ReconstructionConfig,
) -> Result<PolarCharGrid> {
    config.validate()?;
    let g = config.gain(dataset.chain())?;
    let n_xi = config.n_xi;
    let raw_max = config.xi_max / g;
    let d_xi = raw_max / (n_xi - 1) as f64;
    if let Some(i) = dataset.samples().iter().position(Vec::is_empty) {
        return Err(Error::invalid(
            "dataset",
            format!("phase {i} has no samples"),
        ));
    }

    let rows: Vec<(Vec<Complex64>, f64)> = dataset
        .samples()
        .par_iter()
        .map(|qs| (ecf_row(qs, d_xi, n_xi), sample_sd(qs)))
        .collect();

    let mut values = Array2::<Complex64>::zeros((rows.len(), n_xi));
    let mut phase_sd = Vec::with_capacity(rows.len());
    for (t, (row, sd)) in rows.into_iter().enumerate() {
        values
            .row_mut(t)
            .iter_mut()
            .zip(row)
            .for_each(|(v, c)| *v = c);
        phase_sd.push(sd);
    }
    PolarCharGrid::new(raw_max, dataset.phases().to_vec(), values, phase_sd)
}

fn sample_sd(qs: &[f64]) -> f64 {
    let n = qs.len() as f64;
    let mean = qs.iter().sum::<f64>() / n;
    (qs.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n).sqrt()
}

/// Mean of `e^{i k d_xi q}` over samples for k = 0..n_xi. Phasors advance
/// by complex multiplication and are re-anchored every 64 steps.
fn ecf_row(qs: &[f64], d_xi: f64, n_xi: usize) -> Vec<Complex64> {
    const LANES: usize = 8;
    const ANCHOR: usize = 64;
    let mut acc_re = vec![0.0; n_xi];
    let mut acc_im = vec![0.0; n_xi];
    for block in qs.chunks(LANES) {
        let mut q = [0.0; LANES];
        q[..block.len()].copy_from_slice(block);
        let live = block.len();
        let mut step_re = [0.0; LANES];
        let mut step_im = [0.0; LANES];
        for l in 0..LANES {
            let (s, c) = (d_xi * q[l]).sin_cos();
            step_re[l] = c;
            step_im[l] = s;
        }
        let mut z_re = [0.0; LANES];
        let mut z_im = [0.0; LANES];
        for k in 0..n_xi {
            if k % ANCHOR == 0 {
                for l in 0..LANES {
                    let (s, c) = (k as f64 * d_xi * q[l]).sin_cos();
                    z_re[l] = c;
                    z_im[l] = s;
                }
            }
            let mut sr = 0.0;
            let mut si = 0.0;
            for l in 0..live {
                sr += z_re[l];
                si += z_im[l];
            }
            acc_re[k] += sr;
            acc_im[k] += si;
            for l in 0..LANES {
                let nr = z_re[l] * step_re[l] - z_im[l] * step_im[l];
                z_im[l] = z_re[l] * step_im[l] + z_im[l] * step_re[l];
                z_re[l] = nr;
            }
        }
    }
    let inv = 1.0 / qs.len() as f64;
    acc_re
        .into_iter()
        .zip(acc_im)
        .map(|(re, im)| Complex64::new(re * inv, im * inv))
        .collect()
}

/// Noise-free counterpart of [`empirical_char_fn`]: the damped
/// characteristic function of the chain on `n_theta` uniform phases.
pub fn analytic_char_grid(
    state: &StateSpec,
    chain: &DetectionChain,
    config: &ReconstructionConfig,
) -> Result<PolarCharGrid> {
    config.validate()?;
    let eff = chain.effective_loss()?;
    let g = config.gain(chain)?;
    let raw_max = config.xi_max / g;
    let xi = linspace(0.0, raw_max, config.n_xi);
    let theta: Vec<f64> = (0..config.n_theta)
        .map(|k| k as f64 * PI / config.n_theta as f64)
        .collect();
    let mut values = Array2::<Complex64>::zeros((theta.len(), xi.len()));
    for (t, &th) in theta.iter().enumerate() {
        for (k, &x) in xi.iter().enumerate() {
            values[[t, k]] = Complex64::new(damped_char_value(state, chain, &eff, th, x)?, 0.0);
        }
    }
    let phase_sd = theta
        .iter()
        .map(|&th| damped_second_moment(state, chain, &eff, th).sqrt())
        .collect();
    PolarCharGrid::new(raw_max, theta, values, phase_sd)
}

/// Reinterprets raw ξ as `g·ξ`: values are kept, the axis stretches by `g`,
/// spreads shrink by `g`. No interpolation.
pub fn unbiased_rescale(grid: &PolarCharGrid, g: f64) -> Result<PolarCharGrid> {
    ensure_finite("g", g)?;
    if g <= 0.0 {
        return Err(Error::invalid("g", format!("must be positive, got {g}")));
    }
    Ok(PolarCharGrid {
        xi: grid.xi.iter().map(|x| x * g).collect(),
        theta: grid.theta.clone(),
        values: grid.values.clone(),
        phase_sd: grid.phase_sd.iter().map(|s| s / g).collect(),
    })
}

/// Provenance and diagnostics attached to every Wigner grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WignerMetadata {
    pub warnings: Vec<String>,
    /// `∫∫ W dq dp` over the grid.
    pub integral: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apodization_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral_window: Option<f64>,
}

/// `W(q, p)` on a rectangular grid; `values[[i, j]] = W(q_i, p_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    q_axis: Vec<f64>,
    p_axis: Vec<f64>,
    values: Array2<f64>,
    pub metadata: WignerMetadata,
}

fn check_axis(name: &'static str, axis: &[f64]) -> Result<f64> {
    if axis.len() < 2 {
        return Err(Error::invalid(name, "need at least two nodes"));
    }
    let step = (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(name, "axis must be strictly increasing"));
    }
    for (i, w) in axis.windows(2).enumerate() {
        if !((w[1] - w[0]) - step).abs().le(&(1e-9 * step)) {
            return Err(Error::invalid(
                name,
                format!("non-uniform step at index {i}"),
            ));
        }
    }
    Ok(step)
}

impl WignerGrid {
    pub fn new(q_axis: Vec<f64>, p_axis: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        check_axis("q_axis", &q_axis)?;
        check_axis("p_axis", &p_axis)?;
        if values.dim() != (q_axis.len(), p_axis.len()) {
            return Err(Error::AxisMismatch(format!(
                "values {:?} vs axes ({}, {})",
                values.dim(),
                q_axis.len(),
                p_axis.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "values",
                "every Wigner value must be finite",
            ));
        }
        let mut grid = Self {
            q_axis,
            p_axis,
            values,
            metadata: WignerMetadata::default(),
        };
        grid.metadata.integral = grid.integral();
        Ok(grid)
    }

    pub fn from_fn(
        q_axis: Vec<f64>,
        p_axis: Vec<f64>,
        f: impl Fn(f64, f64) -> Result<f64>,
    ) -> Result<Self> {
        let mut values = Array2::zeros((q_axis.len(), p_axis.len()));
        for (i, &q) in q_axis.iter().enumerate() {
            for (j, &p) in p_axis.iter().enumerate() {
                values[[i, j]] = f(q, p)?;
            }
        }
        Self::new(q_axis, p_axis, values)
    }

    pub fn q_axis(&self) -> &[f64] {
        &self.q_axis
    }

    pub fn p_axis(&self) -> &[f64] {
        &self.p_axis
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dq(&self) -> f64 {
        (self.q_axis[self.q_axis.len() - 1] - self.q_axis[0]) / (self.q_axis.len() - 1) as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_axis[self.p_axis.len() - 1] - self.p_axis[0]) / (self.p_axis.len() - 1) as f64
    }

    /// Riemann sum `Σ W Δq Δp`.
    pub fn integral(&self) -> f64 {
        self.values.sum() * self.dq() * self.dp()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_axes(&self, other: &WignerGrid) -> bool {
        self.q_axis == other.q_axis && self.p_axis == other.p_axis
    }

    /// Largest pointwise difference; errors when axes differ.
    pub fn max_abs_diff(&self, other: &WignerGrid) -> Result<f64> {
        if !self.same_axes(other) {
            return Err(Error::AxisMismatch(
                "grids are sampled on different axes".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// CSV layout: a `q_axis,...` row, a `p_axis,...` row, then one row per
    /// q node holding `W(q_i, p_j)` for every p node. 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(25 * (self.values.len() + 2 * self.q_axis.len()));
        for (label, axis) in [("q_axis", &self.q_axis), ("p_axis", &self.p_axis)] {
            out.push_str(label);
            for v in axis.iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        for row in self.values.axis_iter(Axis(0)) {
            let mut first = true;
            for v in row.iter() {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_row = |line: &str| -> Result<Vec<f64>> {
            line.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("`{s}`: {e}")))
                })
                .collect()
        };
        let mut axis = |label: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing `{label}` row")))?;
            let rest = line
                .strip_prefix(label)
                .and_then(|r| r.strip_prefix(','))
                .ok_or_else(|| Error::Format(format!("expected `{label}` header row")))?;
            parse_row(rest)
        };
        let q_axis = axis("q_axis")?;
        let p_axis = axis("p_axis")?;
        let mut flat = Vec::with_capacity(q_axis.len() * p_axis.len());
        let mut n_rows = 0;
        for line in lines {
            let row = parse_row(line)?;
            if row.len() != p_axis.len() {
                return Err(Error::Format(format!(
                    "row {n_rows} has {} values, expected {}",
                    row.len(),
                    p_axis.len()
                )));
            }
            flat.extend(row);
            n_rows += 1;
        }
        if n_rows != q_axis.len() {
            return Err(Error::Format(format!(
                "{n_rows} rows for {} q nodes",
                q_axis.len()
            )));
        }
        let values = Array2::from_shape_vec((q_axis.len(), p_axis.len()), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(q_axis, p_axis, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }

    /// Writes `<stem>.csv` and the JSON sidecar `<stem>.json`.
    pub fn write(
        &self,
        dir: &Path,
        stem: &str,
        sidecar: &WignerSidecar,
    ) -> Result<(PathBuf, PathBuf)> {
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        self.write_csv(&csv)?;
        fs::write(&json, serde_json::to_string_pretty(sidecar)? + "\n")?;
        Ok((csv, json))
    }
}

/// JSON companion of a Wigner CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerSidecar {
    pub format: String,
    pub label: String,
    /// `closed_form`, `analytic_reconstruction` or `sampled_reconstruction`.
    pub source: String,
    pub state: StateSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<DetectionChain>,
    pub epsilon_r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ReconstructionConfig>,
    /// SHA-256 of the quadrature dataset CSV the grid was built from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    pub q_axis: AxisSummary,
    pub p_axis: AxisSummary,
    pub metadata: WignerMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    pub step: f64,
}

pub const WIGNER_FORMAT: &str = "homotomo-wigner/1";

impl AxisSummary {
    pub fn of(axis: &[f64]) -> Self {
        let n = axis.len();
        Self {
            min: axis[0],
            max: axis[n - 1],
            n,
            step: (axis[n - 1] - axis[0]) / (n - 1) as f64,
        }
    }
}

/// Periodic trapezoid weights for phases on `[0, π)`.
fn phase_weights(theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    if n == 1 {
        return vec![PI];
    }
    (0..n)
        .map(|t| {
            let next = if t + 1 < n {
                theta[t + 1]
            } else {
                theta[0] + PI
            };
            let prev = if t > 0 {
                theta[t - 1]
            } else {
                theta[n - 1] - PI
            };
            0.5 * (next - prev)
        })
        .collect()
}

fn window_factor(xi: f64, sd: f64, cut: f64) -> f64 {
    let x = xi * sd;
    if x <= cut {
        1.0
    } else if x >= cut + 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (x - cut)).cos())
    }
}

/// Polar inverse Fourier transform
/// `W(q,p) = (1/2π²) ∫₀^π dθ ∫₀^ξmax ξ Re[C(ξe^{iθ}) e^{−iξ(q cosθ + p sinθ)}] dξ`
/// with trapezoid rules in both variables plus the leading Euler–Maclaurin
/// endpoint term at ξ = 0, where the `|ξ|` Jacobian has a kink.
///
/// Each block of phases is a pair of real matrix products, summed in a fixed
/// order so the result does not depend on the worker count.
pub fn invert_to_wigner(grid: &PolarCharGrid, config: &ReconstructionConfig) -> Result<WignerGrid> {
    config.validate()?;
    let q_axis = config.q_axis();
    let p_axis = config.p_axis();
    let (nq, np) = (q_axis.len(), p_axis.len());
    let h = grid.xi_step();
    let xi = grid.xi();
    let n_xi = xi.len();
    let alpha = config.apodization_alpha;
    let theta_w = phase_weights(grid.theta());

    // trapezoid weight × Jacobian × taper, per ξ node
    let radial: Vec<f64> = xi
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let w = if k == n_xi - 1 { 0.5 * h } else { h };
            w * x * (-alpha * x * x).exp()
        })
        .collect();

    let dq = q_axis[1] - q_axis[0];
    let dp = p_axis[1] - p_axis[0];
    let phase_ids: Vec<usize> = (0..grid.theta().len()).collect();

    let block_sum = |ids: &[usize]| -> Array2<f64> {
        // columns kept per phase: (phase, ξ index, complex coefficient)
        let mut terms: Vec<(f64, f64, Complex64)> = Vec::new();
        for &t in ids {
            let th = grid.theta()[t];
            let sd = grid.phase_sd()[t];
            for k in 1..n_xi {
                let c = grid.values()[[t, k]];
                if c.norm() < NEGLIGIBLE_CHAR {
                    continue;
                }
                let win = match config.spectral_window {
                    Some(cut) => window_factor(xi[k], sd, cut),
                    None => 1.0,
                };
                if win == 0.0 {
                    continue;
                }
                terms.push((th, xi[k], c * (theta_w[t] * radial[k] * win)));
            }
        }
        let m = terms.len();
        let mut a = Array2::<f64>::zeros((nq, 2 * m));
        let mut b = Array2::<f64>::zeros((np, 2 * m));
        for (col, &(th, x, coef)) in terms.iter().enumerate() {
            let (sin, cos) = th.sin_cos();
            fill_phasors(&mut a, col, m, coef, -x * cos, q_axis[0], dq);
            fill_phasors(
                &mut b,
                col,
                m,
                Complex64::new(1.0, 0.0),
                -x * sin,
                p_axis[0],
                dp,
            );
            // Re[(α)(β)] = α_re β_re − α_im β_im
            for i in 0..nq {
                a[[i, m + col]] = -a[[i, m + col]];
            }
        }
        a.dot(&b.t())
    };

    let mut acc = Array2::<f64>::zeros((nq, np));
    const BLOCKS_PER_ROUND: usize = 16;
    for round in phase_ids.chunks(THETA_CHUNK * BLOCKS_PER_ROUND) {
        let partials: Vec<Array2<f64>> = round.par_chunks(THETA_CHUNK).map(block_sum).collect();
        for part in partials {
            acc += &part;
        }
    }

    // endpoint correction: the trapezoid sum misses (h²/12)·f'(0) per phase,
    // and f'(0) = Re C_θ(0) for f(ξ) = ξ Re[C e^{−iξx}]
    let edge: f64 = grid
        .theta()
        .iter()
        .enumerate()
        .map(|(t, _)| theta_w[t] * grid.values()[[t, 0]].re)
        .sum::<f64>()
        * h
        * h
        / 12.0;
    let norm = 1.0 / (2.0 * PI * PI);
    acc.mapv_inplace(|v| (v + edge) * norm);

    let mut out = WignerGrid::new(q_axis, p_axis, acc)?;
    out.metadata.apodization_alpha = Some(alpha);
    out.metadata.spectral_window = config.spectral_window;

    if alpha == 0.0 && config.spectral_window.is_none() {
        let tail = grid
            .values()
            .column(n_xi - 1)
            .iter()
            .fold(0.0_f64, |m, c| m.max(c.norm()));
        if tail > TRUNCATION_LIMIT {
            out.metadata.warnings.push(format!(
                "truncation: |C| = {tail:.3e} at ξ_max = {:.4}; increase xi_max",
                grid.xi_max()
            ));
        }
    }
    let reach = (config.q_half_width.powi(2) + config.p_half_width.powi(2)).sqrt();
    if 2.0 * PI / h < 2.0 * reach {
        out.metadata.warnings.push(format!(
            "aliasing: ξ step {h:.4} wraps the projection period {:.3} inside the grid reach ±{reach:.3}; increase n_xi",
            2.0 * PI / h
        ));
    }
    Ok(out)
}

/// Writes `coef · e^{i·rate·x_i}` for `x_i = x0 + i·dx` into column `col`
/// (real part) and `m + col` (imaginary part).
fn fill_phasors(
    target: &mut Array2<f64>,
    col: usize,
    m: usize,
    coef: Complex64,
    rate: f64,
    x0: f64,
    dx: f64,
) {
    const ANCHOR: usize = 128;
    let step = Complex64::from_polar(1.0, rate * dx);
    let n = target.nrows();
    let mut z = Complex64::new(0.0, 0.0);
    for i in 0..n {
        if i % ANCHOR == 0 {
            z = coef * Complex64::from_polar(1.0, rate * (x0 + i as f64 * dx));
        }
        target[[i, col]] = z.re;
        target[[i, m + col]] = z.im;
        z *= step;
    }
}

/// Unbiased reconstruction from samples: empirical CF, rescale by the chain
/// gain (or the configured override), invert.
pub fn reconstruct(
    dataset: &QuadratureDataset,
    config: &ReconstructionConfig,
) -> Result<WignerGrid> {
    let g = config.gain(dataset.chain())?;
    let raw = empirical_char_fn(dataset, config)?;
    invert_to_wigner(&unbiased_rescale(&raw, g)?, config)
}

/// Same pipeline on the noise-free characteristic function.
pub fn reconstruct_analytic(
    state: &StateSpec,
    chain: &DetectionChain,
    config: &ReconstructionConfig,
) -> Result<WignerGrid> {
    let g = config.gain(chain)?;
    let raw = analytic_char_grid(state, chain, config)?;
    invert_to_wigner(&unbiased_rescale(&raw, g)?, config)
}

/// Gaussian blurring kernel `B(q,p) = e^{−(q²+p²)/ε} / (π ε)`.
pub fn blur_kernel(epsilon: f64, q: f64, p: f64) -> Result<f64> {
    ensure_finite("epsilon", epsilon)?;
    if epsilon <= 0.0 {
        return Err(Error::invalid(
            "epsilon",
            format!("must be positive, got {epsilon}"),
        ));
    }
    Ok((-(q * q + p * p) / epsilon).exp() / (PI * epsilon))
}

fn normalized_kernel(epsilon: f64, step: f64, radius: f64) -> Vec<f64> {
    let half = (radius / step).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|m| {
            let x = m as f64 * step;
            (-x * x / epsilon).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Discrete convolution with [`blur_kernel`], done as two 1-D passes (the
/// kernel is separable). Each 1-D kernel is truncated at `5√ε` and
/// normalized to unit sum; the grid is zero-padded.
pub fn convolve_blur(w: &WignerGrid, epsilon: f64) -> Result<WignerGrid> {
    ensure_finite("epsilon", epsilon)?;
    if epsilon <= 0.0 {
        return Err(Error::invalid(
            "epsilon",
            format!("must be positive, got {epsilon}"),
        ));
    }
    let radius = 5.0 * epsilon.sqrt();
    let span = |a: &[f64]| a[a.len() - 1] - a[0];
    let margin = 0.5 * span(&w.q_axis).min(span(&w.p_axis));
    if radius > margin {
        return Err(Error::MarginViolation {
            radius,
            margin,
            required_padding: radius - margin,
        });
    }
    let kq = normalized_kernel(epsilon, w.dq(), radius);
    let kp = normalized_kernel(epsilon, w.dp(), radius);
    let (nq, np) = w.values.dim();

    let mut tmp = Array2::<f64>::zeros((nq, np));
    let hq = (kq.len() / 2) as isize;
    for i in 0..nq {
        for (m, &kv) in kq.iter().enumerate() {
            let src = i as isize + m as isize - hq;
            if src < 0 || src >= nq as isize {
                continue;
            }
            let src_row = w.values.row(src as usize);
            let mut dst = tmp.row_mut(i);
            dst.scaled_add(kv, &src_row);
        }
    }
    let mut out = Array2::<f64>::zeros((nq, np));
    let hp = (kp.len() / 2) as isize;
    for i in 0..nq {
        let row = tmp.row(i);
        let mut dst = out.row_mut(i);
        for j in 0..np {
            let mut acc = 0.0;
            for (m, &kv) in kp.iter().enumerate() {
                let src = j as isize + m as isize - hp;
                if src >= 0 && src < np as isize {
                    acc += kv * row[src as usize];
                }
            }
            dst[j] = acc;
        }
    }
    let mut grid = WignerGrid::new(w.q_axis.clone(), w.p_axis.clone(), out)?;
    grid.metadata.warnings = w.metadata.warnings.clone();
    Ok(grid)
}

/// Closed-form Wigner function of the unbiased reconstruction, i.e. the
/// ideal state blurred by `B` with loss factor `epsilon_r`.
pub fn blurred_wigner_closed_form(
    state: &StateSpec,
    epsilon_r: f64,
    q: f64,
    p: f64,
) -> Result<f64> {
    ensure_finite("epsilon_r", epsilon_r)?;
    ensure_finite("q", q)?;
    ensure_finite("p", p)?;
    if epsilon_r < 0.0 {
        return Err(Error::invalid(
            "epsilon_r",
            format!("must be non-negative, got {epsilon_r}"),
        ));
    }
    let e = epsilon_r;
    let s = state.squeeze_factor();
    let a = e + s;
    let b = e + 1.0 / s;
    let gauss = (-q * q / a - p * p / b).exp();
    Ok(if state.kind().is_gaussian() {
        gauss / (PI * (a * b).sqrt())
    } else {
        let num =
            2.0 * q * q * (s * e + 1.0) / (e + s) + 2.0 * p * p * (e + s) / (s * e + 1.0) + e * e
                - 1.0;
        num / (PI * (a * b).powf(1.5)) * gauss
    })
}

/// [`blurred_wigner_closed_form`] tabulated on the given axes.
pub fn closed_form_grid(
    state: &StateSpec,
    epsilon_r: f64,
    q_axis: Vec<f64>,
    p_axis: Vec<f64>,
) -> Result<WignerGrid> {
    WignerGrid::from_fn(q_axis, p_axis, |q, p| {
        blurred_wigner_closed_form(state, epsilon_r, q, p)
    })
}
