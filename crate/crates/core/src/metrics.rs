//! Reconstruction-quality measures: Wigner overlap fidelity, negativity
//! depth at the origin, and grid minimum search.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::tomography::WignerGrid;

fn non_negative(name: &'static str, v: f64) -> Result<f64> {
    ensure_finite(name, v)?;
    if v < 0.0 {
        return Err(Error::invalid(
            name,
            format!("must be non-negative, got {v}"),
        ));
    }
    Ok(v)
}

/// Overlap fidelity between a squeezed vacuum and its unbiased
/// reconstruction, `F = 2 / √((ε e^{2r₁} + 2)(ε e^{−2r₁} + 2))`.
pub fn fidelity_bsv(r1: f64, epsilon_r: f64) -> Result<f64> {
    non_negative("r1", r1)?;
    non_negative("epsilon_r", epsilon_r)?;
    let s = (2.0 * r1).exp();
    Ok(2.0 / ((epsilon_r * s + 2.0) * (epsilon_r / s + 2.0)).sqrt())
}

/// `2π ΣΣ W₁ W₂ Δq Δp`. The 2π makes two identical pure-state grids score 1
/// in the vacuum-variance-1/2 convention, so this is meaningful when one
/// argument is a pure reference.
pub fn fidelity_numeric(w_ideal: &WignerGrid, w_recon: &WignerGrid) -> Result<f64> {
    if !w_ideal.same_axes(w_recon) {
        return Err(Error::AxisMismatch(
            "fidelity needs grids on identical axes".into(),
        ));
    }
    let overlap: f64 = w_ideal
        .values()
        .iter()
        .zip(w_recon.values().iter())
        .map(|(a, b)| a * b)
        .sum();
    Ok(2.0 * PI * overlap * w_ideal.dq() * w_ideal.dp())
}

/// Value at the origin of the reconstructed squeezed single photon,
/// `(ε² − 1) / (π [(ε + e^{2r₁})(ε + e^{−2r₁})]^{3/2})`.
pub fn wigner_depth(r1: f64, epsilon_r: f64) -> Result<f64> {
    non_negative("r1", r1)?;
    non_negative("epsilon_r", epsilon_r)?;
    let s = (2.0 * r1).exp();
    let e = epsilon_r;
    Ok((e * e - 1.0) / (PI * ((e + s) * (e + 1.0 / s)).powf(1.5)))
}

/// Smallest grid value and its `(q, p)` location. Ties go to the first
/// occurrence in row-major order.
pub fn scan_minimum(w: &WignerGrid) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0, 0);
    for ((i, j), &v) in w.values().indexed_iter() {
        if v < best.0 {
            best = (v, i, j);
        }
    }
    (best.0, w.q_axis()[best.1], w.p_axis()[best.2])
}

/// Bilinear interpolation of the grid at `(q, p)`; `None` outside the grid.
pub fn sample_at(w: &WignerGrid, q: f64, p: f64) -> Option<f64> {
    let locate = |axis: &[f64], x: f64, step: f64| -> Option<(usize, f64)> {
        let pos = (x - axis[0]) / step;
        let last = (axis.len() - 1) as f64;
        if !(pos >= -1e-9 && pos <= last + 1e-9) {
            return None;
        }
        let pos = pos.clamp(0.0, last);
        let i = (pos.floor() as usize).min(axis.len() - 2);
        Some((i, pos - i as f64))
    };
    let (i, fq) = locate(w.q_axis(), q, w.dq())?;
    let (j, fp) = locate(w.p_axis(), p, w.dp())?;
    let v = w.values();
    let at = |a: usize, b: usize| v[[a, b]];
    // exact node values need no blending, keeping on-grid lookups exact
    let lerp = |x0: f64, x1: f64, f: f64| {
        if f == 0.0 {
            x0
        } else if f == 1.0 {
            x1
        } else {
            x0 + f * (x1 - x0)
        }
    };
    let lo = lerp(at(i, j), at(i, j + 1), fp);
    let hi = lerp(at(i + 1, j), at(i + 1, j + 1), fp);
    Some(lerp(lo, hi, fq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Overlap with the pure ideal reference grid.
    pub fidelity: f64,
    /// Reconstructed value at the origin.
    pub depth: f64,
    pub min_value: f64,
    pub min_location: (f64, f64),
    pub epsilon_r_used: f64,
}

impl QualityReport {
    /// Scores `recon` against the pure-state grid `ideal` (same axes).
    pub fn evaluate(ideal: &WignerGrid, recon: &WignerGrid, epsilon_r: f64) -> Result<Self> {
        let fidelity = fidelity_numeric(ideal, recon)?;
        let depth = sample_at(recon, 0.0, 0.0)
            .ok_or_else(|| Error::invalid("grid", "origin lies outside the reconstruction grid"))?;
        let (min_value, q, p) = scan_minimum(recon);
        Ok(Self {
            fidelity,
            depth,
            min_value,
            min_location: (q, p),
            epsilon_r_used: epsilon_r,
        })
    }
}
