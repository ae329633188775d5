//! Loss and amplification in front of the homodyne detector.
//!
//! The chain is: input loss `η_i` → single-pass parametric amplifier (gain
//! `r_raw`, bulk absorption `k` over length `d`) → detection efficiency `η_d`.
//! Amplifier output loss is folded into `η_d`. Every chain reduces to an
//! effective loss factor `ε_r` and a rescaling gain `g = √(η_i η_d)·e^r`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::states::StateSpec;

/// Exponents below this underflow to zero in double precision.
const EXP_UNDERFLOW: f64 = -745.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCrystal")]
pub struct CrystalParams {
    /// Bulk absorption coefficient, 1/m.
    k: f64,
    /// Crystal length, m.
    d: f64,
}

#[derive(Deserialize)]
struct RawCrystal {
    k: f64,
    d: f64,
}

impl TryFrom<RawCrystal> for CrystalParams {
    type Error = Error;
    fn try_from(raw: RawCrystal) -> Result<Self> {
        CrystalParams::new(raw.k, raw.d)
    }
}

impl CrystalParams {
    pub fn new(k: f64, d: f64) -> Result<Self> {
        ensure_finite("k", k)?;
        ensure_finite("d", d)?;
        if k < 0.0 {
            return Err(Error::invalid(
                "k",
                format!("absorption must be non-negative, got {k}"),
            ));
        }
        if d <= 0.0 {
            return Err(Error::invalid(
                "d",
                format!("length must be positive, got {d}"),
            ));
        }
        if k * d >= 1.0 {
            return Err(Error::OutOfRange {
                name: "k·d",
                value: k * d,
                range: "[0, 1)",
            });
        }
        Ok(Self { k, d })
    }

    /// 1 mm BBO with 0.1 /m bulk absorption.
    pub fn bbo() -> Self {
        Self { k: 0.1, d: 1e-3 }
    }

    pub fn lossless(d: f64) -> Result<Self> {
        Self::new(0.0, d)
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// Total single-pass absorption `k·d`.
    pub fn absorption(&self) -> f64 {
        self.k * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAmplifier")]
pub struct AmplifierParams {
    r_raw: f64,
    crystal: CrystalParams,
}

#[derive(Deserialize)]
struct RawAmplifier {
    r_raw: f64,
    crystal: CrystalParams,
}

impl TryFrom<RawAmplifier> for AmplifierParams {
    type Error = Error;
    fn try_from(raw: RawAmplifier) -> Result<Self> {
        AmplifierParams::new(raw.r_raw, raw.crystal)
    }
}

impl AmplifierParams {
    pub fn new(r_raw: f64, crystal: CrystalParams) -> Result<Self> {
        ensure_finite("r_raw", r_raw)?;
        if r_raw < 0.0 {
            return Err(Error::invalid(
                "r_raw",
                format!("gain must be non-negative, got {r_raw}"),
            ));
        }
        let floor = 0.5 * crystal.absorption();
        if r_raw < floor {
            return Err(Error::OutOfRange {
                name: "r_raw",
                value: r_raw,
                range: "[k·d/2, ∞)",
            });
        }
        Ok(Self { r_raw, crystal })
    }

    pub fn r_raw(&self) -> f64 {
        self.r_raw
    }

    pub fn crystal(&self) -> CrystalParams {
        self.crystal
    }
}

/// Effective squeezing seen at the detector, `r = r_raw − k·d/2`.
pub fn effective_squeezing(amp: &AmplifierParams) -> Result<f64> {
    let r = amp.r_raw - 0.5 * amp.crystal.absorption();
    if r < 0.0 {
        return Err(Error::OutOfRange {
            name: "effective squeezing",
            value: r,
            range: "[0, ∞)",
        });
    }
    Ok(r)
}

/// Variance of the bulk-absorption noise referred to the amplifier input,
/// `σ_a² = (k d / 4r)(1 − e^{−2r})`, with the `r → 0` limit `k d / 2`.
pub fn bulk_noise_variance(amp: &AmplifierParams) -> Result<f64> {
    let r = effective_squeezing(amp)?;
    let kd = amp.crystal.absorption();
    if r == 0.0 {
        return Ok(0.5 * kd);
    }
    Ok(kd / (4.0 * r) * -(-2.0 * r).exp_m1())
}

/// Finite-layer version of [`bulk_noise_variance`]: the crystal split into
/// `n_layers` thin slabs, each injecting vacuum noise that is amplified by
/// the remaining slabs. Converges to the closed form as `O(1/N)`.
pub fn bulk_noise_variance_layered(amp: &AmplifierParams, n_layers: usize) -> Result<f64> {
    if n_layers == 0 {
        return Err(Error::invalid("n_layers", "at least one layer is required"));
    }
    let r = effective_squeezing(amp)?;
    let kd = amp.crystal.absorption();
    let n = n_layers as f64;
    if r == 0.0 {
        return Ok(0.5 * kd);
    }
    Ok(kd / (2.0 * n) * -(-2.0 * r).exp_m1() / (2.0 * r / n).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain")]
pub struct DetectionChain {
    eta_i: f64,
    eta_d: f64,
    amp: Option<AmplifierParams>,
}

#[derive(Deserialize)]
struct RawChain {
    eta_i: f64,
    eta_d: f64,
    #[serde(default)]
    amp: Option<AmplifierParams>,
}

impl TryFrom<RawChain> for DetectionChain {
    type Error = Error;
    fn try_from(raw: RawChain) -> Result<Self> {
        DetectionChain::new(raw.eta_i, raw.eta_d, raw.amp)
    }
}

fn check_transmissivity(name: &'static str, eta: f64) -> Result<f64> {
    ensure_finite(name, eta)?;
    if eta <= 0.0 || eta > 1.0 {
        return Err(Error::OutOfRange {
            name,
            value: eta,
            range: "(0, 1]",
        });
    }
    Ok(eta)
}

impl DetectionChain {
    pub fn new(eta_i: f64, eta_d: f64, amp: Option<AmplifierParams>) -> Result<Self> {
        check_transmissivity("eta_i", eta_i)?;
        check_transmissivity("eta_d", eta_d)?;
        Ok(Self { eta_i, eta_d, amp })
    }

    pub fn lossless() -> Self {
        Self {
            eta_i: 1.0,
            eta_d: 1.0,
            amp: None,
        }
    }

    /// Plain detector inefficiency, no amplifier.
    pub fn detector(eta_d: f64) -> Result<Self> {
        Self::new(1.0, eta_d, None)
    }

    pub fn eta_i(&self) -> f64 {
        self.eta_i
    }

    pub fn eta_d(&self) -> f64 {
        self.eta_d
    }

    pub fn amp(&self) -> Option<&AmplifierParams> {
        self.amp.as_ref()
    }

    /// Collapses the chain into `(ε_r, g, r)`.
    pub fn effective_loss(&self) -> Result<EffectiveLoss> {
        let (r, sigma_a2) = match &self.amp {
            Some(amp) => (effective_squeezing(amp)?, bulk_noise_variance(amp)?),
            None => (0.0, 0.0),
        };
        let eps_i = (1.0 - self.eta_i) / self.eta_i;
        let eps_d = (1.0 - self.eta_d) / self.eta_d;
        let epsilon_r = eps_i + (2.0 * sigma_a2 + eps_d * (-2.0 * r).exp()) / self.eta_i;
        Ok(EffectiveLoss {
            epsilon_r,
            gain_scale: (self.eta_i * self.eta_d).sqrt() * r.exp(),
            r_eff: r,
            sigma_a2,
        })
    }

    /// Variance of the Gaussian noise added at the detector, in raw
    /// quadrature units: `C'_θ(ξ) = C_θ(g ξ) · exp(−ξ² · noise / 2)`.
    fn added_noise_variance(&self, r: f64, sigma_a2: f64) -> f64 {
        let gain2 = (2.0 * r).exp();
        0.5 * (1.0 - self.eta_i) * self.eta_d * gain2
            + sigma_a2 * self.eta_d * gain2
            + 0.5 * (1.0 - self.eta_d)
    }
}

/// Reduced description of a detection chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLoss {
    pub epsilon_r: f64,
    /// Raw-to-input quadrature scale `g`. Stored so a measured calibration
    /// value can replace the nominal one.
    pub gain_scale: f64,
    pub r_eff: f64,
    pub sigma_a2: f64,
}

/// Quadrature characteristic function at the detector output,
/// `C'_θ(ξ) = C_θ(g ξ) · exp[−(ξ²/2)((1−η_i)η_d e^{2r}/2 + σ_a² η_d e^{2r} + (1−η_d)/2)]`.
///
/// Without an amplifier and with `η_i = 1` this is the plain damped form
/// `C_θ(√η_d ξ) · e^{−(1−η_d)ξ²/4}`.
pub fn damped_char_fn(
    state: &StateSpec,
    chain: &DetectionChain,
    theta: f64,
    xi: f64,
) -> Result<Complex64> {
    ensure_finite("theta", theta)?;
    ensure_finite("xi", xi)?;
    let eff = chain.effective_loss()?;
    damped_char_value(state, chain, &eff, theta, xi).map(|v| Complex64::new(v, 0.0))
}

/// Same as [`damped_char_fn`] with the chain reduction hoisted out; used on
/// whole grids.
pub(crate) fn damped_char_value(
    state: &StateSpec,
    chain: &DetectionChain,
    eff: &EffectiveLoss,
    theta: f64,
    xi: f64,
) -> Result<f64> {
    let scaled = eff.gain_scale * xi;
    let (sin, cos) = theta.sin_cos();
    let (poly, state_exp) = state.char_parts(scaled * cos, scaled * sin);
    let noise_exp = -0.5 * xi * xi * chain.added_noise_variance(eff.r_eff, eff.sigma_a2);
    let exponent = state_exp + noise_exp;
    if !scaled.is_finite() || exponent.is_nan() {
        return Err(Error::Overflow("damped characteristic function"));
    }
    // the Gaussian factor beats any polynomial growth
    if exponent < EXP_UNDERFLOW {
        return Ok(0.0);
    }
    let value = poly * exponent.exp();
    if !value.is_finite() {
        return Err(Error::Overflow("damped characteristic function"));
    }
    Ok(value)
}

/// Second moment of the detected quadrature `q_θ` in raw units.
pub(crate) fn damped_second_moment(
    state: &StateSpec,
    chain: &DetectionChain,
    eff: &EffectiveLoss,
    theta: f64,
) -> f64 {
    eff.gain_scale * eff.gain_scale * state.quadrature_second_moment(theta)
        + chain.added_noise_variance(eff.r_eff, eff.sigma_a2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bbo_amp(r_raw: f64) -> AmplifierParams {
        AmplifierParams::new(r_raw, CrystalParams::bbo()).unwrap()
    }

    #[test]
    fn effective_squeezing_examples() {
        assert_relative_eq!(
            effective_squeezing(&bbo_amp(2.3)).unwrap(),
            2.29995,
            max_relative = 1e-15
        );
        let lossless = AmplifierParams::new(1.0, CrystalParams::lossless(1e-3).unwrap()).unwrap();
        assert_eq!(effective_squeezing(&lossless).unwrap(), 1.0);
        let boundary =
            AmplifierParams::new(0.25, CrystalParams::new(500.0, 1e-3).unwrap()).unwrap();
        assert_eq!(effective_squeezing(&boundary).unwrap(), 0.0);
        assert!(AmplifierParams::new(0.24, CrystalParams::new(500.0, 1e-3).unwrap()).is_err());
    }

    #[test]
    fn crystal_validation() {
        assert!(CrystalParams::new(-1.0, 1e-3).is_err());
        assert!(CrystalParams::new(0.1, 0.0).is_err());
        assert!(CrystalParams::new(1000.0, 1e-3).is_err());
        assert!(DetectionChain::new(0.0, 0.5, None).is_err());
        assert!(DetectionChain::new(1.0, 1.01, None).is_err());
    }

    #[test]
    fn bulk_noise_examples() {
        // (1e-4 / (4 · 2.29995)) · (1 − e^{−4.5999}), 40-digit evaluation
        assert_relative_eq!(
            bulk_noise_variance(&bbo_amp(2.3)).unwrap(),
            1.076_052_913_130_210_5e-5,
            max_relative = 1e-13
        );
        let clean = AmplifierParams::new(2.0, CrystalParams::lossless(1e-3).unwrap()).unwrap();
        assert_eq!(bulk_noise_variance(&clean).unwrap(), 0.0);
        let at_zero = AmplifierParams::new(5e-5, CrystalParams::bbo()).unwrap();
        assert_relative_eq!(bulk_noise_variance(&at_zero).unwrap(), 5e-5);
        // continuity across the removable singularity
        let near = AmplifierParams::new(5e-5 + 1e-9, CrystalParams::bbo()).unwrap();
        assert_relative_eq!(
            bulk_noise_variance(&near).unwrap(),
            5e-5,
            max_relative = 1e-8
        );
    }

    #[test]
    fn layered_bulk_noise() {
        let amp = bbo_amp(2.3);
        let r = effective_squeezing(&amp).unwrap();
        // a single slab: (kd/2) e^{−2r}
        assert_relative_eq!(
            bulk_noise_variance_layered(&amp, 1).unwrap(),
            0.5e-4 * (-2.0 * r).exp(),
            max_relative = 1e-13
        );
        let clean = AmplifierParams::new(2.0, CrystalParams::lossless(1e-3).unwrap()).unwrap();
        assert_eq!(bulk_noise_variance_layered(&clean, 17).unwrap(), 0.0);
        assert!(bulk_noise_variance_layered(&amp, 0).is_err());
    }

    /// Direct summation of the per-layer noise contributions.
    fn layered_by_summation(kd: f64, r: f64, n: usize) -> f64 {
        let nf = n as f64;
        (1..=n)
            .map(|j| (-2.0 * j as f64 * r / nf).exp())
            .sum::<f64>()
            * kd
            / (2.0 * nf)
    }

    #[test]
    fn layered_closed_sum_matches_summation() {
        let amp = bbo_amp(1.7);
        let r = effective_squeezing(&amp).unwrap();
        for n in [1, 3, 10, 1000] {
            assert_relative_eq!(
                bulk_noise_variance_layered(&amp, n).unwrap(),
                layered_by_summation(1e-4, r, n),
                max_relative = 1e-11
            );
        }
    }

    #[test]
    fn effective_loss_examples() {
        let eff = DetectionChain::detector(0.45)
            .unwrap()
            .effective_loss()
            .unwrap();
        assert_relative_eq!(eff.epsilon_r, 0.55 / 0.45, max_relative = 1e-15);
        assert!((eff.epsilon_r - 1.2).abs() < 0.03);

        let chain = DetectionChain::new(0.9999, 0.95, Some(bbo_amp(2.3))).unwrap();
        let eff = chain.effective_loss().unwrap();
        // 40-digit evaluation of ε_i + (2σ_a² + ε_d e^{−2r}) / η_i
        assert_relative_eq!(
            eff.epsilon_r,
            6.506_830_201_682_473e-4,
            max_relative = 1e-12
        );

        let eff = DetectionChain::lossless().effective_loss().unwrap();
        assert_eq!(eff.epsilon_r, 0.0);
        assert_eq!(eff.gain_scale, 1.0);
    }

    #[test]
    fn damped_char_fn_examples() {
        let vac = StateSpec::vacuum();
        let chain = DetectionChain::detector(0.5).unwrap();
        for xi in [0.0, 0.7, 3.0] {
            let c = damped_char_fn(&vac, &chain, 0.0, xi).unwrap();
            assert_relative_eq!(c.re, (-xi * xi / 4.0_f64).exp(), max_relative = 1e-14);
        }

        // plain damped form, evaluated from its own definition
        let bsv = StateSpec::squeezed_vacuum(3.0).unwrap();
        let chain = DetectionChain::detector(0.95).unwrap();
        let s = (6.0_f64).exp();
        let damped = (-(s * 0.95) / 4.0_f64).exp() * (-(0.05) / 4.0_f64).exp();
        assert_relative_eq!(
            damped_char_fn(&bsv, &chain, 0.0, 1.0).unwrap().re,
            damped,
            max_relative = 1e-13
        );
    }

    #[test]
    fn damped_char_fn_underflows_to_zero() {
        let bsv = StateSpec::squeezed_vacuum(3.0).unwrap();
        let chain = DetectionChain::new(0.9999, 0.95, Some(bbo_amp(2.3))).unwrap();
        let c = damped_char_fn(&bsv, &chain, 0.0, 50.0).unwrap();
        assert_eq!(c.re, 0.0);
        // far tails underflow cleanly even where the polynomial factor is huge
        let ssp = StateSpec::squeezed_single_photon(3.0).unwrap();
        assert_eq!(damped_char_fn(&ssp, &chain, 0.0, 1e150).unwrap().re, 0.0);
        // g·ξ itself is not representable
        assert!(matches!(
            damped_char_fn(&bsv, &chain, 0.0, f64::MAX),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn rescaling_identity_at_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let state = StateSpec::squeezed_single_photon(1.0).unwrap();
        let chain = DetectionChain::new(0.9999, 0.95, Some(bbo_amp(2.3))).unwrap();
        let eff = chain.effective_loss().unwrap();
        let g = eff.gain_scale;
        for _ in 0..100 {
            let theta = rng.random_range(0.0..PI);
            let xi = rng.random_range(0.0..0.5);
            let z = Complex64::from_polar(g * xi, theta);
            let expected =
                state.char_fn(z).unwrap().re * (-eff.epsilon_r * g * g * xi * xi / 4.0).exp();
            let got = damped_char_fn(&state, &chain, theta, xi).unwrap().re;
            assert!(
                (got - expected).abs() < 1e-12,
                "θ={theta} ξ={xi}: {got} vs {expected}"
            );
        }
    }

    proptest! {
        #[test]
        fn normalization_preserved(eta_i in 0.05f64..=1.0, eta_d in 0.05f64..=1.0, r_raw in 0.0f64..5.0, theta in 0.0f64..PI) {
            let amp = if r_raw > 1e-3 { Some(bbo_amp(r_raw)) } else { None };
            let chain = DetectionChain::new(eta_i, eta_d, amp).unwrap();
            let st = StateSpec::squeezed_single_photon(1.0).unwrap();
            prop_assert_eq!(damped_char_fn(&st, &chain, theta, 0.0).unwrap().re, 1.0);
        }

        #[test]
        fn plain_detector_reproduces_damped_form(eta_d in 0.05f64..=1.0, r1 in 0.0f64..3.0, theta in 0.0f64..PI, xi in 0.0f64..6.0) {
            let st = StateSpec::squeezed_vacuum(r1).unwrap();
            let chain = DetectionChain::detector(eta_d).unwrap();
            let z = Complex64::from_polar(eta_d.sqrt() * xi, theta);
            let expected = st.char_fn(z).unwrap().re * (-(1.0 - eta_d) * xi * xi / 4.0).exp();
            let got = damped_char_fn(&st, &chain, theta, xi).unwrap().re;
            prop_assert!((got - expected).abs() <= 1e-15 + 1e-14 * expected.abs());
        }

        #[test]
        fn epsilon_lower_bound(eta_i in 0.05f64..=1.0, eta_d in 0.05f64..=1.0, r_raw in 0.0f64..8.0) {
            let chain = DetectionChain::new(eta_i, eta_d, Some(bbo_amp(r_raw.max(5e-5)))).unwrap();
            let eff = chain.effective_loss().unwrap();
            prop_assert!(eff.epsilon_r >= (1.0 - eta_i) / eta_i);
        }

        #[test]
        fn amplification_strictly_helps(eta_d in 0.05f64..0.999, r_a in 0.01f64..6.0, dr in 0.01f64..2.0) {
            let lo = DetectionChain::new(0.9999, eta_d, Some(bbo_amp(r_a))).unwrap().effective_loss().unwrap();
            let hi = DetectionChain::new(0.9999, eta_d, Some(bbo_amp(r_a + dr))).unwrap().effective_loss().unwrap();
            prop_assert!(hi.epsilon_r < lo.epsilon_r);
        }
    }

    #[test]
    fn bulk_noise_decays_like_inverse_gain() {
        // for r ≫ 1, σ_a² · r → k d / 4
        for r in [10.0, 40.0, 160.0] {
            let amp = bbo_amp(r + 5e-5);
            let v = bulk_noise_variance(&amp).unwrap();
            assert_relative_eq!(v * r, 0.25e-4, max_relative = 1e-8);
        }
        // and ε_r approaches ε_i + 2σ_a²/η_i
        let chain = DetectionChain::new(0.9999, 0.95, Some(bbo_amp(40.0))).unwrap();
        let eff = chain.effective_loss().unwrap();
        let floor = 1e-4 / 0.9999 + 2.0 * eff.sigma_a2 / 0.9999;
        assert_relative_eq!(eff.epsilon_r, floor, max_relative = 1e-12);
    }

    #[test]
    fn layered_convergence_is_first_order() {
        let amp = bbo_amp(2.3);
        let exact = bulk_noise_variance(&amp).unwrap();
        let errs: Vec<f64> = [100, 1000, 10_000, 100_000]
            .iter()
            .map(|&n| (bulk_noise_variance_layered(&amp, n).unwrap() - exact).abs() / exact)
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
            assert_relative_eq!(w[0] / w[1], 10.0, max_relative = 0.01);
        }
        assert!(errs[3] < 1e-4);
    }
}
