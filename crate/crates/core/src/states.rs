//! Closed-form Wigner functions, characteristic functions and quadrature
//! marginals of the supported ideal input states.
//!
//! All states are squeezed along `p` (anti-squeezed along `q`) with squeeze
//! factor `s = e^{2 r1}`; vacuum and single photon are the `r1 = 0` cases.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Largest accepted preparation squeezing; `e^{2 r1}` stays far from overflow.
pub const MAX_R1: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Vacuum,
    SqueezedVacuum,
    SinglePhoton,
    SqueezedSinglePhoton,
}

impl StateKind {
    pub fn is_squeezed(self) -> bool {
        matches!(
            self,
            StateKind::SqueezedVacuum | StateKind::SqueezedSinglePhoton
        )
    }

    /// Gaussian states have a positive Wigner function everywhere.
    pub fn is_gaussian(self) -> bool {
        matches!(self, StateKind::Vacuum | StateKind::SqueezedVacuum)
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StateKind::Vacuum => "vacuum",
            StateKind::SqueezedVacuum => "squeezed_vacuum",
            StateKind::SinglePhoton => "single_photon",
            StateKind::SqueezedSinglePhoton => "squeezed_single_photon",
        };
        f.write_str(name)
    }
}

/// An ideal input state. Immutable once constructed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStateSpec")]
pub struct StateSpec {
    kind: StateKind,
    r1: f64,
}

#[derive(Deserialize)]
struct RawStateSpec {
    kind: StateKind,
    #[serde(default)]
    r1: f64,
}

impl TryFrom<RawStateSpec> for StateSpec {
    type Error = Error;

    fn try_from(raw: RawStateSpec) -> Result<Self> {
        StateSpec::new(raw.kind, raw.r1)
    }
}

impl StateSpec {
    /// `r1` is ignored (fixed to zero) for the unsqueezed kinds.
    pub fn new(kind: StateKind, r1: f64) -> Result<Self> {
        let r1 = ensure_finite("r1", r1)?;
        if r1 < 0.0 {
            return Err(Error::invalid(
                "r1",
                format!("must be non-negative, got {r1}"),
            ));
        }
        if r1 > MAX_R1 {
            return Err(Error::OutOfRange {
                name: "r1",
                value: r1,
                range: "[0, 10]",
            });
        }
        let r1 = if kind.is_squeezed() { r1 } else { 0.0 };
        Ok(Self { kind, r1 })
    }

    pub fn vacuum() -> Self {
        Self {
            kind: StateKind::Vacuum,
            r1: 0.0,
        }
    }

    pub fn single_photon() -> Self {
        Self {
            kind: StateKind::SinglePhoton,
            r1: 0.0,
        }
    }

    pub fn squeezed_vacuum(r1: f64) -> Result<Self> {
        Self::new(StateKind::SqueezedVacuum, r1)
    }

    pub fn squeezed_single_photon(r1: f64) -> Result<Self> {
        Self::new(StateKind::SqueezedSinglePhoton, r1)
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    /// `s = e^{2 r1}`, the ratio of anti-squeezed to squeezed variance.
    pub fn squeeze_factor(&self) -> f64 {
        (2.0 * self.r1).exp()
    }

    fn has_photon(&self) -> bool {
        !self.kind.is_gaussian()
    }

    pub fn wigner(&self, q: f64, p: f64) -> Result<f64> {
        ensure_finite("q", q)?;
        ensure_finite("p", p)?;
        let s = self.squeeze_factor();
        let quad = q * q / s + p * p * s;
        let envelope = (-quad).exp() / PI;
        Ok(if self.has_photon() {
            (2.0 * quad - 1.0) * envelope
        } else {
            envelope
        })
    }

    /// Splits `C(z)` into a polynomial prefactor and a Gaussian exponent,
    /// `C = poly · exp(exponent)`, so callers can combine exponents before
    /// exponentiating.
    pub(crate) fn char_parts(&self, z_re: f64, z_im: f64) -> (f64, f64) {
        let s = self.squeeze_factor();
        let t = s * z_re * z_re + z_im * z_im / s;
        let poly = if self.has_photon() {
            1.0 - 0.5 * t
        } else {
            1.0
        };
        (poly, -0.25 * t)
    }

    /// Symmetrized characteristic function `C(z)`. Real-valued for every
    /// supported state because all of them are inversion-symmetric.
    pub fn char_fn(&self, z: Complex64) -> Result<Complex64> {
        ensure_finite("z_re", z.re)?;
        ensure_finite("z_im", z.im)?;
        let (poly, exponent) = self.char_parts(z.re, z.im);
        if !poly.is_finite() {
            return Err(Error::Overflow("characteristic function"));
        }
        Ok(Complex64::new(poly * exponent.exp(), 0.0))
    }

    /// `u(θ) = s cos²θ + sin²θ / s`; the Gaussian envelope of the quadrature
    /// marginal at phase θ is `exp(-x² / u)`.
    pub fn projected_spread(&self, theta: f64) -> f64 {
        let s = self.squeeze_factor();
        let (sin, cos) = theta.sin_cos();
        s * cos * cos + sin * sin / s
    }

    /// `E[q_θ²]` for the ideal state.
    pub fn quadrature_second_moment(&self, theta: f64) -> f64 {
        let u = self.projected_spread(theta);
        if self.has_photon() {
            1.5 * u
        } else {
            0.5 * u
        }
    }

    /// Probability density of the quadrature `q_θ`, the 1-D inverse Fourier
    /// transform of `C(ξ e^{iθ})`. Phase wrapping is the caller's job.
    pub fn marginal_pdf(&self, theta: f64, q: f64) -> Result<f64> {
        ensure_finite("q", q)?;
        if !(0.0..PI).contains(&theta) {
            return Err(Error::OutOfRange {
                name: "theta",
                value: theta,
                range: "[0, π)",
            });
        }
        let u = self.projected_spread(theta);
        let gauss = (-q * q / u).exp() / (PI * u).sqrt();
        Ok(if self.has_photon() {
            2.0 * q * q / u * gauss
        } else {
            gauss
        })
    }

    pub fn mean_photon_number(&self) -> f64 {
        let sh = self.r1.sinh();
        match self.kind {
            StateKind::Vacuum => 0.0,
            StateKind::SinglePhoton => 1.0,
            StateKind::SqueezedVacuum => sh * sh,
            StateKind::SqueezedSinglePhoton => 3.0 * sh * sh + 1.0,
        }
    }
}

impl fmt::Display for StateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_squeezed() {
            write!(f, "{}(r1={})", self.kind, self.r1)
        } else {
            write!(f, "{}", self.kind)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const KINDS: [StateKind; 4] = [
        StateKind::Vacuum,
        StateKind::SqueezedVacuum,
        StateKind::SinglePhoton,
        StateKind::SqueezedSinglePhoton,
    ];

    fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n - 1 {
            acc += f(lo + i as f64 * h);
        }
        acc * h
    }

    /// Largest quadrature standard deviation over all phases.
    fn max_sd(state: &StateSpec) -> f64 {
        state
            .quadrature_second_moment(0.0)
            .max(state.quadrature_second_moment(PI / 2.0))
            .sqrt()
    }

    #[test]
    fn wigner_anchor_values() {
        assert_relative_eq!(StateSpec::vacuum().wigner(0.0, 0.0).unwrap(), 1.0 / PI);
        assert_relative_eq!(
            StateSpec::single_photon().wigner(0.0, 0.0).unwrap(),
            -1.0 / PI
        );
        let bsv = StateSpec::squeezed_vacuum(3.0).unwrap();
        assert_relative_eq!(bsv.wigner(0.0, 0.0).unwrap(), 1.0 / PI);
        // (2/s - 1)/π · e^{-1/s} at s = e², evaluated with 40-digit arithmetic
        let ssp = StateSpec::squeezed_single_photon(1.0).unwrap();
        assert_relative_eq!(
            ssp.wigner(1.0, 0.0).unwrap(),
            -0.202_767_572_230_899_09,
            max_relative = 1e-14
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(StateSpec::vacuum().wigner(f64::NAN, 0.0).is_err());
        assert!(StateSpec::squeezed_vacuum(-0.1).is_err());
        assert!(matches!(
            StateSpec::squeezed_vacuum(10.5),
            Err(Error::OutOfRange { .. })
        ));
        assert!(StateSpec::vacuum().marginal_pdf(PI, 0.0).is_err());
        assert!(StateSpec::vacuum().marginal_pdf(-1e-3, 0.0).is_err());
    }

    #[test]
    fn unsqueezed_kinds_ignore_r1() {
        let s = StateSpec::new(StateKind::SinglePhoton, 2.0).unwrap();
        assert_eq!(s.r1(), 0.0);
    }

    #[test]
    fn photon_numbers() {
        assert_eq!(StateSpec::vacuum().mean_photon_number(), 0.0);
        assert_eq!(StateSpec::single_photon().mean_photon_number(), 1.0);
        let n = StateSpec::squeezed_vacuum(3.0)
            .unwrap()
            .mean_photon_number();
        assert!((n - 100.0).abs() < 1.0, "{n}");
        let n = StateSpec::squeezed_single_photon(3.0)
            .unwrap()
            .mean_photon_number();
        assert!((n - 300.0).abs() < 3.0, "{n}");
    }

    #[test]
    fn char_fn_special_values() {
        for kind in KINDS {
            let st = StateSpec::new(kind, 1.3).unwrap();
            assert_eq!(
                st.char_fn(Complex64::new(0.0, 0.0)).unwrap(),
                Complex64::new(1.0, 0.0)
            );
        }
        for xi in [0.3, 1.0, 2.5] {
            let c = StateSpec::vacuum()
                .char_fn(Complex64::new(xi, 0.0))
                .unwrap();
            assert_relative_eq!(c.re, (-xi * xi / 4.0_f64).exp(), max_relative = 1e-15);
        }
    }

    /// Brute-force 2-D Fourier integral of the Wigner function.
    fn char_fn_by_quadrature(state: &StateSpec, a: f64, b: f64) -> f64 {
        let s = state.squeeze_factor();
        let sq = (1.5 * s).sqrt();
        let sp = (1.5 / s).sqrt();
        let n = 1201;
        trapezoid(-12.0 * sq, 12.0 * sq, n, |q| {
            trapezoid(-12.0 * sp, 12.0 * sp, n, |p| {
                state.wigner(q, p).unwrap() * (a * q + b * p).cos()
            })
        })
    }

    #[test]
    fn char_fn_matches_quadrature_oracle() {
        let cases = [
            (StateSpec::squeezed_vacuum(3.0).unwrap(), 0.5, 0.5),
            (StateSpec::squeezed_vacuum(1.0).unwrap(), 0.5, 0.5),
            (StateSpec::squeezed_single_photon(1.0).unwrap(), 0.7, -0.3),
            (StateSpec::single_photon(), 1.1, 0.4),
        ];
        for (st, a, b) in cases {
            let exact = st.char_fn(Complex64::new(a, b)).unwrap().re;
            let oracle = char_fn_by_quadrature(&st, a, b);
            assert!((exact - oracle).abs() < 1e-8, "{st}: {exact} vs {oracle}");
        }
    }

    #[test]
    fn wigner_is_normalized() {
        for kind in KINDS {
            for r1 in [0.0, 1.0, 3.0] {
                let st = StateSpec::new(kind, r1).unwrap();
                let sq = st.quadrature_second_moment(0.0).sqrt();
                let sp = st.quadrature_second_moment(PI / 2.0).sqrt();
                let total = trapezoid(-6.0 * sq, 6.0 * sq, 801, |q| {
                    trapezoid(-6.0 * sp, 6.0 * sp, 801, |p| st.wigner(q, p).unwrap())
                });
                assert!((total - 1.0).abs() < 1e-6, "{st}: {total}");
            }
        }
    }

    #[test]
    fn marginal_matches_projected_wigner() {
        for kind in KINDS {
            for r1 in [0.0, 1.0, 3.0] {
                let st = StateSpec::new(kind, r1).unwrap();
                let s = st.squeeze_factor();
                let min_sd = (0.5 / s).sqrt();
                let span = 8.0 * max_sd(&st);
                let n = (2.0 * span / (min_sd / 8.0)) as usize + 1;
                for k in 0..8 {
                    let theta = k as f64 * PI / 8.0;
                    let (sin, cos) = theta.sin_cos();
                    let sd = st.quadrature_second_moment(theta).sqrt();
                    for x in [-2.0 * sd, -0.3 * sd, 0.0, 0.9 * sd, 3.0 * sd] {
                        let numeric = trapezoid(-span, span, n, |y| {
                            st.wigner(x * cos - y * sin, x * sin + y * cos).unwrap()
                        });
                        let closed = st.marginal_pdf(theta, x).unwrap();
                        assert!(
                            (numeric - closed).abs() < 1e-8,
                            "{st} θ={theta} x={x}: {numeric} vs {closed}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_photon_marginal_is_phase_independent() {
        let st = StateSpec::single_photon();
        for theta in [0.0, 0.7, 2.0] {
            for q in [-1.5_f64, 0.0, 0.4, 2.2] {
                let expected = 2.0 * q * q * (-q * q).exp() / PI.sqrt();
                assert_relative_eq!(
                    st.marginal_pdf(theta, q).unwrap(),
                    expected,
                    max_relative = 1e-14
                );
            }
        }
        assert_relative_eq!(
            StateSpec::vacuum().marginal_pdf(0.0, 0.0).unwrap(),
            1.0 / PI.sqrt()
        );
    }

    #[test]
    fn squeezed_marginal_along_p() {
        let st = StateSpec::squeezed_vacuum(3.0).unwrap();
        let var = (-6.0_f64).exp() / 2.0;
        for q in [0.0, 0.01, 0.05] {
            let expected = (-q * q / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            assert_relative_eq!(
                st.marginal_pdf(PI / 2.0, q).unwrap(),
                expected,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn squeezed_single_photon_depth_is_independent_of_squeezing() {
        for r1 in [0.0, 0.5, 1.0, 3.0, 7.0] {
            let st = StateSpec::squeezed_single_photon(r1).unwrap();
            assert_relative_eq!(st.wigner(0.0, 0.0).unwrap(), -1.0 / PI);
        }
    }

    proptest! {
        #[test]
        fn char_fn_bounded(kind_idx in 0usize..4, r1 in 0.0f64..4.0, a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let st = StateSpec::new(KINDS[kind_idx], r1).unwrap();
            let c = st.char_fn(Complex64::new(a, b)).unwrap();
            prop_assert!(c.norm() <= 1.0 + 1e-15);
        }

        #[test]
        fn marginal_reflection_symmetry(kind_idx in 0usize..4, r1 in 0.0f64..4.0, theta in 1e-6f64..(PI - 1e-6), q in -5.0f64..5.0) {
            let st = StateSpec::new(KINDS[kind_idx], r1).unwrap();
            let a = st.marginal_pdf(theta, q).unwrap();
            let b = st.marginal_pdf(PI - theta, q).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
