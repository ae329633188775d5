//! Simulation and reconstruction toolkit for balanced homodyne tomography of
//! nonclassical light, with and without phase-sensitive pre-amplification.
//!
//! The pipeline runs ideal state → lossy/amplifying detection chain →
//! simulated quadrature samples → empirical characteristic functions →
//! unbiased rescaling → polar inverse Fourier transform → Wigner grid, with
//! closed-form references for every stage so reconstructions can be scored.
//!
//! Conventions: vacuum quadrature variance is 1/2, quadratures are
//! `q_θ = q cos θ + p sin θ`, and the characteristic function is
//! `C(z) = ∫∫ W(q, p) e^{i(z' q + z'' p)} dq dp` with `z = z' + i z''`.

pub mod channels;
pub mod error;
pub mod homodyne;
pub mod metrics;
pub mod scenario;
pub mod states;
pub mod tomography;

pub use channels::{AmplifierParams, CrystalParams, DetectionChain, EffectiveLoss};
pub use error::{Error, Result};
pub use homodyne::{EmpiricalHistogram, QuadratureDataset};
pub use metrics::QualityReport;
pub use states::{StateKind, StateSpec};
pub use tomography::{PolarCharGrid, ReconstructionConfig, WignerGrid};
