//! Statistical helpers shared by the integration suites.
#![allow(dead_code)]

use homotomo::channels::{AmplifierParams, CrystalParams};
use homotomo::DetectionChain;

/// Chi-square critical value at α = 0.001 with 100 degrees of freedom.
pub const CHI2_CRIT_DF100: f64 = 149.449_252_779;
/// Asymptotic one-sample KS critical value at α = 0.001 for n = 10⁵,
/// `√(ln(2/α)/2) / √n`.
pub const KS_CRIT_N1E5: f64 = 0.006_163_1;

/// The three reference chains: lossless, 95% detector, 95% detector behind
/// a 20 dB BBO amplifier.
pub fn reference_chains() -> [(&'static str, DetectionChain); 3] {
    [
        ("lossless", DetectionChain::lossless()),
        ("eta95", DetectionChain::detector(0.95).unwrap()),
        (
            "eta95_amp",
            DetectionChain::new(
                0.9999,
                0.95,
                Some(AmplifierParams::new(2.3, CrystalParams::bbo()).unwrap()),
            )
            .unwrap(),
        ),
    ]
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d: f64, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// Composite Simpson rule with `m` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}
