//! Finite-statistics balanced homodyne detection.
//!
//! For every local-oscillator phase the detected quadrature density is
//! tabulated by numerically inverting the damped characteristic function,
//! and samples are drawn by inverse-CDF lookup. Each phase owns its own
//! random stream: `ChaCha20Rng::seed_from_u64(seed)` with
//! `set_stream(phase_index)`, uniforms from `Rng::random::<f64>()`. That
//! mapping is part of the dataset contract; changing it changes every
//! stored dataset.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::{damped_char_value, damped_second_moment, DetectionChain};
use crate::error::{Error, Result};
use crate::states::StateSpec;

/// Identity of the generator behind [`sample_quadratures`].
pub const RNG_IDENTITY: &str =
    "rand_chacha 0.9 ChaCha20Rng; seed_from_u64(seed); set_stream(phase_index); random::<f64>()";

const TABLE_POINTS: usize = 4096;
const TABLE_HALF_WIDTH_SD: f64 = 8.0;
const TABLE_XI_POINTS: usize = 192;
/// `ξ·sd` at which the tabulation stops; Gaussian-type CFs are below e^{-80} there.
const TABLE_XI_REACH: f64 = 13.0;
const NEGATIVE_DENSITY_TOLERANCE: f64 = -1e-9;

/// Local-oscillator phases to scan. All phases lie in `[0, π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSchedule {
    Uniform {
        n: usize,
    },
    /// Fine uniform coverage of `[center − width/2, center + width/2)` plus
    /// a coarse uniform grid over the rest of `[0, π)`. For strongly squeezed
    /// states, whose marginals change quickly near the squeezed phase.
    Dense {
        center: f64,
        width: f64,
        n_window: usize,
        n_coarse: usize,
    },
}

impl PhaseSchedule {
    pub fn phases(&self) -> Result<Vec<f64>> {
        match *self {
            PhaseSchedule::Uniform { n } => {
                if n == 0 {
                    return Err(Error::invalid("n_phases", "at least one phase is required"));
                }
                Ok((0..n).map(|k| k as f64 * PI / n as f64).collect())
            }
            PhaseSchedule::Dense {
                center,
                width,
                n_window,
                n_coarse,
            } => {
                if !(width > 0.0 && width < PI) {
                    return Err(Error::invalid(
                        "width",
                        format!("must lie in (0, π), got {width}"),
                    ));
                }
                if n_window == 0 {
                    return Err(Error::invalid("n_window", "at least one phase is required"));
                }
                let start = center - 0.5 * width;
                let in_window = |t: f64| {
                    let rel = (t - start).rem_euclid(PI);
                    rel < width
                };
                let mut out: Vec<f64> = (0..n_window)
                    .map(|k| wrap_phase(start + k as f64 * width / n_window as f64))
                    .collect();
                out.extend(
                    (0..n_coarse)
                        .map(|k| k as f64 * PI / n_coarse as f64)
                        .filter(|&t| !in_window(t)),
                );
                out.sort_by(f64::total_cmp);
                out.dedup();
                Ok(out)
            }
        }
    }
}

/// Wraps an angle into `[0, π)`; quadratures at θ and θ + π are the same
/// observable up to sign, which callers handle separately.
pub fn wrap_phase(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Tabulated density and CDF of the detected quadrature at one phase.
#[derive(Debug, Clone)]
pub struct MarginalTable {
    x0: f64,
    dx: f64,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl MarginalTable {
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn len(&self) -> usize {
        self.pdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pdf.is_empty()
    }

    pub fn pdf(&self) -> &[f64] {
        &self.pdf
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    /// Piecewise-linear CDF, consistent with [`MarginalTable::quantile`].
    pub fn cdf(&self, x: f64) -> f64 {
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 {
            return 0.0;
        }
        let i = pos.floor() as usize;
        if i + 1 >= self.cdf.len() {
            return 1.0;
        }
        let frac = pos - i as f64;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }

    /// Inverse CDF for `u ∈ [0, 1)` by monotone linear interpolation.
    pub fn quantile(&self, u: f64) -> f64 {
        let hi = self
            .cdf
            .partition_point(|&c| c <= u)
            .clamp(1, self.cdf.len() - 1);
        let lo = hi - 1;
        let span = self.cdf[hi] - self.cdf[lo];
        let frac = if span > 0.0 {
            (u - self.cdf[lo]) / span
        } else {
            0.0
        };
        self.x(lo) + frac * self.dx
    }
}

/// Tabulates the detected quadrature density at phase `theta` on 4096
/// points over ±8 standard deviations, by trapezoid inversion of the damped
/// characteristic function, then integrates it into a CDF.
pub fn tabulate_marginal(
    state: &StateSpec,
    chain: &DetectionChain,
    theta: f64,
) -> Result<MarginalTable> {
    let eff = chain.effective_loss()?;
    let sd = damped_second_moment(state, chain, &eff, theta).sqrt();
    if !(sd.is_finite() && sd > 0.0) {
        return Err(Error::ReconstructionGrid(format!(
            "degenerate quadrature spread {sd}"
        )));
    }

    let h = TABLE_XI_REACH / sd / (TABLE_XI_POINTS - 1) as f64;
    let mut weights = Vec::with_capacity(TABLE_XI_POINTS);
    for k in 0..TABLE_XI_POINTS {
        let c = damped_char_value(state, chain, &eff, theta, k as f64 * h)?;
        let w = if k == 0 || k == TABLE_XI_POINTS - 1 {
            0.5
        } else {
            1.0
        };
        weights.push(c * w * h / PI);
    }

    let x0 = -TABLE_HALF_WIDTH_SD * sd;
    let dx = 2.0 * TABLE_HALF_WIDTH_SD * sd / (TABLE_POINTS - 1) as f64;
    let mut pdf = vec![0.0; TABLE_POINTS];
    const ANCHOR: usize = 256;
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let xi = k as f64 * h;
        let (ss, cs) = (xi * dx).sin_cos();
        for (block, chunk) in pdf.chunks_mut(ANCHOR).enumerate() {
            let (mut s, mut c) = (xi * (x0 + (block * ANCHOR) as f64 * dx)).sin_cos();
            for v in chunk.iter_mut() {
                *v += w * c;
                let next_c = c * cs - s * ss;
                s = s * cs + c * ss;
                c = next_c;
            }
        }
    }

    if let Some((i, &v)) = pdf
        .iter()
        .enumerate()
        .find(|(_, &v)| v < NEGATIVE_DENSITY_TOLERANCE)
    {
        return Err(Error::ReconstructionGrid(format!(
            "density {v:e} at x = {:.6} (θ = {theta})",
            x0 + i as f64 * dx
        )));
    }
    for v in pdf.iter_mut() {
        *v = v.max(0.0);
    }

    let mut cdf = Vec::with_capacity(TABLE_POINTS);
    let mut acc = 0.0;
    cdf.push(0.0);
    for w in pdf.windows(2) {
        acc += 0.5 * (w[0] + w[1]) * dx;
        cdf.push(acc);
    }
    if (acc - 1.0).abs() > 1e-6 {
        return Err(Error::ReconstructionGrid(format!(
            "tabulated density integrates to {acc} (θ = {theta})"
        )));
    }
    for c in cdf.iter_mut() {
        *c /= acc;
    }
    Ok(MarginalTable { x0, dx, pdf, cdf })
}

/// Simulated homodyne record: raw (not rescaled) quadrature outcomes per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureDataset {
    state: StateSpec,
    chain: DetectionChain,
    phases: Vec<f64>,
    samples: Vec<Vec<f64>>,
    seed: u64,
    n_per_phase: usize,
}

/// JSON companion of the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub state: StateSpec,
    pub chain: DetectionChain,
    pub phases: Vec<f64>,
    pub seed: u64,
    pub n_per_phase: usize,
    pub rng: String,
}

const DATASET_FORMAT: &str = "homotomo-quadratures/1";

impl QuadratureDataset {
    /// Assembles a dataset from existing samples, checking its invariants.
    pub fn from_parts(
        state: StateSpec,
        chain: DetectionChain,
        phases: Vec<f64>,
        samples: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if phases.len() != samples.len() {
            return Err(Error::invalid(
                "samples",
                format!("{} phases but {} sample lists", phases.len(), samples.len()),
            ));
        }
        if let Some(t) = phases.iter().find(|t| !(0.0..PI).contains(*t)) {
            return Err(Error::OutOfRange {
                name: "phase",
                value: *t,
                range: "[0, π)",
            });
        }
        if samples.iter().flatten().any(|q| !q.is_finite()) {
            return Err(Error::invalid("samples", "every sample must be finite"));
        }
        let n_per_phase = samples.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            state,
            chain,
            phases,
            samples,
            seed,
            n_per_phase,
        })
    }

    pub fn state(&self) -> &StateSpec {
        &self.state
    }

    pub fn chain(&self) -> &DetectionChain {
        &self.chain
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_per_phase(&self) -> usize {
        self.n_per_phase
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            format: DATASET_FORMAT.to_string(),
            state: self.state,
            chain: self.chain,
            phases: self.phases.clone(),
            seed: self.seed,
            n_per_phase: self.n_per_phase,
            rng: RNG_IDENTITY.to_string(),
        }
    }

    /// CSV body with header `theta,q`; every value printed with 17
    /// significant digits so parsing restores it bit for bit.
    pub fn to_csv_string(&self) -> String {
        let total: usize = self.samples.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(48 * total + 8);
        self.write_csv_to(&mut out)
            .expect("writing to memory cannot fail");
        String::from_utf8(out).expect("CSV is ASCII")
    }

    /// Streams the CSV serialization into `sink`.
    pub fn write_csv_to(&self, sink: &mut impl io::Write) -> io::Result<()> {
        let mut line = String::with_capacity(64);
        sink.write_all(b"theta,q\n")?;
        for (theta, qs) in self.phases.iter().zip(&self.samples) {
            let t = format!("{theta:.16e}");
            for q in qs {
                line.clear();
                let _ = writeln!(line, "{t},{q:.16e}");
                sink.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the CSV serialization, used as dataset provenance.
    pub fn content_hash(&self) -> String {
        let mut hasher = HashSink(Sha256::new());
        self.write_csv_to(&mut hasher).expect("hashing cannot fail");
        hex::encode(hasher.0.finalize())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`, returning both paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut file = io::BufWriter::new(fs::File::create(&csv_path)?);
        self.write_csv_to(&mut file)?;
        io::Write::flush(&mut file)?;
        fs::write(
            &json_path,
            serde_json::to_string_pretty(&self.sidecar())? + "\n",
        )?;
        Ok((csv_path, json_path))
    }

    pub fn read(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        if sidecar.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "unknown dataset format `{}`",
                sidecar.format
            )));
        }
        let text = fs::read_to_string(csv_path)?;
        Self::parse_csv(&text, sidecar)
    }

    pub fn parse_csv(text: &str, sidecar: DatasetSidecar) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("theta,q") {
            return Err(Error::Format(
                "dataset CSV must start with `theta,q`".into(),
            ));
        }
        let mut samples = vec![Vec::new(); sidecar.phases.len()];
        let mut cursor = 0usize;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (t, q) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!("line {}: expected two fields", lineno + 2))
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))
            };
            let (t, q) = (parse(t)?, parse(q)?);
            while cursor < sidecar.phases.len() && sidecar.phases[cursor] != t {
                cursor += 1;
            }
            if cursor == sidecar.phases.len() {
                return Err(Error::Format(format!(
                    "line {}: phase {t:e} is not listed (in order) in the sidecar",
                    lineno + 2
                )));
            }
            samples[cursor].push(q);
        }
        let mut ds = Self::from_parts(
            sidecar.state,
            sidecar.chain,
            sidecar.phases,
            samples,
            sidecar.seed,
        )?;
        ds.n_per_phase = sidecar.n_per_phase;
        Ok(ds)
    }
}

/// Feeds written bytes into a SHA-256 state.
struct HashSink(Sha256);

impl io::Write for HashSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Draws `n_per_phase` detected quadrature values at each phase. Output is
/// a pure function of the arguments, independent of thread count.
pub fn sample_quadratures(
    state: &StateSpec,
    chain: &DetectionChain,
    phases: &[f64],
    n_per_phase: usize,
    seed: u64,
) -> Result<QuadratureDataset> {
    if n_per_phase == 0 {
        return Err(Error::invalid(
            "n_per_phase",
            "at least one sample per phase is required",
        ));
    }
    if phases.is_empty() {
        return Err(Error::invalid("phases", "at least one phase is required"));
    }
    if let Some(t) = phases.iter().find(|t| !(0.0..PI).contains(*t)) {
        return Err(Error::OutOfRange {
            name: "phase",
            value: *t,
            range: "[0, π)",
        });
    }
    let samples = phases
        .par_iter()
        .enumerate()
        .map(|(index, &theta)| {
            let table = tabulate_marginal(state, chain, theta)?;
            let mut rng = phase_rng(seed, index);
            Ok((0..n_per_phase)
                .map(|_| table.quantile(rng.random::<f64>()))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuadratureDataset {
        state: *state,
        chain: *chain,
        phases: phases.to_vec(),
        samples,
        seed,
        n_per_phase,
    })
}

/// The random stream assigned to phase `index` under `seed`.
pub fn phase_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// In-range samples; equals the sum of `counts`.
    pub total: u64,
    pub out_of_range: u64,
    /// Set when the range misses more than 0.1% of the samples.
    pub coverage_warning: Option<String>,
}

/// Fixed-width histogram of one phase. Bins are half-open `[a, b)` except
/// the last, which also takes its right edge.
pub fn histogram(
    dataset: &QuadratureDataset,
    phase_index: usize,
    n_bins: usize,
    range: (f64, f64),
) -> Result<EmpiricalHistogram> {
    if n_bins < 2 {
        return Err(Error::invalid(
            "n_bins",
            format!("need at least 2 bins, got {n_bins}"),
        ));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid(
            "range",
            format!("need finite lo < hi, got ({lo}, {hi})"),
        ));
    }
    let samples = dataset
        .samples
        .get(phase_index)
        .ok_or_else(|| Error::invalid("phase_index", format!("{phase_index} out of range")))?;
    if samples.is_empty() {
        return Err(Error::invalid(
            "phase_index",
            format!("phase {phase_index} has no samples"),
        ));
    }
    let width = (hi - lo) / n_bins as f64;
    let bin_edges: Vec<f64> = (0..=n_bins)
        .map(|i| {
            if i == n_bins {
                hi
            } else {
                lo + i as f64 * width
            }
        })
        .collect();
    let mut counts = vec![0u64; n_bins];
    let mut out_of_range = 0u64;
    for &q in samples {
        if q < lo || q > hi {
            out_of_range += 1;
            continue;
        }
        let mut bin = (((q - lo) / width) as usize).min(n_bins - 1);
        // floating-point guard so that bin membership agrees with the edges
        if q < bin_edges[bin] {
            bin -= 1;
        } else if bin + 1 < n_bins && q >= bin_edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
    }
    let n = samples.len() as u64;
    let coverage_warning = (out_of_range as f64 > 1e-3 * n as f64).then(|| {
        format!(
            "range [{lo}, {hi}] covers {:.4}% of samples",
            100.0 * (n - out_of_range) as f64 / n as f64
        )
    });
    Ok(EmpiricalHistogram {
        bin_edges,
        counts,
        total: n - out_of_range,
        out_of_range,
        coverage_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{AmplifierParams, CrystalParams};

    fn ds(samples: Vec<f64>) -> QuadratureDataset {
        QuadratureDataset::from_parts(
            StateSpec::vacuum(),
            DetectionChain::lossless(),
            vec![0.0],
            vec![samples],
            0,
        )
        .unwrap()
    }

    #[test]
    fn histogram_hand_count() {
        let h = histogram(&ds(vec![-1.0, 0.0, 0.0, 1.0]), 0, 2, (-1.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 3]);
        assert_eq!(h.total, 4);
        assert_eq!(h.bin_edges, vec![-1.0, 0.0, 1.0]);
        assert!(h.coverage_warning.is_none());
    }

    #[test]
    fn histogram_errors_and_warnings() {
        assert!(histogram(&ds(vec![0.0]), 0, 1, (-1.0, 1.0)).is_err());
        assert!(histogram(&ds(vec![]), 0, 4, (-1.0, 1.0)).is_err());
        assert!(histogram(&ds(vec![0.0]), 3, 4, (-1.0, 1.0)).is_err());
        let h = histogram(&ds(vec![0.0, 5.0, -0.5]), 0, 4, (-1.0, 1.0)).unwrap();
        assert_eq!(h.out_of_range, 1);
        assert_eq!(h.total, 2);
        assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        assert!(h.coverage_warning.is_some());
    }

    #[test]
    fn sampling_rejects_bad_arguments() {
        let vac = StateSpec::vacuum();
        let chain = DetectionChain::lossless();
        assert!(sample_quadratures(&vac, &chain, &[0.0], 0, 1).is_err());
        assert!(sample_quadratures(&vac, &chain, &[PI], 10, 1).is_err());
        assert!(sample_quadratures(&vac, &chain, &[], 10, 1).is_err());
    }

    #[test]
    fn tabulated_density_matches_closed_marginal() {
        for state in [
            StateSpec::vacuum(),
            StateSpec::squeezed_vacuum(1.0).unwrap(),
            StateSpec::single_photon(),
            StateSpec::squeezed_single_photon(3.0).unwrap(),
        ] {
            for theta in [0.0, 0.4, PI / 2.0, 2.9] {
                let table = tabulate_marginal(&state, &DetectionChain::lossless(), theta).unwrap();
                let peak = table.pdf().iter().cloned().fold(0.0, f64::max);
                for i in (0..table.len()).step_by(37) {
                    let exact = state.marginal_pdf(theta, table.x(i)).unwrap();
                    assert!(
                        (table.pdf()[i] - exact).abs() < 1e-10 * peak.max(1.0),
                        "{state} θ={theta} x={}: {} vs {exact}",
                        table.x(i),
                        table.pdf()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let amp = AmplifierParams::new(2.3, CrystalParams::bbo()).unwrap();
        let chain = DetectionChain::new(0.9999, 0.95, Some(amp)).unwrap();
        let table = tabulate_marginal(
            &StateSpec::squeezed_single_photon(1.0).unwrap(),
            &chain,
            1.0,
        )
        .unwrap();
        for u in [1e-6, 0.01, 0.3, 0.5, 0.77, 0.999_999] {
            let x = table.quantile(u);
            assert!((table.cdf(x) - u).abs() < 1e-12, "u={u}");
        }
    }

    #[test]
    fn dense_schedule_is_sorted_and_wrapped() {
        let sched = PhaseSchedule::Dense {
            center: 0.0,
            width: 0.01,
            n_window: 100,
            n_coarse: 180,
        };
        let phases = sched.phases().unwrap();
        assert!(phases.windows(2).all(|w| w[0] < w[1]));
        assert!(phases.iter().all(|t| (0.0..PI).contains(t)));
        assert_eq!(
            phases
                .iter()
                .filter(|&&t| !(0.0051..PI - 0.0051).contains(&t))
                .count(),
            100
        );
        assert_eq!(
            PhaseSchedule::Uniform { n: 4 }.phases().unwrap(),
            vec![0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0]
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let st = StateSpec::squeezed_vacuum(0.7).unwrap();
        let chain = DetectionChain::detector(0.8).unwrap();
        let phases = PhaseSchedule::Uniform { n: 5 }.phases().unwrap();
        let data = sample_quadratures(&st, &chain, &phases, 50, 99).unwrap();
        let back = QuadratureDataset::parse_csv(&data.to_csv_string(), data.sidecar()).unwrap();
        assert_eq!(back, data);
    }
}
