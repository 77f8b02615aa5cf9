//! Problem instances: ground truth, measurement frames, dose-scaled
//! intensities and Poisson counts.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CVec, LinalgError, MeasurementFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("noiseless instance: counts equal the noiseless intensities, SNR undefined")]
    Noiseless,
    #[error("instance inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter(msg.into())
}

/// RNG streams derived from one instance seed.
const FRAME_STREAM: u64 = 0;
const TRUTH_STREAM: u64 = 1;
const COUNT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// How to build the measurement vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSpec {
    /// `m` i.i.d. standard complex Gaussian rows of length `n`.
    Gaussian { n: usize, m: usize },
    /// Far-field ptychography: rows `a_{k,l}[j] = w[(j - l) mod n] e^{-2 pi i k j / n}`
    /// for every shift `l` and frequency `k`. `mask` holds the support of `w`.
    Ptycho {
        n: usize,
        mask: Vec<Complex64>,
        shifts: Vec<usize>,
        freqs: Vec<usize>,
    },
}

impl FrameSpec {
    pub fn n(&self) -> usize {
        match self {
            FrameSpec::Gaussian { n, .. } | FrameSpec::Ptycho { n, .. } => *n,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            FrameSpec::Gaussian { m, .. } => *m,
            FrameSpec::Ptycho { shifts, freqs, .. } => shifts.len() * freqs.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            FrameSpec::Gaussian { n, m } => {
                if *n == 0 || *m == 0 {
                    return Err(invalid(format!("gaussian frame needs n, m >= 1 (n = {n}, m = {m})")));
                }
            }
            FrameSpec::Ptycho {
                n,
                mask,
                shifts,
                freqs,
            } => {
                if *n == 0 {
                    return Err(invalid("ptycho frame needs n >= 1"));
                }
                if mask.is_empty() || mask.len() > *n {
                    return Err(invalid(format!(
                        "mask support length {} must lie in 1..={n}",
                        mask.len()
                    )));
                }
                if shifts.is_empty() || freqs.is_empty() {
                    return Err(invalid("ptycho frame needs at least one shift and one frequency"));
                }
                if let Some(s) = shifts.iter().find(|&&s| s >= *n) {
                    return Err(invalid(format!("shift {s} out of range 0..{n}")));
                }
                if let Some(k) = freqs.iter().find(|&&k| k >= *n) {
                    return Err(invalid(format!("frequency {k} out of range 0..{n}")));
                }
            }
        }
        Ok(())
    }

    /// Builds the frame. Gaussian frames draw from the frame stream of `seed`;
    /// ptychographic frames are deterministic and ignore it.
    pub fn build(&self, seed: u64) -> Result<MeasurementFrame, ModelError> {
        self.validate()?;
        match self {
            FrameSpec::Gaussian { n, m } => {
                let mut rng = stream(seed, FRAME_STREAM);
                let rows: Vec<CVec> = (0..*m).map(|_| CVec::random_gaussian(*n, &mut rng)).collect();
                Ok(MeasurementFrame::from_rows(&rows)?)
            }
            FrameSpec::Ptycho {
                n,
                mask,
                shifts,
                freqs,
            } => gen_ptycho_frame(&CVec::from_vec(mask.clone()), *n, shifts, freqs),
        }
    }
}

/// Ptychographic frame with one row per `(shift, frequency)` pair, shifts in
/// the outer loop.
pub fn gen_ptycho_frame(
    mask: &CVec,
    n: usize,
    shifts: &[usize],
    freqs: &[usize],
) -> Result<MeasurementFrame, ModelError> {
    FrameSpec::Ptycho {
        n,
        mask: mask.as_slice().to_vec(),
        shifts: shifts.to_vec(),
        freqs: freqs.to_vec(),
    }
    .validate()?;
    let mut padded = vec![Complex64::new(0.0, 0.0); n];
    padded[..mask.len()].copy_from_slice(mask.as_slice());
    let mut entries = Vec::with_capacity(shifts.len() * freqs.len() * n);
    for &shift in shifts {
        for &k in freqs {
            for j in 0..n {
                let w = padded[(j + n - shift) % n];
                // reduce k*j mod n before scaling to keep the phase exact
                let phase = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                entries.push(w * Complex64::from_polar(1.0, phase));
            }
        }
    }
    Ok(MeasurementFrame::from_row_major(
        shifts.len() * freqs.len(),
        n,
        &entries,
    )?)
}

/// Knuth-style inverse transform below this mean, PTRS above.
const INVERSE_TRANSFORM_LIMIT: f64 = 30.0;

/// One Poisson(`lambda`) draw.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64, ModelError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid(format!("Poisson mean must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    if lambda < INVERSE_TRANSFORM_LIMIT {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            if p == 0.0 {
                // cdf saturated just below u through rounding
                break;
            }
            cdf += p;
        }
        Ok(k)
    } else {
        use rand_distr::{Distribution, Poisson};
        let dist = Poisson::new(lambda).map_err(|e| invalid(e.to_string()))?;
        Ok(dist.sample(rng) as u64)
    }
}

/// A simulated measurement experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance {
    pub frame_spec: FrameSpec,
    pub frame: MeasurementFrame,
    /// Ground truth, scaled so that `sum_i |<a_i, x>|^2 = 1`.
    pub x: CVec,
    pub dose: f64,
    /// `dose * |<a_i, x>|^2`.
    pub truth_intensities: Vec<f64>,
    pub counts: Vec<u64>,
    pub seed: u64,
}

impl ProblemInstance {
    /// Draws a complex Gaussian ground truth, normalizes it against the frame
    /// and samples Poisson counts at the given dose.
    pub fn generate(frame_spec: &FrameSpec, dose: f64, seed: u64) -> Result<Self, ModelError> {
        if !(dose > 0.0) || !dose.is_finite() {
            return Err(invalid(format!("dose must be positive and finite, got {dose}")));
        }
        let frame = frame_spec.build(seed)?;
        let mut rng = stream(seed, TRUTH_STREAM);
        let mut x = CVec::random_gaussian(frame.n(), &mut rng);
        let energy = frame.forward(&x)?.norm_sqr();
        if energy == 0.0 {
            return Err(invalid("ground truth lies in the kernel of the frame"));
        }
        x.scale(Complex64::new(1.0 / energy.sqrt(), 0.0));
        Self::from_truth(frame_spec.clone(), frame, x, dose, seed)
    }

    /// Samples counts for a given (already normalized) ground truth.
    pub fn from_truth(
        frame_spec: FrameSpec,
        frame: MeasurementFrame,
        x: CVec,
        dose: f64,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let truth_intensities: Vec<f64> = frame
            .forward(&x)?
            .iter()
            .map(|w| dose * w.norm_sqr())
            .collect();
        let mut rng = stream(seed, COUNT_STREAM);
        let counts = truth_intensities
            .iter()
            .map(|&mu| sample_poisson(mu, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProblemInstance {
            frame_spec,
            frame,
            x,
            dose,
            truth_intensities,
            counts,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.frame.n()
    }

    pub fn m(&self) -> usize {
        self.frame.m()
    }

    /// The ground truth in the scale of the data, `sqrt(dose) * x`, whose
    /// intensities are the Poisson means.
    pub fn scaled_truth(&self) -> CVec {
        self.x.scaled(Complex64::new(self.dose.sqrt(), 0.0))
    }

    pub fn snr(&self) -> Result<f64, ModelError> {
        snr(&self.truth_intensities, &self.counts)
    }

    pub fn histogram(&self) -> CountHistogram {
        CountHistogram::from_counts(&self.counts)
    }

    pub fn zero_fraction(&self) -> f64 {
        self.counts.iter().filter(|&&y| y == 0).count() as f64 / self.counts.len() as f64
    }

    pub fn to_file(&self, include_truth: bool) -> InstanceFile {
        InstanceFile {
            n: self.n(),
            m: self.m(),
            dose: self.dose,
            seed: self.seed,
            frame: self.frame_spec.clone(),
            counts: self.counts.clone(),
            truth: include_truth.then(|| self.x.clone()),
        }
    }
}

pub fn gen_gaussian_instance(n: usize, m: usize, dose: f64, seed: u64) -> Result<ProblemInstance, ModelError> {
    ProblemInstance::generate(&FrameSpec::Gaussian { n, m }, dose, seed)
}

/// `||mu||_2 / ||y - mu||_2`.
pub fn snr(truth_intensities: &[f64], counts: &[u64]) -> Result<f64, ModelError> {
    if truth_intensities.len() != counts.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: truth_intensities.len(),
            found: counts.len(),
        }
        .into());
    }
    let signal: f64 = truth_intensities.iter().map(|mu| mu * mu).sum();
    let noise: f64 = truth_intensities
        .iter()
        .zip(counts)
        .map(|(mu, &y)| (y as f64 - mu).powi(2))
        .sum();
    if noise == 0.0 {
        return Err(ModelError::Noiseless);
    }
    Ok((signal / noise).sqrt())
}

/// Integer-binned count frequencies: `frequencies[k]` is the number of
/// measurements with exactly `k` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountHistogram {
    pub frequencies: Vec<usize>,
}

impl CountHistogram {
    pub fn from_counts(counts: &[u64]) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0) as usize;
        let mut frequencies = vec![0; max + 1];
        for &y in counts {
            frequencies[y as usize] += 1;
        }
        CountHistogram { frequencies }
    }

    /// Left bin edges `0, 1, ..., max`.
    pub fn bin_edges(&self) -> Vec<u64> {
        (0..self.frequencies.len() as u64).collect()
    }

    pub fn total(&self) -> usize {
        self.frequencies.iter().sum()
    }
}

pub fn histogram(instance: &ProblemInstance) -> CountHistogram {
    instance.histogram()
}

/// Serialized instance. The frame is stored by its spec and rebuilt from the
/// seed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub n: usize,
    pub m: usize,
    pub dose: f64,
    pub seed: u64,
    pub frame: FrameSpec,
    pub counts: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<CVec>,
}

impl InstanceFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Inconsistent(e.to_string()))
    }

    /// Rebuilds the frame and checks the stored dimensions against it.
    pub fn frame(&self) -> Result<MeasurementFrame, ModelError> {
        let frame = self.frame.build(self.seed)?;
        if frame.n() != self.n || frame.m() != self.m || self.counts.len() != self.m {
            return Err(ModelError::Inconsistent(format!(
                "header says n = {}, m = {}; frame has n = {}, m = {}; {} counts",
                self.n,
                self.m,
                frame.n(),
                frame.m(),
                self.counts.len()
            )));
        }
        if let Some(x) = &self.truth {
            if x.len() != self.n {
                return Err(ModelError::Inconsistent(format!(
                    "truth has length {}, expected {}",
                    x.len(),
                    self.n
                )));
            }
        }
        Ok(frame)
    }

    /// Reconstructs the full instance; requires the stored truth.
    pub fn to_instance(&self) -> Result<ProblemInstance, ModelError> {
        let frame = self.frame()?;
        let x = self
            .truth
            .clone()
            .ok_or_else(|| ModelError::Inconsistent("file carries no ground truth".into()))?;
        let truth_intensities = frame.forward(&x)?.iter().map(|w| self.dose * w.norm_sqr()).collect();
        Ok(ProblemInstance {
            frame_spec: self.frame.clone(),
            frame,
            x,
            dose: self.dose,
            truth_intensities,
            counts: self.counts.clone(),
            seed: self.seed,
        })
    }
}
