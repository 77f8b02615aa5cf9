//! Dense complex vectors, the measurement operator and power iteration.
//!
//! Inner products are conjugate-linear in the first argument:
//! `<a, z> = sum_j conj(a_j) * z_j`. The measurement operator `A` has rows
//! `a_i^*`, so `forward(z)_i = <a_i, z>` and `adjoint(w) = sum_i w_i a_i`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

/// Rows per work block in the row-parallel kernels.
pub const ROW_BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected length {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("measurement frame must have m >= 1 and n >= 1 (got m = {m}, n = {n})")]
    EmptyFrame { m: usize, n: usize },
    #[error("row {row} has length {found}, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("power iteration tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

fn check_len(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

/// A complex vector of fixed length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CVec(Vec<Complex64>);

impl CVec {
    pub fn zeros(n: usize) -> Self {
        CVec(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn from_vec(entries: Vec<Complex64>) -> Self {
        CVec(entries)
    }

    /// Entries drawn i.i.d. from the standard complex Gaussian
    /// `N(0, 1/2) + i N(0, 1/2)`, so that `E|z_j|^2 = 1`.
    pub fn random_gaussian<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        CVec((0..n).map(|_| complex_gaussian(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Complex64> {
        self.0.iter()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `<self, other> = sum_j conj(self_j) * other_j`.
    pub fn inner(&self, other: &CVec) -> Result<Complex64, LinalgError> {
        check_len(self.len(), other.len())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn scale(&mut self, alpha: Complex64) {
        for c in &mut self.0 {
            *c *= alpha;
        }
    }

    pub fn scaled(&self, alpha: Complex64) -> CVec {
        CVec(self.0.iter().map(|c| c * alpha).collect())
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: Complex64, x: &CVec) -> Result<(), LinalgError> {
        check_len(self.len(), x.len())?;
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn sub(&self, other: &CVec) -> Result<CVec, LinalgError> {
        check_len(self.len(), other.len())?;
        Ok(CVec(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &CVec) -> Result<CVec, LinalgError> {
        check_len(self.len(), other.len())?;
        Ok(CVec(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Returns the unit vector in the direction of `self`, or `None` for the
    /// zero vector.
    pub fn normalized(&self) -> Option<CVec> {
        let nrm = self.norm();
        (nrm > 0.0).then(|| self.scaled(Complex64::new(1.0 / nrm, 0.0)))
    }
}

impl std::ops::Index<usize> for CVec {
    type Output = Complex64;
    fn index(&self, idx: usize) -> &Complex64 {
        &self.0[idx]
    }
}

impl std::ops::IndexMut<usize> for CVec {
    fn index_mut(&mut self, idx: usize) -> &mut Complex64 {
        &mut self.0[idx]
    }
}

impl FromIterator<Complex64> for CVec {
    fn from_iter<I: IntoIterator<Item = Complex64>>(iter: I) -> Self {
        CVec(iter.into_iter().collect())
    }
}

impl From<Vec<Complex64>> for CVec {
    fn from(v: Vec<Complex64>) -> Self {
        CVec(v)
    }
}

pub(crate) fn complex_gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Output of [`MeasurementFrame::pullback`].
#[derive(Clone, Debug)]
pub struct Pullback {
    /// Sum of the per-row scalar terms.
    pub total: f64,
    /// `sum_i c_i a_i` for the per-row coefficients `c_i`.
    pub combination: CVec,
}

/// Dense `m x n` measurement operator with rows `a_i^*`.
///
/// Stored row-major with real and imaginary parts split, which lets the
/// row kernels vectorize.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFrame {
    m: usize,
    n: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl MeasurementFrame {
    pub fn from_rows(rows: &[CVec]) -> Result<Self, LinalgError> {
        let m = rows.len();
        let n = rows.first().map_or(0, CVec::len);
        if m == 0 || n == 0 {
            return Err(LinalgError::EmptyFrame { m, n });
        }
        let mut re = Vec::with_capacity(m * n);
        let mut im = Vec::with_capacity(m * n);
        for (row, a) in rows.iter().enumerate() {
            if a.len() != n {
                return Err(LinalgError::RaggedRow {
                    row,
                    expected: n,
                    found: a.len(),
                });
            }
            re.extend(a.iter().map(|c| c.re));
            im.extend(a.iter().map(|c| c.im));
        }
        Ok(MeasurementFrame { m, n, re, im })
    }

    /// Builds a frame from `m * n` row-major entries.
    pub fn from_row_major(m: usize, n: usize, entries: &[Complex64]) -> Result<Self, LinalgError> {
        if m == 0 || n == 0 {
            return Err(LinalgError::EmptyFrame { m, n });
        }
        check_len(m * n, entries.len())?;
        Ok(MeasurementFrame {
            m,
            n,
            re: entries.iter().map(|c| c.re).collect(),
            im: entries.iter().map(|c| c.im).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        let k = i * self.n + j;
        Complex64::new(self.re[k], self.im[k])
    }

    pub fn row(&self, i: usize) -> CVec {
        (0..self.n).map(|j| self.entry(i, j)).collect()
    }

    /// Squared 2-norm of every row.
    pub fn row_norms_sqr(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                let (r, im) = self.row_parts(i);
                r.iter().zip(im).map(|(a, b)| a * a + b * b).sum()
            })
            .collect()
    }

    /// Sum of all squared row norms (the squared Frobenius norm).
    pub fn frobenius_sqr(&self) -> f64 {
        self.row_norms_sqr().iter().sum()
    }

    /// A new frame whose row `i` is `weights[i] * a_i^*`.
    pub fn with_row_weights(&self, weights: &[f64]) -> Result<Self, LinalgError> {
        check_len(self.m, weights.len())?;
        let mut out = self.clone();
        for (i, &w) in weights.iter().enumerate() {
            let span = i * self.n..(i + 1) * self.n;
            out.re[span.clone()].iter_mut().for_each(|v| *v *= w);
            out.im[span].iter_mut().for_each(|v| *v *= w);
        }
        Ok(out)
    }

    #[inline(always)]
    fn row_parts(&self, i: usize) -> (&[f64], &[f64]) {
        let span = i * self.n..(i + 1) * self.n;
        (&self.re[span.clone()], &self.im[span])
    }

    fn blocks(&self) -> usize {
        self.m.div_ceil(ROW_BLOCK)
    }

    fn block_rows(&self, b: usize) -> std::ops::Range<usize> {
        b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(self.m)
    }

    pub fn forward(&self, z: &CVec) -> Result<CVec, LinalgError> {
        self.forward_with(z, Execution::default())
    }

    /// `A z`, i.e. the vector of `<a_i, z>`.
    pub fn forward_with(&self, z: &CVec, exec: Execution) -> Result<CVec, LinalgError> {
        check_len(self.n, z.len())?;
        let (zr, zi) = split(z);
        let wide = wide_simd();
        let parts = exec.map_indexed(self.blocks(), |b| {
            self.block_rows(b)
                .map(|i| {
                    let (ar, ai) = self.row_parts(i);
                    if wide {
                        dot::<true>(ar, ai, &zr, &zi)
                    } else {
                        dot::<false>(ar, ai, &zr, &zi)
                    }
                })
                .collect::<Vec<_>>()
        });
        Ok(CVec(parts.into_iter().flatten().collect()))
    }

    pub fn adjoint(&self, w: &CVec) -> Result<CVec, LinalgError> {
        self.adjoint_with(w, Execution::default())
    }

    /// `A^* w = sum_i w_i a_i`.
    pub fn adjoint_with(&self, w: &CVec, exec: Execution) -> Result<CVec, LinalgError> {
        check_len(self.m, w.len())?;
        let parts = exec.map_indexed(self.blocks(), |b| {
            let mut gr = vec![0.0; self.n];
            let mut gi = vec![0.0; self.n];
            for i in self.block_rows(b) {
                let (ar, ai) = self.row_parts(i);
                accumulate(&mut gr, &mut gi, w[i], ar, ai);
            }
            (gr, gi)
        });
        Ok(merge(self.n, parts.into_iter().map(|(gr, gi)| (0.0, gr, gi))).1)
    }

    pub fn pullback<F>(&self, z: &CVec, term: F) -> Result<Pullback, LinalgError>
    where
        F: Fn(usize, Complex64) -> (f64, Complex64) + Sync + Send,
    {
        self.pullback_with(z, Execution::default(), term)
    }

    /// Fused forward/adjoint pass: for each row computes `w_i = <a_i, z>`,
    /// evaluates `(s_i, c_i) = term(i, w_i)` and returns `sum_i s_i` together
    /// with `sum_i c_i a_i`. Each row is read once.
    pub fn pullback_with<F>(&self, z: &CVec, exec: Execution, term: F) -> Result<Pullback, LinalgError>
    where
        F: Fn(usize, Complex64) -> (f64, Complex64) + Sync + Send,
    {
        check_len(self.n, z.len())?;
        let (zr, zi) = split(z);
        let wide = wide_simd();
        let parts = exec.map_indexed(self.blocks(), |b| {
            #[cfg(target_arch = "x86_64")]
            if wide {
                // SAFETY: AVX2 and FMA support were detected at runtime.
                return unsafe { self.pullback_block_avx2(b, &zr, &zi, &term) };
            }
            let _ = wide;
            self.pullback_block::<false, F>(b, &zr, &zi, &term)
        });
        let (total, combination) = merge(self.n, parts.into_iter());
        Ok(Pullback { total, combination })
    }

    #[inline(always)]
    fn pullback_block<const WIDE: bool, F>(&self, b: usize, zr: &[f64], zi: &[f64], term: &F) -> (f64, Vec<f64>, Vec<f64>)
    where
        F: Fn(usize, Complex64) -> (f64, Complex64),
    {
        let mut gr = vec![0.0; self.n];
        let mut gi = vec![0.0; self.n];
        let mut total = 0.0;
        for i in self.block_rows(b) {
            let (ar, ai) = self.row_parts(i);
            let w = dot::<WIDE>(ar, ai, zr, zi);
            let (s, c) = term(i, w);
            total += s;
            accumulate(&mut gr, &mut gi, c, ar, ai);
        }
        (total, gr, gi)
    }

    // Same code compiled with wider vectors. `mul_add` is exactly rounded
    // with or without hardware FMA, so both paths agree bit for bit.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn pullback_block_avx2<F>(&self, b: usize, zr: &[f64], zi: &[f64], term: &F) -> (f64, Vec<f64>, Vec<f64>)
    where
        F: Fn(usize, Complex64) -> (f64, Complex64),
    {
        self.pullback_block::<true, F>(b, zr, zi, term)
    }

    /// `A^* diag(weights) A v`.
    pub fn weighted_gram_apply(&self, weights: &[f64], v: &CVec) -> Result<CVec, LinalgError> {
        check_len(self.m, weights.len())?;
        Ok(self
            .pullback(v, |i, w| (0.0, w * weights[i]))?
            .combination)
    }

    /// Dense `A^* diag(weights) A = sum_i w_i a_i a_i^*`.
    ///
    /// Costs `m n^2` once; afterwards each product is `n^2` instead of
    /// `2 m n`, which pays off for the long power iterations behind the
    /// step sizes.
    pub fn weighted_gram(&self, weights: &[f64]) -> Result<GramMatrix, LinalgError> {
        check_len(self.m, weights.len())?;
        let n = self.n;
        let bands = n.div_ceil(GRAM_BAND);
        let wide = wide_simd();
        let parts = Execution::default().map_indexed(bands, |b| {
            #[cfg(target_arch = "x86_64")]
            if wide {
                // SAFETY: AVX2 and FMA support were detected at runtime.
                return unsafe { self.gram_band_avx2(b, weights) };
            }
            let _ = wide;
            self.gram_band(b, weights)
        });
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for (gr, gi) in parts {
            re.extend(gr);
            im.extend(gi);
        }
        Ok(GramMatrix { n, re, im })
    }

    /// Rows `GRAM_BAND * b ..` of the weighted Gram matrix.
    #[inline(always)]
    fn gram_band(&self, b: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let cols = b * GRAM_BAND..((b + 1) * GRAM_BAND).min(n);
        let mut gr = vec![0.0; cols.len() * n];
        let mut gi = vec![0.0; cols.len() * n];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (ar, ai) = self.row_parts(i);
            for (r, j) in cols.clone().enumerate() {
                // row j gains w a_ij conj(a_i)
                let (cr, ci) = (w * ar[j], w * ai[j]);
                let (dr, di) = (&mut gr[r * n..(r + 1) * n], &mut gi[r * n..(r + 1) * n]);
                for k in 0..n {
                    dr[k] = cr.mul_add(ar[k], ci.mul_add(ai[k], dr[k]));
                    di[k] = ci.mul_add(ar[k], (-cr).mul_add(ai[k], di[k]));
                }
            }
        }
        (gr, gi)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn gram_band_avx2(&self, b: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.gram_band(b, weights)
    }

    /// Largest singular value of `A` by power iteration on `A^* A`.
    ///
    /// The reported `residual` refers to the Gram operator `A^* A` and its
    /// eigenvalue `value^2`.
    pub fn spectral_norm(&self, cfg: &PowerIteration) -> Result<SpectralEstimate, LinalgError> {
        let ones = vec![1.0; self.m];
        let mut est = leading_eig(
            |v| self.weighted_gram_apply(&ones, v).expect("length checked"),
            self.n,
            cfg,
        )?;
        est.value = est.value.max(0.0).sqrt();
        Ok(est)
    }
}

const GRAM_BAND: usize = 16;

fn wide_simd() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Dense Hermitian `n x n` matrix, row-major with split parts.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, j: usize, k: usize) -> Complex64 {
        Complex64::new(self.re[j * self.n + k], self.im[j * self.n + k])
    }

    pub fn apply(&self, v: &CVec) -> Result<CVec, LinalgError> {
        check_len(self.n, v.len())?;
        let (vr, vi) = split(v);
        Ok((0..self.n)
            .map(|j| {
                let (gr, gi) = (&self.re[j * self.n..(j + 1) * self.n], &self.im[j * self.n..(j + 1) * self.n]);
                let mut acc = Complex64::new(0.0, 0.0);
                for (((g_re, g_im), v_re), v_im) in gr.iter().zip(gi).zip(&vr).zip(&vi) {
                    acc.re += g_re * v_re - g_im * v_im;
                    acc.im += g_re * v_im + g_im * v_re;
                }
                acc
            })
            .collect())
    }

    pub fn leading_eig(&self, cfg: &PowerIteration) -> Result<SpectralEstimate, LinalgError> {
        leading_eig(|v| self.apply(v).expect("length checked"), self.n, cfg)
    }
}

fn split(z: &CVec) -> (Vec<f64>, Vec<f64>) {
    (z.iter().map(|c| c.re).collect(), z.iter().map(|c| c.im).collect())
}

fn merge<I>(n: usize, parts: I) -> (f64, CVec)
where
    I: Iterator<Item = (f64, Vec<f64>, Vec<f64>)>,
{
    let mut total = 0.0;
    let mut gr = vec![0.0; n];
    let mut gi = vec![0.0; n];
    for (t, pr, pi) in parts {
        total += t;
        gr.iter_mut().zip(&pr).for_each(|(g, p)| *g += p);
        gi.iter_mut().zip(&pi).for_each(|(g, p)| *g += p);
    }
    let comb = gr
        .into_iter()
        .zip(gi)
        .map(|(r, i)| Complex64::new(r, i))
        .collect::<Vec<_>>();
    (total, CVec(comb))
}

/// Independent accumulator lanes in [`conj_dot`]; enough to cover the FMA
/// latency on current x86 cores.
const LANES: usize = 16;

/// `sum_j conj(a_j) z_j` with `LANES` independent accumulators, reduced
/// pairwise. [`conj_dot_avx2`] performs exactly the same operations.
#[inline(always)]
fn conj_dot(ar: &[f64], ai: &[f64], zr: &[f64], zi: &[f64]) -> Complex64 {
    let n = ar.len();
    let (ai, zr, zi) = (&ai[..n], &zr[..n], &zi[..n]);
    let head = n - n % LANES;
    let mut sr = [0.0f64; LANES];
    let mut si = [0.0f64; LANES];
    for k in (0..head).step_by(LANES) {
        for l in 0..LANES {
            let j = k + l;
            sr[l] = ar[j].mul_add(zr[j], ai[j].mul_add(zi[j], sr[l]));
            si[l] = ar[j].mul_add(zi[j], (-ai[j]).mul_add(zr[j], si[l]));
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            sr[l] += sr[l + width];
            si[l] += si[l + width];
        }
    }
    dot_tail(ar, ai, zr, zi, head, sr[0], si[0])
}

#[inline(always)]
fn dot_tail(ar: &[f64], ai: &[f64], zr: &[f64], zi: &[f64], head: usize, mut re: f64, mut im: f64) -> Complex64 {
    for j in head..ar.len() {
        re = ar[j].mul_add(zr[j], ai[j].mul_add(zi[j], re));
        im = ar[j].mul_add(zi[j], (-ai[j]).mul_add(zr[j], im));
    }
    Complex64::new(re, im)
}

/// `conj_dot`, on the wide kernel when `WIDE` (only set once AVX2 and FMA
/// were detected).
#[inline(always)]
fn dot<const WIDE: bool>(ar: &[f64], ai: &[f64], zr: &[f64], zi: &[f64]) -> Complex64 {
    #[cfg(target_arch = "x86_64")]
    if WIDE {
        // SAFETY: callers pass WIDE = true only after runtime detection.
        return unsafe { conj_dot_avx2(ar, ai, zr, zi) };
    }
    conj_dot(ar, ai, zr, zi)
}

// The compiler spills a 16-lane accumulator array to the stack, so the wide
// path spells the registers out.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
fn conj_dot_avx2(ar: &[f64], ai: &[f64], zr: &[f64], zi: &[f64]) -> Complex64 {
    use std::arch::x86_64::*;
    let n = ar.len();
    let (ai, zr, zi) = (&ai[..n], &zr[..n], &zi[..n]);
    let head = n - n % LANES;
    let zero = _mm256_setzero_pd();
    let mut sr = [zero; 4];
    let mut si = [zero; 4];
    let mut k = 0;
    while k < head {
        for q in 0..4 {
            let j = k + 4 * q;
            // SAFETY: j + 4 <= head <= n for all four slices.
            let (a_r, a_i, z_r, z_i) = unsafe {
                (
                    _mm256_loadu_pd(ar.as_ptr().add(j)),
                    _mm256_loadu_pd(ai.as_ptr().add(j)),
                    _mm256_loadu_pd(zr.as_ptr().add(j)),
                    _mm256_loadu_pd(zi.as_ptr().add(j)),
                )
            };
            sr[q] = _mm256_fmadd_pd(a_r, z_r, _mm256_fmadd_pd(a_i, z_i, sr[q]));
            si[q] = _mm256_fmadd_pd(a_r, z_i, _mm256_fnmadd_pd(a_i, z_r, si[q]));
        }
        k += LANES;
    }
    // width 16 -> 8 -> 4 -> 2 -> 1, as in the portable reduction
    let fold = |v: [__m256d; 4]| -> f64 {
        let h = _mm256_add_pd(_mm256_add_pd(v[0], v[2]), _mm256_add_pd(v[1], v[3]));
        let p = _mm_add_pd(_mm256_castpd256_pd128(h), _mm256_extractf128_pd::<1>(h));
        _mm_cvtsd_f64(_mm_add_sd(p, _mm_unpackhi_pd(p, p)))
    };
    let (re, im) = (fold(sr), fold(si));
    dot_tail(ar, ai, zr, zi, head, re, im)
}

/// `g += c * a`.
#[inline(always)]
fn accumulate(gr: &mut [f64], gi: &mut [f64], c: Complex64, ar: &[f64], ai: &[f64]) {
    let n = gr.len();
    let (gi, ar, ai) = (&mut gi[..n], &ar[..n], &ai[..n]);
    for k in 0..n {
        gr[k] = c.re.mul_add(ar[k], (-c.im).mul_add(ai[k], gr[k]));
        gi[k] = c.re.mul_add(ai[k], c.im.mul_add(ar[k], gi[k]));
    }
}

/// Settings for power iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    /// Stop once `||B v - rho v|| <= tol * rho`.
    pub tol: f64,
    pub max_iter: usize,
    /// Seed of the complex Gaussian start vector.
    pub seed: u64,
}

impl PowerIteration {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        PowerIteration {
            tol,
            max_iter,
            ..Default::default()
        }
    }
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tol: 1e-6,
            max_iter: 5000,
            seed: 0x5EED_0F_F0E5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    /// Unit-norm witness vector.
    pub vector: CVec,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Dominant eigenpair of a Hermitian positive semidefinite operator.
///
/// `value` is the Rayleigh quotient of the final iterate. When `max_iter` is
/// exhausted the best estimate is returned with `converged = false`.
pub fn leading_eig<F>(apply: F, n: usize, cfg: &PowerIteration) -> Result<SpectralEstimate, LinalgError>
where
    F: Fn(&CVec) -> CVec,
{
    if !(cfg.tol > 0.0) {
        return Err(LinalgError::BadTolerance(cfg.tol));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = CVec::random_gaussian(n, &mut rng)
        .normalized()
        .unwrap_or_else(|| unit(n, 0));
    let mut est = SpectralEstimate {
        value: 0.0,
        vector: v.clone(),
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for k in 1..=cfg.max_iter.max(1) {
        let w = apply(&v);
        check_len(n, w.len())?;
        let rho = v.inner(&w)?.re;
        let mut r = w.clone();
        r.axpy(Complex64::new(-rho, 0.0), &v)?;
        let residual = r.norm();
        est = SpectralEstimate {
            value: rho,
            vector: v.clone(),
            iterations: k,
            residual,
            converged: residual <= cfg.tol * rho.abs(),
        };
        match w.normalized() {
            // The operator annihilates v: v is an eigenvector for 0.
            None => {
                est.converged = true;
                return Ok(est);
            }
            Some(next) if !est.converged => v = next,
            Some(_) => return Ok(est),
        }
    }
    Ok(est)
}

fn unit(n: usize, k: usize) -> CVec {
    let mut e = CVec::zeros(n);
    e[k] = Complex64::new(1.0, 0.0);
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn wide_dot_matches_portable_bitwise() {
        if !wide_simd() {
            return;
        }
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [1, 7, 16, 31, 64, 100, 256] {
            let mut v = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-3.0..3.0)).collect() };
            let (ar, ai, zr, zi) = (v(), v(), v(), v());
            let slow = conj_dot(&ar, &ai, &zr, &zi);
            // SAFETY: support checked above.
            let fast = unsafe { conj_dot_avx2(&ar, &ai, &zr, &zi) };
            assert_eq!(slow.re.to_bits(), fast.re.to_bits(), "n={n}");
            assert_eq!(slow.im.to_bits(), fast.im.to_bits(), "n={n}");
            let exact: Complex64 = (0..n).map(|j| c(ar[j], -ai[j]) * c(zr[j], zi[j])).sum();
            assert!((exact - slow).norm() < 1e-12 * n as f64);
        }
    }

    fn random_frame(m: usize, n: usize, seed: u64) -> MeasurementFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<CVec> = (0..m).map(|_| CVec::random_gaussian(n, &mut rng)).collect();
        MeasurementFrame::from_rows(&rows).unwrap()
    }

    #[test]
    fn forward_single_row() {
        let frame = MeasurementFrame::from_rows(&[CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0)])]).unwrap();
        let z = CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(frame.forward(&z).unwrap().as_slice(), &[c(1.0, 0.0)]);
        // conj(i) * i = 1
        let z = CVec::from_vec(vec![c(0.0, 0.0), c(0.0, 1.0)]);
        assert_eq!(frame.forward(&z).unwrap().as_slice(), &[c(1.0, 0.0)]);
    }

    #[test]
    fn forward_of_zero_is_zero() {
        let frame = random_frame(7, 3, 1);
        assert_eq!(frame.forward(&CVec::zeros(3)).unwrap(), CVec::zeros(7));
    }

    #[test]
    fn forward_matches_per_row_inner_products() {
        let frame = random_frame(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = CVec::random_gaussian(3, &mut rng);
        let w = frame.forward(&z).unwrap();
        for i in 0..4 {
            let mut acc = c(0.0, 0.0);
            for j in 0..3 {
                acc += frame.entry(i, j).conj() * z[j];
            }
            assert!((w[i].norm_sqr() - acc.norm_sqr()).abs() < 1e-13);
            assert!((w[i] - acc).norm() < 1e-13);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let frame = random_frame(4, 3, 2);
        let err = frame.forward(&CVec::zeros(5)).unwrap_err();
        assert_eq!(err, LinalgError::DimensionMismatch { expected: 3, found: 5 });
        assert!(frame.adjoint(&CVec::zeros(3)).is_err());
        assert!(CVec::zeros(2).inner(&CVec::zeros(3)).is_err());
    }

    #[test]
    fn ragged_and_empty_frames_rejected() {
        assert!(matches!(
            MeasurementFrame::from_rows(&[]),
            Err(LinalgError::EmptyFrame { .. })
        ));
        let rows = vec![CVec::zeros(2), CVec::zeros(3)];
        assert!(matches!(
            MeasurementFrame::from_rows(&rows),
            Err(LinalgError::RaggedRow { row: 1, .. })
        ));
    }

    #[test]
    fn adjoint_consistency() {
        // <A^* w, z> = <w, A z>
        for seed in 0..5 {
            let frame = random_frame(131, 9, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let z = CVec::random_gaussian(9, &mut rng);
            let w = CVec::random_gaussian(131, &mut rng);
            let lhs = frame.adjoint(&w).unwrap().inner(&z).unwrap();
            let rhs = w.inner(&frame.forward(&z).unwrap()).unwrap();
            assert!((lhs - rhs).norm() <= 1e-12 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn sequential_and_parallel_are_bit_identical() {
        let frame = random_frame(300, 17, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = CVec::random_gaussian(17, &mut rng);
        let term = |i: usize, w: Complex64| (w.norm_sqr() * i as f64, w * 0.5);
        let a = frame.pullback_with(&z, Execution::Sequential, term).unwrap();
        let b = frame.pullback_with(&z, Execution::Parallel, term).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.combination, b.combination);
    }

    #[test]
    fn spectral_norm_identity_and_rank_one() {
        let n = 6;
        let rows: Vec<CVec> = (0..n).map(|k| unit(n, k)).collect();
        let frame = MeasurementFrame::from_rows(&rows).unwrap();
        let est = frame.spectral_norm(&PowerIteration::default()).unwrap();
        assert!((est.value - 1.0).abs() < 1e-12);
        assert!(est.converged);

        let a = CVec::from_vec(vec![c(1.0, 2.0), c(-0.5, 0.0), c(0.0, 3.0)]);
        let frame = MeasurementFrame::from_rows(&[a.clone()]).unwrap();
        let est = frame.spectral_norm(&PowerIteration::default()).unwrap();
        assert!((est.value - a.norm()).abs() < 1e-12);
    }

    #[test]
    fn leading_eig_diagonal() {
        let diag = [3.0, 1.0, 0.0];
        let apply = |v: &CVec| -> CVec {
            v.iter().zip(diag).map(|(x, d)| x * d).collect()
        };
        let est = leading_eig(apply, 3, &PowerIteration::new(1e-10, 10_000)).unwrap();
        assert!(est.converged);
        assert!((est.value - 3.0).abs() < 1e-10);
        assert!((est.vector[0].norm() - 1.0).abs() < 1e-9);
        assert!((est.vector.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leading_eig_rank_one() {
        let x = CVec::from_vec(vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, -1.0), c(0.5, 0.5)]);
        let apply = |v: &CVec| -> CVec { x.scaled(x.inner(v).unwrap()) };
        let est = leading_eig(apply, 4, &PowerIteration::default()).unwrap();
        assert!((est.value - x.norm_sqr()).abs() < 1e-10);
        let overlap = x.inner(&est.vector).unwrap().norm() / x.norm();
        assert!((overlap - 1.0).abs() < 1e-10);
    }

    #[test]
    fn unconverged_is_flagged() {
        let frame = random_frame(40, 8, 4);
        let est = frame.spectral_norm(&PowerIteration::new(1e-14, 2)).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 2);
        assert!(est.value > 0.0);
    }

    #[test]
    fn bad_tolerance_rejected() {
        let frame = random_frame(4, 2, 4);
        assert!(frame.spectral_norm(&PowerIteration::new(0.0, 10)).is_err());
    }

    #[test]
    fn witness_inequality() {
        let frame = random_frame(50, 6, 5);
        let est = frame.spectral_norm(&PowerIteration::new(1e-10, 20_000)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let z = CVec::random_gaussian(6, &mut rng);
            let ratio = frame.forward(&z).unwrap().norm() / z.norm();
            assert!(ratio <= est.value * (1.0 + 1e-9));
        }
    }

    #[test]
    fn rayleigh_quotient_is_monotone() {
        let frame = random_frame(60, 10, 7);
        let ones = vec![1.0; 60];
        let apply = |v: &CVec| frame.weighted_gram_apply(&ones, v).unwrap();
        let mut prev = 0.0;
        for k in 1..40 {
            let est = leading_eig(apply, 10, &PowerIteration::new(1e-300, k)).unwrap();
            assert!(est.value >= prev * (1.0 - 1e-14), "iteration {k}");
            prev = est.value;
        }
    }

    #[test]
    fn row_weights_scale_rows() {
        let frame = random_frame(3, 2, 8);
        let scaled = frame.with_row_weights(&[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(scaled.entry(1, 1), frame.entry(1, 1) * 2.0);
        assert_eq!(scaled.entry(2, 0), c(0.0, 0.0));
        assert_eq!(scaled.entry(0, 1), frame.entry(0, 1));
    }

    #[test]
    fn dense_gram_matches_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rows: Vec<CVec> = (0..37).map(|_| CVec::random_gaussian(19, &mut rng)).collect();
        let frame = MeasurementFrame::from_rows(&rows).unwrap();
        let weights: Vec<f64> = (0..37).map(|i| (i % 5) as f64 * 0.3).collect();
        let g = frame.weighted_gram(&weights).unwrap();
        let v = CVec::random_gaussian(19, &mut rng);
        let dense = g.apply(&v).unwrap();
        let op = frame.weighted_gram_apply(&weights, &v).unwrap();
        assert!(dense.sub(&op).unwrap().norm() <= 1e-12 * op.norm());
        for j in 0..19 {
            assert!(g.entry(j, j).im.abs() < 1e-12);
            for k in 0..19 {
                assert!((g.entry(j, k) - g.entry(k, j).conj()).norm() < 1e-12);
            }
        }
        let ones = vec![1.0; 37];
        let a = frame.spectral_norm(&PowerIteration::new(1e-10, 20_000)).unwrap();
        let b = frame.weighted_gram(&ones).unwrap().leading_eig(&PowerIteration::new(1e-10, 20_000)).unwrap();
        assert!((a.value * a.value - b.value).abs() <= 1e-9 * b.value);
    }
}
