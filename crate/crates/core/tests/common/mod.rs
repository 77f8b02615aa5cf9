#![allow(dead_code)]

use lowdose_core::{CVec, LossKind, LossModel, MeasurementFrame};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_frame(m: usize, n: usize, seed: u64) -> MeasurementFrame {
    let mut rng = rng(seed);
    let rows: Vec<CVec> = (0..m).map(|_| CVec::random_gaussian(n, &mut rng)).collect();
    MeasurementFrame::from_rows(&rows).unwrap()
}

pub fn random_counts(m: usize, max: u64, seed: u64) -> Vec<u64> {
    let mut rng = rng(seed);
    (0..m).map(|_| rng.random_range(0..=max)).collect()
}

pub fn dense(frame: &MeasurementFrame) -> DMatrix<Complex64> {
    DMatrix::from_fn(frame.m(), frame.n(), |i, j| frame.entry(i, j).conj())
}

pub fn to_dvec(v: &CVec) -> nalgebra::DVector<Complex64> {
    nalgebra::DVector::from_iterator(v.len(), v.iter().copied())
}

/// Every kind with a constant Hessian bound, at parameters spread over the
/// interesting range.
pub fn bounded_kinds() -> Vec<LossKind> {
    vec![
        LossKind::PoissonReg { eps: 1e-3 },
        LossKind::PoissonReg { eps: 0.25 },
        LossKind::PoissonReg { eps: 1.0 },
        LossKind::PoissonUnbiased { eps: 0.1 },
        LossKind::Amplitude { eps: 0.01 },
        LossKind::SqrtShift { c: 0.1, subtract_quarter: false },
        LossKind::SqrtShift { c: 0.5, subtract_quarter: true },
        LossKind::averaging(0.12, 0.27),
        LossKind::tukey_freeman(0.05),
        LossKind::zero_adapted(0.12, 0.27),
        LossKind::ZeroAdapted {
            c1: 0.3,
            c2: 0.8,
            target: lowdose_core::Target::Constant { value: 1.5 },
        },
    ]
}

pub fn all_kinds() -> Vec<LossKind> {
    let mut kinds = bounded_kinds();
    kinds.push(LossKind::GaussianLsq { sigma2: 0.25 });
    kinds
}

/// Central-difference gradient in the real coordinates, mapped back to the
/// Wirtinger convention (`df/dx = 2 Re g`, `df/dy = 2 Im g`), so the result
/// is directly comparable to `LossModel::gradient`.
pub fn fd_gradient(model: &LossModel<'_>, z: &CVec, h: f64) -> CVec {
    let f = |v: &CVec| model.value(v).unwrap();
    (0..z.len())
        .map(|j| {
            let mut p = z.clone();
            let mut q = z.clone();
            p[j].re += h;
            q[j].re -= h;
            let dx = (f(&p) - f(&q)) / (2.0 * h);
            let mut p = z.clone();
            let mut q = z.clone();
            p[j].im += h;
            q[j].im -= h;
            let dy = (f(&p) - f(&q)) / (2.0 * h);
            Complex64::new(dx / 2.0, dy / 2.0)
        })
        .collect()
}

/// `d^2/dt^2 f(z + t v)` at `t = 0` by central differences.
pub fn fd_curvature(model: &LossModel<'_>, z: &CVec, v: &CVec, h: f64) -> f64 {
    let shift = |s: f64| {
        let mut p = z.clone();
        p.axpy(Complex64::new(s, 0.0), v).unwrap();
        model.value(&p).unwrap()
    };
    (shift(h) - 2.0 * shift(0.0) + shift(-h)) / (h * h)
}

pub fn rel_diff(a: &CVec, b: &CVec) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(f64::MIN_POSITIVE)
}
