//! Dense matrix exponential and small linear-algebra helpers.
//!
//! `expm` is the scaling-and-squaring method with diagonal Padé approximants
//! of degree 3, 5, 7, 9 or 13 (Higham 2005). The degree and the number of
//! squarings are selected from the 1-norm of the trace-shifted matrix, so the
//! result is a deterministic function of the input bits. The routine is generic
//! over real and complex scalars; the complex instance drives the
//! characteristic-function oracles.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const PADE_9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Induced 1-norm (maximum absolute column sum).
pub fn norm1<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.clone().modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced infinity-norm (maximum absolute row sum).
pub fn norm_inf<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|z| z.clone().modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|z| z.clone().modulus()).fold(0.0, f64::max)
}

fn scaled_identity<T: ComplexField<RealField = f64>>(n: usize, c: f64) -> DMatrix<T> {
    DMatrix::from_diagonal_element(n, n, T::from_real(c))
}

fn pade_odd_even<T: ComplexField<RealField = f64>>(
    a: &DMatrix<T>,
    b: &[f64],
) -> (DMatrix<T>, DMatrix<T>) {
    // U = A * sum_{odd j} b_j A^{j-1},  V = sum_{even j} b_j A^j
    let n = a.nrows();
    let a2 = a * a;
    let mut u_poly = scaled_identity::<T>(n, b[1]);
    let mut v = scaled_identity::<T>(n, b[0]);
    let mut power = a2.clone();
    let mut j = 2;
    while j < b.len() {
        v += &power * T::from_real(b[j]);
        if j + 1 < b.len() {
            u_poly += &power * T::from_real(b[j + 1]);
        }
        power = &power * &a2;
        j += 2;
    }
    (a * u_poly, v)
}

fn pade_13<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.nrows();
    let b = &PADE_13;
    let c = |k: usize| T::from_real(b[k]);
    let ident = scaled_identity::<T>(n, 1.0);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * c(13) + &a4 * c(11) + &a2 * c(9);
    let u = a * (&a6 * inner_u + &a6 * c(7) + &a4 * c(5) + &a2 * c(3) + &ident * c(1));
    let inner_v = &a6 * c(12) + &a4 * c(10) + &a2 * c(8);
    let v = &a6 * inner_v + &a6 * c(6) + &a4 * c(4) + &a2 * c(2) + &ident * c(0);
    (u, v)
}

/// Matrix exponential `exp(a)` by scaling and squaring with Padé approximants.
pub fn expm<T: ComplexField<RealField = f64>>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Shape(format!("expm of a {}x{} matrix", n, a.ncols())));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if a.iter().any(|z| !z.clone().modulus().is_finite()) {
        return Err(Error::Domain("expm input contains non-finite entries".into()));
    }

    // exp(A) = e^mu exp(A - mu I) with mu = trace / n shrinks the norm of
    // strongly dissipative generators.
    let mu = a.trace() / T::from_real(n as f64);
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] -= mu.clone();
    }
    let norm = norm1(&shifted);

    let mut result = None;
    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            let (u, v) = pade_odd_even(&shifted, coeffs);
            result = Some((solve_pade(u, v)?, m));
            break;
        }
    }
    let (mut e, order) = match result {
        Some(r) => r,
        None => {
            let s = if norm > THETA_13 {
                (norm / THETA_13).log2().ceil().max(0.0) as i32
            } else {
                0
            };
            let scale = T::from_real(2f64.powi(-s));
            let scaled = &shifted * scale;
            let (u, v) = pade_13(&scaled);
            let mut r = solve_pade(u, v)?;
            for _ in 0..s {
                r = &r * &r;
            }
            (r, 13 + s as usize)
        }
    };
    e *= mu.exp();
    if e.iter().any(|z| !z.clone().modulus().is_finite()) {
        return Err(Error::OverflowGuard { norm, order });
    }
    Ok(e)
}

fn solve_pade<T: ComplexField<RealField = f64>>(
    u: DMatrix<T>,
    v: DMatrix<T>,
) -> Result<DMatrix<T>> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::SingularSolve("Padé denominator is singular".into()))
}

/// `exp(t * a)` for a real matrix.
pub fn expm_t(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    expm(&(a * t))
}

/// Promote a real matrix to complex.
pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|x| Complex64::new(x, 0.0))
}

/// Row vector times matrix: `v^T M` returned as a column vector.
pub fn row_times(v: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    m.tr_mul(v)
}

/// Ordinary least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log|y|` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    linear_fit(&lx, &ly).0
}

/// Slope of `log|y|` against `x` (exponential rate).
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    linear_fit(x, &ly).0
}
