//! Quasi-stationary eigen-objects of an absorbed chain.
//!
//! For an irreducible sub-generator `L` the Perron root `-lambda0` of `L` is
//! simple and real, with a positive left eigenvector `alpha` (the
//! quasi-stationary distribution) and positive right eigenvector `eta`,
//! normalized by `sum(alpha) = 1` and `alpha . eta = 1`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::chain::{AbsorbedChain, WeightFunction};
use crate::error::{Error, Result};
use crate::linalg::{expm_t, norm_inf};

/// Largest state space handled by the dense eigen-decomposition.
pub const DENSE_LIMIT: usize = 2000;

/// Relative tolerance below which the spectral gap is declared degenerate.
pub const GAP_TOLERANCE: f64 = 1e-8;

/// Slack factor applied to the measured grid maximum when certifying `C`.
pub const CERTIFICATE_SLACK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMethod {
    /// Dense eigenvalues when `n <= DENSE_LIMIT`, power iteration above.
    Auto,
    Dense,
    /// Shifted power iteration with deflation for the gap.
    Power,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTriple {
    /// Exponential decay rate of the survival probability from `alpha`.
    pub lambda0: f64,
    /// Quasi-stationary distribution.
    pub alpha: DVector<f64>,
    /// Right eigenfunction with `alpha . eta = 1`.
    pub eta: DVector<f64>,
    /// Spectral gap: second smallest real part of spec(-L) minus `lambda0`.
    /// Infinite for a single-state chain.
    pub gamma: f64,
}

impl SpectralTriple {
    /// Infinity-norm residuals of the left and right eigen-relations.
    pub fn residuals(&self, chain: &AbsorbedChain) -> (f64, f64) {
        let l = chain.generator();
        let left = l.tr_mul(&self.alpha) + &self.alpha * self.lambda0;
        let right = l * &self.eta + &self.eta * self.lambda0;
        (left.amax(), right.amax())
    }

    /// `beta = eta * alpha`, the quasi-ergodic distribution.
    pub fn beta(&self) -> DVector<f64> {
        self.eta.component_mul(&self.alpha)
    }
}

pub fn solve_spectral(chain: &AbsorbedChain) -> Result<SpectralTriple> {
    solve_spectral_with(chain, SpectralMethod::Auto)
}

pub fn solve_spectral_with(chain: &AbsorbedChain, method: SpectralMethod) -> Result<SpectralTriple> {
    let dense = match method {
        SpectralMethod::Auto => chain.len() <= DENSE_LIMIT,
        SpectralMethod::Dense => true,
        SpectralMethod::Power => false,
    };
    if dense {
        solve_dense(chain)
    } else {
        solve_power(chain)
    }
}

fn finish(
    chain: &AbsorbedChain,
    alpha: DVector<f64>,
    eta: DVector<f64>,
    gamma: f64,
) -> Result<SpectralTriple> {
    let l = chain.generator();
    let scale = norm_inf(l);
    let orient = |v: DVector<f64>| if v.sum() < 0.0 { -v } else { v };
    let alpha = orient(alpha).map(|v| v.max(0.0));
    let alpha = &alpha / alpha.sum();
    let eta = orient(eta).map(|v| v.max(0.0));
    let eta = &eta / alpha.dot(&eta);
    // Rayleigh quotient; alpha . eta = 1.
    let lambda0 = -alpha.dot(&(l * &eta));
    if lambda0 <= 1e-12 * scale {
        return Err(Error::NoKilling);
    }
    if gamma < GAP_TOLERANCE * lambda0 {
        return Err(Error::DegenerateGap {
            gap: gamma,
            tolerance: GAP_TOLERANCE * lambda0,
        });
    }
    Ok(SpectralTriple {
        lambda0,
        alpha,
        eta,
        gamma,
    })
}

fn null_vector(m: DMatrix<f64>) -> Result<DVector<f64>> {
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::SingularSolve("SVD did not return singular vectors".into()))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    Ok(v_t.row(idx).transpose())
}

fn solve_dense(chain: &AbsorbedChain) -> Result<SpectralTriple> {
    let l = chain.generator();
    let n = l.nrows();
    let mut eig: Vec<_> = l.clone().complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.re.total_cmp(&a.re));
    let lambda0 = -eig[0].re;
    let gamma = if n > 1 {
        (eig[0].re - eig[1].re).max(0.0)
    } else {
        f64::INFINITY
    };
    let shifted = l + DMatrix::identity(n, n) * lambda0;
    let eta = null_vector(shifted.clone())?;
    let alpha = null_vector(shifted.transpose())?;
    finish(chain, alpha, eta, gamma)
}

fn power_iterate(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let mut v = &start / start.norm();
    let mut rho = 0.0;
    for _ in 0..max_iter {
        let w = apply(&v);
        rho = v.dot(&w);
        let resid = (&w - &v * rho).amax();
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        if resid <= tol * rho.abs().max(1.0) {
            break;
        }
    }
    (v, rho)
}

fn solve_power(chain: &AbsorbedChain) -> Result<SpectralTriple> {
    let l = chain.generator();
    let n = l.nrows();
    let max_exit = (0..n).map(|x| chain.exit_rate(x)).fold(0.0, f64::max);
    // M = L + sI is nonnegative with Gershgorin discs in the right half plane.
    let s = 2.0 * max_exit;
    let m = l + DMatrix::identity(n, n) * s;
    let m_t = m.transpose();
    let ones = DVector::from_element(n, 1.0);
    let max_iter = 200_000;
    let (eta, rho) = power_iterate(|v| &m * v, ones.clone(), 1e-14, max_iter);
    let (alpha, _) = power_iterate(|v| &m_t * v, ones, 1e-14, max_iter);
    let gamma = if n > 1 {
        // Hotelling deflation of the Perron pair; the growth rate of
        // ||M_d^k v|| over two steps estimates the subdominant modulus.
        let proj = alpha.dot(&eta);
        let deflate = |v: &DVector<f64>| -> DVector<f64> {
            &m * v - &eta * (rho * alpha.dot(v) / proj)
        };
        let mut v = DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5);
        v -= &eta * (alpha.dot(&v) / proj);
        v /= v.norm();
        let mut sub = 0.0;
        for _ in 0..max_iter / 2 {
            let w1 = deflate(&v);
            let w2 = deflate(&w1);
            let v_norm = v.norm();
            let next = (w2.norm() / v_norm).sqrt();
            v = &w2 / w2.norm();
            let done = (next - sub).abs() <= 1e-13 * next.max(1.0);
            sub = next;
            if done {
                break;
            }
        }
        (rho - sub).max(0.0)
    } else {
        f64::INFINITY
    };
    finish(chain, alpha, eta, gamma)
}

/// `||m||_psi = sum_x |m(x)| psi(x)`, the supremum of `|m(f)|` over `|f| <= psi`.
pub fn weighted_norm(m: &DVector<f64>, psi: &DVector<f64>) -> f64 {
    m.iter().zip(psi.iter()).map(|(a, w)| a.abs() * w).sum()
}

/// Grid-based certificate of exponential convergence to quasi-stationarity.
///
/// `c` is [`CERTIFICATE_SLACK`] times the largest measured ratio
/// `e^{gamma t} ||e^{lambda0 t} delta_x P_t - eta(x) alpha||_psi1 / psi1(x)`
/// over the grid. The bound is checked on the grid only; between grid points
/// it rests on the slack factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicityCertificate {
    pub c: f64,
    pub gamma: f64,
    pub psi1: WeightFunction,
    pub t_grid: Vec<f64>,
    pub worst_ratio: f64,
    pub worst_t: f64,
    pub worst_state: usize,
    /// `ratios[i][x]` for `t_grid[i]` and state `x`.
    pub ratios: Vec<Vec<f64>>,
}

impl ErgodicityCertificate {
    /// The certified bound `C psi1(x) e^{-gamma t}`.
    pub fn bound(&self, x: usize, t: f64) -> f64 {
        self.c * self.psi1.values()[x] * (-self.gamma * t).exp()
    }
}

/// `{0} U {2^k / gamma : k = -3..=3}`.
pub fn default_grid(gamma: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend((-3..=3).map(|k| 2f64.powi(k) / gamma));
    grid
}

fn check_grid(t_grid: &[f64], gamma: f64) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Domain("time grid is empty".into()));
    }
    if t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Domain("time grid entries must be finite and >= 0".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("time grid must be strictly increasing".into()));
    }
    let last = *t_grid.last().unwrap();
    if gamma.is_finite() && last < 5.0 / gamma {
        return Err(Error::Domain(format!(
            "time grid ends at {last} < 5/gamma = {}",
            5.0 / gamma
        )));
    }
    Ok(())
}

pub fn certify_ergodicity(
    chain: &AbsorbedChain,
    triple: &SpectralTriple,
    psi1: &WeightFunction,
    t_grid: &[f64],
) -> Result<ErgodicityCertificate> {
    if triple.gamma < GAP_TOLERANCE * triple.lambda0 {
        return Err(Error::DegenerateGap {
            gap: triple.gamma,
            tolerance: GAP_TOLERANCE * triple.lambda0,
        });
    }
    check_grid(t_grid, triple.gamma)?;
    let n = chain.len();
    let psi = psi1.values();
    if psi.len() != n {
        return Err(Error::Shape("psi1 length does not match the chain".into()));
    }
    let ratios = t_grid
        .par_iter()
        .map(|&t| -> Result<Vec<f64>> {
            let p = expm_t(chain.generator(), t)?;
            let growth = (triple.lambda0 * t).exp();
            Ok((0..n)
                .map(|x| {
                    let dev = p.row(x).transpose() * growth - &triple.alpha * triple.eta[x];
                    let norm = weighted_norm(&dev, psi);
                    if norm == 0.0 {
                        0.0
                    } else {
                        (triple.gamma * t).exp() * norm / psi[x]
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut worst_ratio, mut worst_t, mut worst_state) = (0.0, t_grid[0], 0);
    for (i, row) in ratios.iter().enumerate() {
        for (x, &r) in row.iter().enumerate() {
            if r > worst_ratio {
                worst_ratio = r;
                worst_t = t_grid[i];
                worst_state = x;
            }
        }
    }
    Ok(ErgodicityCertificate {
        c: CERTIFICATE_SLACK * worst_ratio,
        gamma: triple.gamma,
        psi1: psi1.clone(),
        t_grid: t_grid.to_vec(),
        worst_ratio,
        worst_t,
        worst_state,
        ratios,
    })
}
