//! Asymptotic variance, moment constants and Feynman-Kac oracles for
//! additive functionals `S_t = int_0^t f(X_s) ds`.
//!
//! Moments are read off the exponential of an augmented generator. For a
//! generator `G` on `n` states and order `K`, the `(K+1) n` square matrix
//!
//! ```text
//!     [ G   1F            ]
//!     [     G   2F        ]
//! A = [         .   .     ]      F = diag(f)
//!     [             G  KF ]
//!     [                G  ]
//! ```
//!
//! evolves the row vectors `v_k(t)(y) = E_mu[S_t^k 1{X_t = y, tau > t}]`
//! through `V' = V A`. Characteristic functions use the complex tilted
//! generator `G + i w diag(f)` instead.

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::chain::{AbsorbedChain, InitialLaw};
use crate::error::{Error, Result};
use crate::linalg::{expm, loglog_slope, to_complex};
use crate::qprocess::QProcessChain;
use crate::spectral::ErgodicityCertificate;

/// Largest supported moment order.
pub const MAX_ORDER: usize = 8;

/// Negative `sigma^2` values above this are rounded to zero.
const SIGMA2_CLAMP: f64 = 1e-12;

/// Observable `f` with `|f| <= 1`, and its `beta`-centered version.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveObservable {
    pub f: DVector<f64>,
    pub f_centered: DVector<f64>,
    pub beta_f: f64,
}

impl AdditiveObservable {
    pub fn new(f: DVector<f64>, beta: &DVector<f64>) -> Result<Self> {
        if f.len() != beta.len() {
            return Err(Error::Shape("observable length does not match the chain".into()));
        }
        if f.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Domain("observable must satisfy |f| <= 1".into()));
        }
        let beta_f = beta.dot(&f);
        let f_centered = f.add_scalar(-beta_f);
        Ok(Self {
            f,
            f_centered,
            beta_f,
        })
    }

    /// `max(1, ||f_centered||_inf)`; centered observables can leave the unit ball.
    pub fn scale(&self) -> f64 {
        self.f_centered.amax().max(1.0)
    }

    pub fn is_constant(&self) -> bool {
        self.f_centered.amax() == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub horizon: f64,
    pub step: f64,
    /// Bound on the neglected tail `2 int_H^inf |Cov(s)| ds`.
    pub truncation_bound: f64,
    /// Richardson estimate of the Simpson discretization error.
    pub discretization_error: f64,
}

impl QuadratureResult {
    pub fn error_bound(&self) -> f64 {
        self.truncation_bound + self.discretization_error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub sigma2: f64,
    /// Solution of `L_Q g = -f_centered` with `beta(g) = 0`.
    pub poisson_solution: DVector<f64>,
    pub quadrature: QuadratureResult,
}

/// Solves the Poisson equation on the `beta`-mean-zero subspace.
pub fn poisson_solve(qproc: &QProcessChain, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = qproc.len();
    // [L_Q 1; beta^T 0] [g; c] = [rhs; 0]
    let mut bordered = DMatrix::zeros(n + 1, n + 1);
    bordered.view_mut((0, 0), (n, n)).copy_from(&qproc.q_generator);
    for i in 0..n {
        bordered[(i, n)] = 1.0;
        bordered[(n, i)] = qproc.beta[i];
    }
    let mut b = DVector::zeros(n + 1);
    b.rows_mut(0, n).copy_from(rhs);
    let sol = bordered
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularSolve("bordered Poisson system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSolve("Poisson solution is not finite".into()));
    }
    Ok(sol.rows(0, n).into_owned())
}

/// `sigma^2 = 2 beta(f_centered g)` with `g` the Poisson solution; the
/// quadrature of the covariance integral is attached as a cross-check.
pub fn sigma2_poisson(
    qproc: &QProcessChain,
    obs: &AdditiveObservable,
    cert: &ErgodicityCertificate,
) -> Result<VarianceResult> {
    let g = poisson_solve(qproc, &(-&obs.f_centered))?;
    let raw = 2.0 * qproc.beta.dot(&obs.f_centered.component_mul(&g));
    let sigma2 = if raw < 0.0 && raw >= -SIGMA2_CLAMP { 0.0 } else { raw };
    let horizon = 20.0 / qproc.gamma;
    let step = 0.005 / qproc.gamma;
    let quadrature = sigma2_quadrature(qproc, obs, cert.c, horizon, step)?;
    Ok(VarianceResult {
        sigma2,
        poisson_solution: g,
        quadrature,
    })
}

/// `sigma^2` from the Poisson equation alone.
pub fn sigma2_value(qproc: &QProcessChain, obs: &AdditiveObservable) -> Result<f64> {
    let g = poisson_solve(qproc, &(-&obs.f_centered))?;
    let raw = 2.0 * qproc.beta.dot(&obs.f_centered.component_mul(&g));
    Ok(if raw < 0.0 && raw >= -SIGMA2_CLAMP { 0.0 } else { raw })
}

fn simpson(values: &[f64], h: f64) -> f64 {
    let m = values.len() - 1;
    debug_assert!(m % 2 == 0);
    let mut acc = values[0] + values[m];
    for (i, v) in values.iter().enumerate().take(m).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// `2 int_0^H Cov_beta(f(X_0), f(X_s)) ds` by composite Simpson.
///
/// `c_const` is the certified ergodicity constant; it controls the tail via
/// `|Q_u g(x)| <= C psi(x) e^{-gamma u} ||g||_{L(psi)}` for `beta(g) = 0`
/// applied to `g = Q_H f_centered`.
pub fn sigma2_quadrature(
    qproc: &QProcessChain,
    obs: &AdditiveObservable,
    c_const: f64,
    horizon: f64,
    step: f64,
) -> Result<QuadratureResult> {
    if !(horizon > 0.0 && step > 0.0) {
        return Err(Error::Domain("horizon and step must be positive".into()));
    }
    let mut intervals = (horizon / step).ceil() as usize;
    if intervals % 4 != 0 {
        intervals += 4 - intervals % 4;
    }
    let h = horizon / intervals as f64;
    let one_step = qproc.semigroup(h)?;
    let weighted = qproc.beta.component_mul(&obs.f_centered);
    let mut v = obs.f_centered.clone();
    let mut cov = Vec::with_capacity(intervals + 1);
    for _ in 0..=intervals {
        cov.push(weighted.dot(&v));
        v = &one_step * v;
    }
    // v now holds Q_{H + h} f; recompute Q_H f for the tail.
    let tail_start = qproc.semigroup(horizon)? * &obs.f_centered;
    let fine = simpson(&cov, h);
    let coarse: Vec<f64> = cov.iter().step_by(2).copied().collect();
    let coarse = simpson(&coarse, 2.0 * h);
    let tail_norm = tail_start
        .iter()
        .zip(qproc.psi.iter())
        .map(|(g, p)| g.abs() / p)
        .fold(0.0, f64::max);
    let beta_abs_psi: f64 = qproc
        .beta
        .iter()
        .zip(obs.f_centered.iter())
        .zip(qproc.psi.iter())
        .map(|((b, f), p)| b * f.abs() * p)
        .sum();
    Ok(QuadratureResult {
        value: 2.0 * fine,
        horizon,
        step: h,
        truncation_bound: 2.0 * beta_abs_psi * c_const * tail_norm / qproc.gamma,
        discretization_error: 2.0 * (fine - coarse).abs() / 15.0,
    })
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Constants of the moment bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsTable {
    pub c_const: f64,
    pub gamma: f64,
    /// `min psi`.
    pub c: f64,
    pub beta_psi: f64,
    /// `d[k-1] = D_k`.
    pub d: Vec<f64>,
    /// `ck[k-1] = C_k`.
    pub ck: Vec<f64>,
}

impl ConstantsTable {
    pub fn d_k(&self, k: usize) -> f64 {
        self.d[k - 1]
    }

    pub fn c_k(&self, k: usize) -> f64 {
        self.ck[k - 1]
    }

    pub fn c1(&self) -> f64 {
        self.ck[0]
    }

    /// `(2k)! D_k C_1 k / (k-1)! mu(psi) / t`.
    pub fn even_moment_bound(&self, k: usize, mu_psi: f64, t: f64) -> f64 {
        factorial(2 * k) * self.d_k(k) * self.c1() * k as f64 / factorial(k - 1) * mu_psi / t
    }

    /// `D_k [(2k+1)! / (2^k k!) + (2k+1)/(k-1)!]`, the odd-moment coefficient
    /// up to an unspecified constant; 1 for `k = 0`.
    pub fn odd_moment_coefficient(&self, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        self.d_k(k)
            * (factorial(2 * k + 1) / (2f64.powi(k as i32) * factorial(k))
                + (2 * k + 1) as f64 / factorial(k - 1))
    }
}

/// `D_k = max(r^{k-1}, 1) max(C^2/c, C beta(psi)/(c^2 gamma))`,
/// `r = (C/gamma)(1 + beta(psi)/c)`; `C_1 = 1/gamma + 1/gamma^2`,
/// `C_k = C_1/(k-1)! + C_1/(k-2)!`.
pub fn constants_from(c_const: f64, gamma: f64, c: f64, beta_psi: f64, order: usize) -> ConstantsTable {
    let r = c_const / gamma * (1.0 + beta_psi / c);
    let d1 = (c_const * c_const / c).max(c_const * beta_psi / (c * c * gamma));
    let d = (1..=order).map(|k| r.powi(k as i32 - 1).max(1.0) * d1).collect();
    let c1 = 1.0 / gamma + 1.0 / (gamma * gamma);
    let ck = (1..=order)
        .map(|k| if k == 1 { c1 } else { c1 / factorial(k - 1) + c1 / factorial(k - 2) })
        .collect();
    ConstantsTable {
        c_const,
        gamma,
        c,
        beta_psi,
        d,
        ck,
    }
}

pub fn constants_table(
    cert: &ErgodicityCertificate,
    qproc: &QProcessChain,
    order: usize,
) -> Result<ConstantsTable> {
    if order == 0 {
        return Err(Error::Domain("order must be at least 1".into()));
    }
    Ok(constants_from(cert.c, cert.gamma, qproc.c, qproc.beta_psi(), order))
}

/// Exact rational checks of the constant identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantIdentities {
    /// Closed form of `D_k` equals `D_k = max(D_{k-1} r, D_1)`.
    pub d_recursion: bool,
    /// Closed form of `C_k` satisfies `C_k = C_{k-1}/(k-1) + C_1/(k-1)!`.
    pub ck_recursion: bool,
    /// `C_k = C_1 k / (k-1)!`.
    pub ck_identity: bool,
    /// The `f64` table agrees with the rational values to 1e-12 relative.
    pub table_matches: bool,
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite constant")
}

fn rational_factorial(k: usize) -> BigRational {
    BigRational::from_integer((1..=k).fold(BigInt::one(), |acc, i| acc * BigInt::from(i)))
}

fn rmax(a: BigRational, b: BigRational) -> BigRational {
    if a >= b {
        a
    } else {
        b
    }
}

pub fn verify_constant_identities(table: &ConstantsTable) -> ConstantIdentities {
    let order = table.d.len();
    let c_const = rational(table.c_const);
    let gamma = rational(table.gamma);
    let c = rational(table.c);
    let beta_psi = rational(table.beta_psi);
    let one = BigRational::one();
    let r = &c_const / &gamma * (&one + &beta_psi / &c);
    let d1 = rmax(
        &c_const * &c_const / &c,
        &c_const * &beta_psi / (&c * &c * &gamma),
    );
    let closed_d: Vec<BigRational> = (1..=order)
        .map(|k| rmax(num_traits::pow(r.clone(), k - 1), one.clone()) * &d1)
        .collect();
    let mut d_recursion = true;
    let mut prev = d1.clone();
    for (k, closed) in closed_d.iter().enumerate().skip(1) {
        let next = rmax(&prev * &r, d1.clone());
        d_recursion &= next == *closed;
        prev = next;
        let _ = k;
    }
    d_recursion &= closed_d.first().is_none_or(|d| *d == d1);

    let c1 = &one / &gamma + &one / (&gamma * &gamma);
    let closed_c = |k: usize| -> BigRational {
        if k == 1 {
            c1.clone()
        } else {
            &c1 / rational_factorial(k - 1) + &c1 / rational_factorial(k - 2)
        }
    };
    let mut ck_recursion = true;
    let mut ck_identity = true;
    for k in 2..=order {
        let rec = closed_c(k - 1) / BigRational::from_integer(BigInt::from(k - 1))
            + &c1 / rational_factorial(k - 1);
        ck_recursion &= rec == closed_c(k);
        let ident = &c1 * BigRational::from_integer(BigInt::from(k)) / rational_factorial(k - 1);
        ck_identity &= ident == closed_c(k);
    }

    let close = |x: f64, q: &BigRational| {
        let qf = num_traits::ToPrimitive::to_f64(q).unwrap_or(f64::NAN);
        (x - qf).abs() <= 1e-12 * qf.abs().max(f64::MIN_POSITIVE)
    };
    let table_matches = closed_d.iter().zip(&table.d).all(|(q, &x)| close(x, q))
        && (1..=order).all(|k| close(table.ck[k - 1], &closed_c(k)))
        && !closed_d.iter().any(|q| q.is_zero());
    ConstantIdentities {
        d_recursion,
        ck_recursion,
        ck_identity,
        table_matches,
    }
}

/// Dynamics driving the oracles: the absorbed chain or its Q-process.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    Absorbed(&'a AbsorbedChain),
    QProcess(&'a QProcessChain),
}

impl Dynamics<'_> {
    fn generator(&self) -> &DMatrix<f64> {
        match self {
            Dynamics::Absorbed(c) => c.generator(),
            Dynamics::QProcess(q) => &q.q_generator,
        }
    }

    /// Diagonal shift keeping exponentials in range; it cancels in conditional ratios.
    fn shift(&self) -> f64 {
        match self {
            Dynamics::Absorbed(c) => c.killing().min(),
            Dynamics::QProcess(_) => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.generator().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact moments of `S_t` on the survival event.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentOracle {
    pub t: f64,
    /// `m_k(t) = E_mu[S_t^k g(X_t) 1{tau > t}]` for `k = 0..=k_max`.
    pub moments: Vec<f64>,
    /// `m_k / m_0` with `g = 1` in the denominator.
    pub conditional: Vec<f64>,
    /// `P_mu(tau > t)`.
    pub survival: f64,
}

fn check_inputs(dynamics: &Dynamics, mu: &DVector<f64>, f: &DVector<f64>, t: f64) -> Result<()> {
    let n = dynamics.len();
    if mu.len() != n || f.len() != n {
        return Err(Error::Shape("initial law or observable does not match the chain".into()));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Rows `v_0 .. v_K` of `mu^T exp(t A)` for the augmented generator.
fn augmented_rows(
    dynamics: &Dynamics,
    mu: &DVector<f64>,
    f: &DVector<f64>,
    k_max: usize,
    t: f64,
) -> Result<Vec<DVector<f64>>> {
    let n = dynamics.len();
    let shift = dynamics.shift();
    let size = (k_max + 1) * n;
    let mut a = DMatrix::zeros(size, size);
    let g = dynamics.generator();
    for k in 0..=k_max {
        let mut block = a.view_mut((k * n, k * n), (n, n));
        block.copy_from(g);
        for i in 0..n {
            block[(i, i)] += shift;
        }
        if k < k_max {
            for i in 0..n {
                a[(k * n + i, (k + 1) * n + i)] = (k + 1) as f64 * f[i];
            }
        }
    }
    let e = expm(&(a * t)).map_err(|err| match err {
        Error::OverflowGuard { norm, .. } => Error::OverflowGuard { norm, order: k_max },
        other => other,
    })?;
    let top = e.rows(0, n);
    let row = top.tr_mul(mu);
    Ok((0..=k_max).map(|k| row.rows(k * n, n).into_owned()).collect())
}

/// `m_k(t) = E_mu[S_t^k 1{tau > t}]` for `k <= k_max`, and the conditional versions.
pub fn exact_conditional_moments(
    dynamics: Dynamics,
    mu: &DVector<f64>,
    f: &DVector<f64>,
    k_max: usize,
    t: f64,
) -> Result<MomentOracle> {
    moments_with_terminal(dynamics, mu, f, k_max, t, None)
}

/// As [`exact_conditional_moments`] with a terminal weight `g(X_t)`.
pub fn moments_with_terminal(
    dynamics: Dynamics,
    mu: &DVector<f64>,
    f: &DVector<f64>,
    k_max: usize,
    t: f64,
    terminal: Option<&DVector<f64>>,
) -> Result<MomentOracle> {
    if k_max > MAX_ORDER {
        return Err(Error::Domain(format!("k_max = {k_max} exceeds {MAX_ORDER}")));
    }
    check_inputs(&dynamics, mu, f, t)?;
    let rows = augmented_rows(&dynamics, mu, f, k_max, t)?;
    let ones = DVector::from_element(dynamics.len(), 1.0);
    let weight = terminal.unwrap_or(&ones);
    let shifted: Vec<f64> = rows.iter().map(|v| v.dot(weight)).collect();
    let shifted_survival = rows[0].sum();
    let unshift = (-dynamics.shift() * t).exp();
    Ok(MomentOracle {
        t,
        moments: shifted.iter().map(|m| m * unshift).collect(),
        conditional: shifted.iter().map(|m| m / shifted_survival).collect(),
        survival: shifted_survival * unshift,
    })
}

/// `mu^T exp(t (G + i z diag f))` divided by the survival probability, for complex `z`.
pub fn tilted_law(
    dynamics: Dynamics,
    mu: &DVector<f64>,
    f: &DVector<f64>,
    z: Complex64,
    t: f64,
) -> Result<DVector<Complex64>> {
    check_inputs(&dynamics, mu, f, t)?;
    let n = dynamics.len();
    let shift = dynamics.shift();
    let mut a = to_complex(dynamics.generator());
    for i in 0..n {
        a[(i, i)] += Complex64::new(shift, 0.0) + Complex64::i() * z * f[i];
    }
    let e = expm(&(a * Complex64::new(t, 0.0)))?;
    let mu_c = mu.map(|v| Complex64::new(v, 0.0));
    let row = e.tr_mul(&mu_c);
    let survival = match dynamics {
        Dynamics::QProcess(_) => 1.0,
        Dynamics::Absorbed(c) => {
            let shifted = crate::linalg::expm_t(
                &(c.generator() + DMatrix::identity(n, n) * shift),
                t,
            )?;
            shifted.tr_mul(mu).sum()
        }
    };
    Ok(row / Complex64::new(survival, 0.0))
}

/// `E_mu[exp(i (omega / sqrt t) S_t) | tau > t]`, exactly.
pub fn exact_conditional_charfun(
    dynamics: Dynamics,
    mu: &DVector<f64>,
    f: &DVector<f64>,
    omega: f64,
    t: f64,
) -> Result<Complex64> {
    if !(t > 0.0) {
        return Err(Error::Domain("t must be positive".into()));
    }
    let law = tilted_law(dynamics, mu, f, Complex64::new(omega / t.sqrt(), 0.0), t)?;
    Ok(law.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub k: usize,
    pub t_grid: Vec<f64>,
    pub sigma2: f64,
    /// `m_{2k}(t) / t^k`.
    pub even_values: Vec<f64>,
    /// `(2k)! sigma^{2k} / (k! 2^k)`.
    pub limit: f64,
    pub errors: Vec<f64>,
    /// Slope of `log|error|` against `log t`.
    pub fitted_slope: Option<f64>,
    /// Bound `(2k)! D_k C_1 k/(k-1)! mu(psi)/t`, scaled by `||f_centered||^{2k}`,
    /// for the Q-process; `None` for the absorbed dynamics.
    pub bounds: Option<Vec<f64>>,
}

impl MomentReport {
    pub fn within_bounds(&self) -> bool {
        match &self.bounds {
            Some(b) => self
                .errors
                .iter()
                .zip(b)
                .zip(&self.t_grid)
                .all(|((e, b), t)| *t < 1.0 || e.abs() <= *b),
            None => true,
        }
    }
}

fn fit_decay(t_grid: &[f64], values: &[f64]) -> Option<f64> {
    let (ts, vs): (Vec<f64>, Vec<f64>) = t_grid
        .iter()
        .zip(values)
        .filter(|(_, v)| v.abs() > 1e-13)
        .map(|(t, v)| (*t, *v))
        .unzip();
    (ts.len() >= 2 && ts.len() == t_grid.len()).then(|| loglog_slope(&ts, &vs))
}

/// Even moments against the Gaussian limit.
pub fn check_even_moment_limit(
    dynamics: Dynamics,
    sigma2: f64,
    mu: &InitialLaw,
    obs: &AdditiveObservable,
    k: usize,
    t_grid: &[f64],
    constants: Option<(&ConstantsTable, f64)>,
) -> Result<MomentReport> {
    if k == 0 || 2 * k > MAX_ORDER {
        return Err(Error::Domain(format!("k must be in 1..={}", MAX_ORDER / 2)));
    }
    let limit = factorial(2 * k) / (factorial(k) * 2f64.powi(k as i32)) * sigma2.powi(k as i32);
    let mut even_values = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let m = exact_conditional_moments(dynamics, mu.values(), &obs.f_centered, 2 * k, t)?;
        even_values.push(m.conditional[2 * k] / t.powi(k as i32));
    }
    let errors: Vec<f64> = even_values.iter().map(|v| v - limit).collect();
    let bounds = match (dynamics, constants) {
        (Dynamics::QProcess(_), Some((table, mu_psi))) => {
            let scale = obs.scale().powi(2 * k as i32);
            Some(t_grid.iter().map(|&t| scale * table.even_moment_bound(k, mu_psi, t)).collect())
        }
        _ => None,
    };
    Ok(MomentReport {
        k,
        t_grid: t_grid.to_vec(),
        sigma2,
        fitted_slope: fit_decay(t_grid, &errors),
        even_values,
        limit,
        errors,
        bounds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OddMomentReport {
    pub k: usize,
    pub t_grid: Vec<f64>,
    /// `m_{2k+1}(t) / t^{k + 1/2}`.
    pub values: Vec<f64>,
    pub fitted_slope: Option<f64>,
    pub coefficient: f64,
    /// Smallest `C` with `|value| <= C coefficient mu(psi) / sqrt t` on the grid.
    pub fitted_prefactor: f64,
}

pub fn check_odd_moment_decay(
    qproc: &QProcessChain,
    mu: &InitialLaw,
    obs: &AdditiveObservable,
    k: usize,
    t_grid: &[f64],
    constants: &ConstantsTable,
) -> Result<OddMomentReport> {
    if 2 * k + 1 > MAX_ORDER {
        return Err(Error::Domain(format!("k must be at most {}", (MAX_ORDER - 1) / 2)));
    }
    if k > constants.d.len() {
        return Err(Error::Domain("constants table is too short".into()));
    }
    let order = 2 * k + 1;
    let mut values = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let m = exact_conditional_moments(
            Dynamics::QProcess(qproc),
            mu.values(),
            &obs.f_centered,
            order,
            t,
        )?;
        values.push(m.conditional[order] / t.powf(k as f64 + 0.5));
    }
    let coefficient = constants.odd_moment_coefficient(k) * obs.scale().powi(order as i32);
    let mu_psi = mu.integrate(&qproc.psi);
    let fitted_prefactor = values
        .iter()
        .zip(t_grid)
        .map(|(v, t)| v.abs() * t.sqrt() / (coefficient * mu_psi))
        .fold(0.0, f64::max);
    Ok(OddMomentReport {
        k,
        t_grid: t_grid.to_vec(),
        fitted_slope: fit_decay(t_grid, &values),
        values,
        coefficient,
        fitted_prefactor,
    })
}

/// `sup { |sum_y g(y) z(y)| : |g| <= psi }` over real `g`.
///
/// The supremum is attained at `g = s psi` for a sign pattern `s` that is
/// constant between consecutive zeros of `theta -> Re(e^{-i theta} z(y))`;
/// one candidate per arc is enough.
pub fn weighted_ball_sup(z: &DVector<Complex64>, psi: &DVector<f64>) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut cuts: Vec<f64> = z
        .iter()
        .filter(|v| v.norm() > 0.0)
        .flat_map(|v| {
            let a = v.arg() + std::f64::consts::FRAC_PI_2;
            [a.rem_euclid(tau), (a + std::f64::consts::PI).rem_euclid(tau)]
        })
        .collect();
    if cuts.is_empty() {
        return 0.0;
    }
    cuts.sort_by(f64::total_cmp);
    let mut best: f64 = 0.0;
    for i in 0..cuts.len() {
        let next = if i + 1 < cuts.len() { cuts[i + 1] } else { cuts[0] + tau };
        let theta = 0.5 * (cuts[i] + next);
        let rot = Complex64::from_polar(1.0, -theta);
        let total: Complex64 = z
            .iter()
            .zip(psi.iter())
            .map(|(v, p)| if (rot * v).re >= 0.0 { v * p } else { -v * p })
            .sum();
        best = best.max(total.norm());
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharfunRow {
    pub t: f64,
    /// `sup_g |E[e^{i w S/sqrt t} g(X_t)] - beta(g) E[e^{i w S/sqrt t}]|`.
    pub coupling_gap: f64,
    /// Largest value over the supplied test functions (never above `coupling_gap`).
    pub sampled_gap: f64,
    /// `C mu(psi) e^{-gamma t} + (C|w|/sqrt t)(beta(psi) + C mu(psi))/gamma`.
    pub bound: f64,
    /// `sup_g |E[e^{i w S/sqrt t} g(X_t)] - beta(g) e^{-sigma^2 w^2/2}|`.
    pub limit_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharfunReport {
    pub omega: f64,
    pub sigma2: f64,
    pub rows: Vec<CharfunRow>,
}

impl CharfunReport {
    pub fn bound_holds(&self) -> bool {
        self.rows.iter().all(|r| r.coupling_gap <= r.bound)
    }

    /// `limit_gap` is nonincreasing along the grid up to a relative slack.
    pub fn monotone(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].limit_gap <= (1.0 + slack) * w[0].limit_gap + 1e-14)
    }
}

/// Uniform characteristic-function coupling for the Q-process.
#[allow(clippy::too_many_arguments)]
pub fn check_uniform_charfun_bound(
    qproc: &QProcessChain,
    cert: &ErgodicityCertificate,
    sigma2: f64,
    mu: &InitialLaw,
    obs: &AdditiveObservable,
    omega: f64,
    t_grid: &[f64],
    test_functions: &[DVector<f64>],
) -> Result<CharfunReport> {
    let n = qproc.len();
    let mu_psi = mu.integrate(&qproc.psi);
    let omega_eff = omega.abs() * obs.scale();
    let gauss = (-sigma2 * omega * omega / 2.0).exp();
    let beta_c = qproc.beta.map(|b| Complex64::new(b, 0.0));
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(t > 0.0) {
            return Err(Error::Domain("t must be positive".into()));
        }
        let law = tilted_law(
            Dynamics::QProcess(qproc),
            mu.values(),
            &obs.f_centered,
            Complex64::new(omega / t.sqrt(), 0.0),
            t,
        )?;
        let total: Complex64 = law.iter().sum();
        let coupled = &law - &beta_c * total;
        let limit = &law - &beta_c * Complex64::new(gauss, 0.0);
        let sampled_gap = test_functions
            .iter()
            .filter(|g| g.len() == n)
            .map(|g| {
                let norm = g.iter().zip(qproc.psi.iter()).map(|(a, p)| a.abs() / p).fold(0.0, f64::max);
                let g = if norm > 1.0 { g / norm } else { g.clone() };
                coupled.iter().zip(g.iter()).map(|(z, w)| z * *w).sum::<Complex64>().norm()
            })
            .fold(0.0, f64::max);
        let c = cert.c;
        rows.push(CharfunRow {
            t,
            coupling_gap: weighted_ball_sup(&coupled, &qproc.psi),
            sampled_gap,
            bound: c * mu_psi * (-qproc.gamma * t).exp()
                + c * omega_eff / t.sqrt() * (qproc.beta_psi() + c * mu_psi) / qproc.gamma,
            limit_gap: weighted_ball_sup(&limit, &qproc.psi),
        });
    }
    Ok(CharfunReport {
        omega,
        sigma2,
        rows,
    })
}

/// Test functions in the unit ball of `L(psi)`: `+-psi` and seeded random profiles.
pub fn test_function_ball(psi: &DVector<f64>, random: usize, seed: u64) -> Vec<DVector<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![psi.clone(), -psi];
    for _ in 0..random {
        out.push(psi.map(|p| p * rng.random_range(-1.0..=1.0)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{fixtures, WeightFunction};
    use crate::qprocess::h_transform;
    use crate::spectral::{certify_ergodicity, default_grid, solve_spectral};
    use approx::assert_relative_eq;

    struct Setup {
        chain: AbsorbedChain,
        q: QProcessChain,
        cert: ErgodicityCertificate,
    }

    fn setup(chain: AbsorbedChain) -> Setup {
        let t = solve_spectral(&chain).unwrap();
        let psi1 = WeightFunction::ones(chain.len());
        let cert = certify_ergodicity(&chain, &t, &psi1, &default_grid(t.gamma)).unwrap();
        let q = h_transform(&chain, &t, &psi1).unwrap();
        Setup { chain, q, cert }
    }

    fn obs(s: &Setup, f: &[f64]) -> AdditiveObservable {
        AdditiveObservable::new(DVector::from_column_slice(f), &s.q.beta).unwrap()
    }

    #[test]
    fn observable_must_be_bounded() {
        let s = setup(fixtures::m2sym());
        assert!(AdditiveObservable::new(DVector::from_vec(vec![1.5, 0.0]), &s.q.beta).is_err());
        let o = obs(&s, &[1.0, 0.0]);
        assert_relative_eq!(o.beta_f, 0.5, epsilon = 1e-12);
        assert!(s.q.beta.dot(&o.f_centered).abs() < 1e-12);
    }

    #[test]
    fn m2sym_variance_is_one() {
        let s = setup(fixtures::m2sym());
        let v = sigma2_poisson(&s.q, &obs(&s, &[1.0, -1.0]), &s.cert).unwrap();
        assert_relative_eq!(v.sigma2, 1.0, epsilon = 1e-12);
        assert!((&v.poisson_solution - DVector::from_vec(vec![0.5, -0.5])).amax() < 1e-12);
        assert!((v.sigma2 - v.quadrature.value).abs() <= v.quadrature.error_bound());
    }

    #[test]
    fn m2sym_quadrature_closed_form() {
        // Cov(s) = e^{-2s}: 2 int_0^H = 1 - e^{-2H}
        let s = setup(fixtures::m2sym());
        let q = sigma2_quadrature(&s.q, &obs(&s, &[1.0, -1.0]), s.cert.c, 5.0, 0.001).unwrap();
        assert_relative_eq!(q.value, 1.0 - (-10.0f64).exp(), epsilon = 1e-12);
        assert!((1.0 - q.value) <= q.truncation_bound);
    }

    #[test]
    fn constant_observable_has_zero_variance() {
        let s = setup(fixtures::bd5());
        let o = obs(&s, &[0.3; 5]);
        assert!(o.is_constant());
        let v = sigma2_poisson(&s.q, &o, &s.cert).unwrap();
        assert_eq!(v.sigma2, 0.0);
        assert_eq!(v.quadrature.value, 0.0);
    }

    #[test]
    fn bd5_poisson_matches_quadrature() {
        let s = setup(fixtures::bd5());
        let v = sigma2_poisson(&s.q, &obs(&s, &[1.0, 0.0, 0.0, 0.0, 0.0]), &s.cert).unwrap();
        assert!((v.sigma2 - v.quadrature.value).abs() < 1e-8);
        assert!(v.quadrature.error_bound() < 1e-8);
    }

    #[test]
    fn constants_with_unit_inputs() {
        let table = constants_from(1.0, 1.0, 1.0, 1.0, 8);
        for k in 1..=8 {
            assert_eq!(table.d_k(k), 2f64.powi(k as i32 - 1));
        }
        assert_eq!(table.c_k(1), 2.0);
        assert_eq!(table.c_k(2), 4.0);
        assert_eq!(table.c_k(3), 3.0);
        let ids = verify_constant_identities(&table);
        assert!(ids.d_recursion && ids.ck_recursion && ids.ck_identity && ids.table_matches);
    }

    #[test]
    fn constant_identities_for_certified_inputs() {
        let s = setup(fixtures::bd5());
        let table = constants_table(&s.cert, &s.q, 8).unwrap();
        assert_eq!(verify_constant_identities(&table), ConstantIdentities {
            d_recursion: true,
            ck_recursion: true,
            ck_identity: true,
            table_matches: true,
        });
        // contraction ratio below one keeps D_k = D_1
        let small = constants_from(0.1, 3.0, 1.0, 1.0, 5);
        assert!(small.d.iter().all(|&d| d == small.d[0]));
        assert!(verify_constant_identities(&small).d_recursion);
    }

    #[test]
    fn zeroth_moment_is_survival() {
        let chain = fixtures::random_chain(4, 5);
        let mu = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let f = DVector::from_vec(vec![0.5, -0.2, 0.1, 1.0]);
        let m = exact_conditional_moments(Dynamics::Absorbed(&chain), &mu, &f, 3, 1.7).unwrap();
        let p = crate::linalg::expm_t(chain.generator(), 1.7).unwrap().tr_mul(&mu).sum();
        assert_relative_eq!(m.survival, p, max_relative = 1e-12);
        assert_relative_eq!(m.moments[0], p, max_relative = 1e-12);
        assert_relative_eq!(m.conditional[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn unit_observable_gives_powers_of_t() {
        let chain = fixtures::bd5();
        let mu = InitialLaw::uniform(5);
        let f = DVector::from_element(5, 1.0);
        let t = 2.5;
        let m = exact_conditional_moments(Dynamics::Absorbed(&chain), mu.values(), &f, 6, t).unwrap();
        for k in 0..=6 {
            assert_relative_eq!(m.moments[k], t.powi(k as i32) * m.survival, max_relative = 1e-11);
        }
    }

    #[test]
    fn m2sym_second_moment_closed_form() {
        let s = setup(fixtures::m2sym());
        let f = DVector::from_vec(vec![1.0, -1.0]);
        let t = 10.0;
        let m = exact_conditional_moments(Dynamics::QProcess(&s.q), &s.q.beta, &f, 2, t).unwrap();
        assert_relative_eq!(m.moments[2], t - (1.0 - (-2.0 * t).exp()) / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn moments_match_brute_force_quadrature() {
        // m_2 = 2 int_0^t int_0^s E[f(X_u) f(X_s)] du ds under Q_beta with a
        // midpoint rule on exact transition matrices.
        let s = setup(fixtures::m2asym());
        let o = obs(&s, &[1.0, -1.0]);
        let t = 2.0;
        let m = exact_conditional_moments(Dynamics::QProcess(&s.q), &s.q.beta, &o.f_centered, 2, t)
            .unwrap();
        let steps = 400;
        let h = t / steps as f64;
        let mut acc = 0.0;
        let wf = s.q.beta.component_mul(&o.f_centered);
        for i in 0..steps {
            for j in 0..i {
                let lag = (i - j) as f64 * h;
                let cov = wf.dot(&(s.q.semigroup(lag).unwrap() * &o.f_centered));
                acc += cov * h * h;
            }
            acc += 0.5 * wf.dot(&o.f_centered) * h * h;
        }
        assert_relative_eq!(m.moments[2], 2.0 * acc, max_relative = 1e-3);
    }

    #[test]
    fn even_moment_m2sym() {
        let s = setup(fixtures::m2sym());
        let o = obs(&s, &[1.0, -1.0]);
        let mu = InitialLaw::new(s.q.beta.clone()).unwrap();
        let r = check_even_moment_limit(Dynamics::QProcess(&s.q), 1.0, &mu, &o, 1, &[10.0, 20.0, 40.0], None)
            .unwrap();
        assert_relative_eq!(r.errors[0].abs(), (1.0 - (-20.0f64).exp()) / 20.0, max_relative = 1e-9);
        assert_relative_eq!(r.fitted_slope.unwrap(), -1.0, epsilon = 1e-6);
    }

    #[test]
    fn even_moment_constant_observable() {
        let s = setup(fixtures::bd5());
        let o = obs(&s, &[0.2; 5]);
        let mu = InitialLaw::uniform(5);
        let r = check_even_moment_limit(Dynamics::QProcess(&s.q), 0.0, &mu, &o, 2, &[5.0, 10.0], None)
            .unwrap();
        assert!(r.even_values.iter().all(|v| *v == 0.0));
        assert_eq!(r.limit, 0.0);
        assert!(r.fitted_slope.is_none());
    }

    #[test]
    fn odd_moments_vanish_by_symmetry() {
        let s = setup(fixtures::m2sym());
        let o = obs(&s, &[1.0, -1.0]);
        let mu = InitialLaw::new(s.q.beta.clone()).unwrap();
        let table = constants_table(&s.cert, &s.q, 4).unwrap();
        for k in 0..=2 {
            let r = check_odd_moment_decay(&s.q, &mu, &o, k, &[5.0, 50.0], &table).unwrap();
            assert!(r.values.iter().all(|v| v.abs() < 1e-12), "{:?}", r.values);
        }
    }

    #[test]
    fn first_moment_ergodic_average() {
        let s = setup(fixtures::m2asym());
        let o = obs(&s, &[1.0, -1.0]);
        let mu = InitialLaw::dirac(2, 0);
        let table = constants_table(&s.cert, &s.q, 2).unwrap();
        let grid = [20.0, 40.0, 80.0, 160.0];
        let r = check_odd_moment_decay(&s.q, &mu, &o, 0, &grid, &table).unwrap();
        // E[S_t] -> int_0^inf Q_s f(x) ds = -g(x) for the Poisson solution g
        let g = poisson_solve(&s.q, &(-&o.f_centered)).unwrap();
        for (v, t) in r.values.iter().zip(&grid) {
            assert_relative_eq!(v * t.sqrt(), g[0], max_relative = 1e-8);
        }
        assert_relative_eq!(r.fitted_slope.unwrap(), -0.5, epsilon = 1e-6);
    }

    #[test]
    fn charfun_trivial_cases() {
        let chain = fixtures::bd5();
        let mu = DVector::from_element(5, 0.2);
        let f = DVector::from_vec(vec![0.3, -0.2, 0.9, 0.0, -1.0]);
        let z = exact_conditional_charfun(Dynamics::Absorbed(&chain), &mu, &f, 0.0, 3.0).unwrap();
        assert_relative_eq!(z.re, 1.0, epsilon = 1e-12);
        assert!(z.im.abs() < 1e-12);
        let c = 0.4;
        let (omega, t) = (1.3, 4.0);
        let f = DVector::from_element(5, c);
        let z = exact_conditional_charfun(Dynamics::Absorbed(&chain), &mu, &f, omega, t).unwrap();
        let expected = Complex64::from_polar(1.0, omega * t.sqrt() * c);
        assert!((z - expected).norm() < 1e-11);
    }

    #[test]
    fn m2sym_charfun_near_gaussian() {
        let s = setup(fixtures::m2sym());
        let f = DVector::from_vec(vec![1.0, -1.0]);
        let z = exact_conditional_charfun(Dynamics::Absorbed(&s.chain), &s.q.beta, &f, 1.0, 50.0).unwrap();
        assert!((z.norm() - (-0.5f64).exp()).abs() < 0.05);
    }

    #[test]
    fn charfun_taylor_coefficients_are_moments() {
        // Cauchy integral on |z| = r of z -> mu^T exp(t(G + i z F)) 1 recovers
        // i^k m_k / k!.
        let chain = fixtures::random_chain(5, 8);
        let mu = DVector::from_element(5, 0.2);
        let f = DVector::from_vec(vec![0.5, -1.0, 0.25, 0.0, 0.75]);
        let t = 1.5;
        let m = exact_conditional_moments(Dynamics::Absorbed(&chain), &mu, &f, 4, t).unwrap();
        let points = 32;
        let r = 1.0;
        for k in 0..=4 {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..points {
                let z = Complex64::from_polar(r, std::f64::consts::TAU * j as f64 / points as f64);
                let law = tilted_law(Dynamics::Absorbed(&chain), &mu, &f, z, t).unwrap();
                let value: Complex64 = law.iter().sum();
                acc += value * z.powi(-(k as i32));
            }
            acc /= points as f64;
            let expected = Complex64::i().powi(k as i32) * m.conditional[k] / factorial(k);
            assert!((acc - expected).norm() < 1e-6, "k = {k}: {acc} vs {expected}");
        }
    }

    #[test]
    fn ball_sup_matches_sign_pattern_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let z = DVector::from_fn(n, |_, _| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let psi = DVector::from_fn(n, |_, _| rng.random_range(1.0..3.0));
            let mut brute: f64 = 0.0;
            for mask in 0..(1u32 << n) {
                let total: Complex64 = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { z[i] * psi[i] } else { -z[i] * psi[i] })
                    .sum();
                brute = brute.max(total.norm());
            }
            assert_relative_eq!(weighted_ball_sup(&z, &psi), brute, max_relative = 1e-12);
        }
    }

    #[test]
    fn uniform_bound_special_cases() {
        let s = setup(fixtures::bd5());
        let o = obs(&s, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let sigma2 = sigma2_value(&s.q, &o).unwrap();
        let mu = InitialLaw::dirac(5, 4);
        let balls = test_function_ball(&s.q.psi, 20, 3);
        // omega = 0 reduces to the Q-process ergodicity bound
        let r = check_uniform_charfun_bound(&s.q, &s.cert, sigma2, &mu, &o, 0.0, &[1.0, 5.0], &balls)
            .unwrap();
        for row in &r.rows {
            let q = s.q.semigroup(row.t).unwrap().row(4).transpose() - &s.q.beta;
            let exact: f64 = q.iter().zip(s.q.psi.iter()).map(|(d, p)| d.abs() * p).sum();
            assert_relative_eq!(row.coupling_gap, exact, max_relative = 1e-9);
            assert!(row.coupling_gap <= row.bound);
            assert!(row.sampled_gap <= row.coupling_gap * (1.0 + 1e-12));
        }
        // constant g contributes nothing
        let constant = vec![DVector::from_element(5, 1.0)];
        let r = check_uniform_charfun_bound(&s.q, &s.cert, sigma2, &mu, &o, 1.0, &[3.0], &constant)
            .unwrap();
        assert!(r.rows[0].sampled_gap < 1e-12);
    }
}
