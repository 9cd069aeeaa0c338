//! The Q-process: the chain conditioned never to be absorbed.
//!
//! It is the Doob h-transform of the killed dynamics by the right
//! eigenfunction `eta`:
//! `L_Q(x, y) = eta(y) L(x, y) / eta(x)` off the diagonal, with the diagonal
//! chosen so that rows sum to zero. Its invariant law is `beta = eta * alpha`.

use nalgebra::{DMatrix, DVector};

use crate::chain::{AbsorbedChain, InitialLaw, WeightFunction};
use crate::error::{Error, Result};
use crate::linalg::{expm_t, log_slope};
use crate::spectral::{weighted_norm, ErgodicityCertificate, SpectralTriple};

/// Entries of `eta` below this fraction of `max(eta)` are treated as zero.
const ETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct QProcessChain {
    /// States with `eta > 0`; all of `E` for an irreducible chain.
    pub support: Vec<usize>,
    pub q_generator: DMatrix<f64>,
    pub beta: DVector<f64>,
    /// `psi = psi1 / eta`.
    pub psi: DVector<f64>,
    /// `min psi`.
    pub c: f64,
    pub eta: DVector<f64>,
    pub psi1: WeightFunction,
    pub lambda0: f64,
    pub gamma: f64,
}

impl QProcessChain {
    pub fn len(&self) -> usize {
        self.q_generator.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Q_t = exp(t L_Q)`.
    pub fn semigroup(&self, t: f64) -> Result<DMatrix<f64>> {
        expm_t(&self.q_generator, t)
    }

    /// `beta(psi)`.
    pub fn beta_psi(&self) -> f64 {
        self.beta.dot(&self.psi)
    }

    /// Detailed balance `beta(x) L_Q(x, y) = beta(y) L_Q(y, x)`.
    pub fn is_reversible(&self) -> bool {
        let n = self.len();
        let scale = self.q_generator.amax();
        (0..n).all(|x| {
            (0..x).all(|y| {
                let a = self.beta[x] * self.q_generator[(x, y)];
                let b = self.beta[y] * self.q_generator[(y, x)];
                (a - b).abs() <= 1e-12 * scale
            })
        })
    }

    /// `eta o mu = mu * eta / mu(eta)`, the Q-process start matching conditioning from `mu`.
    pub fn reweight(&self, mu: &InitialLaw) -> Result<DVector<f64>> {
        let mass = mu.integrate(&self.eta);
        if mass <= 0.0 {
            return Err(Error::Domain("mu(eta) must be positive".into()));
        }
        Ok(mu.values().component_mul(&self.eta) / mass)
    }
}

pub fn h_transform(
    chain: &AbsorbedChain,
    triple: &SpectralTriple,
    psi1: &WeightFunction,
) -> Result<QProcessChain> {
    let n = chain.len();
    let eta = &triple.eta;
    if eta.len() != n || psi1.values().len() != n {
        return Err(Error::Shape("triple or psi1 does not match the chain".into()));
    }
    let floor = ETA_FLOOR * eta.amax();
    if let Some((state, &value)) = eta.iter().enumerate().find(|(_, v)| **v <= floor) {
        return Err(Error::ZeroEta { state, value });
    }
    let l = chain.generator();
    let mut q = DMatrix::zeros(n, n);
    for x in 0..n {
        let mut off = 0.0;
        for y in 0..n {
            if x != y {
                let rate = eta[y] * l[(x, y)] / eta[x];
                q[(x, y)] = rate;
                off += rate;
            }
        }
        q[(x, x)] = -off;
    }
    let psi = psi1.values().component_div(eta);
    let c = psi.min();
    Ok(QProcessChain {
        support: (0..n).collect(),
        q_generator: q,
        beta: triple.beta(),
        psi,
        c,
        eta: eta.clone(),
        psi1: psi1.clone(),
        lambda0: triple.lambda0,
        gamma: triple.gamma,
    })
}

/// Law of `X_t` under the Q-process started from `initial`.
pub fn q_marginal(qproc: &QProcessChain, initial: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::Domain("t must be >= 0".into()));
    }
    Ok(qproc.semigroup(t)?.tr_mul(initial))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QDecayRow {
    pub t: f64,
    /// `max_x ||delta_x Q_t - beta||_psi / psi(x)`.
    pub worst_deviation: f64,
    /// `worst_deviation * e^{gamma t}`.
    pub implied_c: f64,
    /// `max_x ||delta_x Q_t - beta||_TV` with `||m||_TV = sum |m|`.
    pub worst_tv: f64,
    /// `max_x ||delta_x Q_t - beta||_TV e^{gamma t} / (||eta||_{L(psi1)} psi(x))`.
    pub tv_implied_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QErgodicityReport {
    pub rows: Vec<QDecayRow>,
    /// Minus the slope of `log worst_deviation` against `t`, over `t > 0`.
    pub fitted_rate: Option<f64>,
}

pub fn check_q_ergodicity(qproc: &QProcessChain, t_grid: &[f64]) -> Result<QErgodicityReport> {
    let n = qproc.len();
    let eta_weight = qproc
        .eta
        .iter()
        .zip(qproc.psi1.values().iter())
        .map(|(e, p)| e / p)
        .fold(0.0, f64::max);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let q = qproc.semigroup(t)?;
        let (mut worst, mut worst_tv, mut tv_c) = (0.0f64, 0.0f64, 0.0f64);
        for x in 0..n {
            let dev = q.row(x).transpose() - &qproc.beta;
            worst = worst.max(weighted_norm(&dev, &qproc.psi) / qproc.psi[x]);
            let tv = dev.abs().sum();
            worst_tv = worst_tv.max(tv);
            tv_c = tv_c.max(tv * (qproc.gamma * t).exp() / (eta_weight * qproc.psi[x]));
        }
        rows.push(QDecayRow {
            t,
            worst_deviation: worst,
            implied_c: worst * (qproc.gamma * t).exp(),
            worst_tv,
            tv_implied_c: tv_c,
        });
    }
    let (ts, devs): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.t > 0.0 && r.worst_deviation > 1e-12)
        .map(|r| (r.t, r.worst_deviation))
        .unzip();
    let fitted_rate = (ts.len() >= 2).then(|| -log_slope(&ts, &devs));
    Ok(QErgodicityReport { rows, fitted_rate })
}

/// `exp(t (L + s I))` with `s = min kappa`; conditional laws are invariant under the shift.
fn shifted_semigroup(chain: &AbsorbedChain, t: f64) -> Result<DMatrix<f64>> {
    let n = chain.len();
    let s = chain.killing().min();
    expm_t(&(chain.generator() + DMatrix::identity(n, n) * s), t)
}

/// Law of `X_t` under `P_mu( . | tau > horizon)`, computed exactly.
pub fn conditional_marginal(
    chain: &AbsorbedChain,
    mu: &InitialLaw,
    t: f64,
    horizon: f64,
) -> Result<DVector<f64>> {
    if t < 0.0 || horizon < t {
        return Err(Error::Domain(format!("need 0 <= t <= T, got t = {t}, T = {horizon}")));
    }
    let n = chain.len();
    let forward = shifted_semigroup(chain, t)?.tr_mul(mu.values());
    let survival = shifted_semigroup(chain, horizon - t)? * DVector::from_element(n, 1.0);
    let joint = forward.component_mul(&survival);
    let total = joint.sum();
    if !(total > 0.0) {
        return Err(Error::Domain("survival probability underflowed".into()));
    }
    Ok(joint / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapPoint {
    pub horizon_offset: f64,
    pub tv_gap: f64,
}

/// Gap between `P_mu(X_t in . | tau > T)` and `Q_{eta o mu}(X_t in .)`.
///
/// `tv_gap` is `(1/2) sum |.|`, the supremum over events; `tv_gap_sum` is
/// `sum |.|`, the convention in which total variation is bounded by 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGapReport {
    pub t: f64,
    pub horizon: f64,
    pub tv_gap: f64,
    pub tv_gap_sum: f64,
    /// Fitted prefactor `C'`: the largest `gap e^{gamma (T - t)} mu(eta) / mu(psi1)`
    /// over the sweep and the requested horizon.
    pub c_prime: f64,
    /// `C' mu(psi1) / mu(eta) e^{-gamma (T - t)}`.
    pub bound: f64,
    /// Minus the slope of `log tv_gap` against `T - t` over the sweep.
    pub fitted_rate: Option<f64>,
    pub sweep: Vec<GapPoint>,
    /// `(1/gamma) log(2 C mu(psi1) / mu(eta))`.
    pub threshold: f64,
    pub threshold_ok: bool,
}

fn tv_gap(
    chain: &AbsorbedChain,
    qproc: &QProcessChain,
    mu: &InitialLaw,
    start: &DVector<f64>,
    t: f64,
    horizon: f64,
) -> Result<(f64, f64)> {
    let cond = conditional_marginal(chain, mu, t, horizon)?;
    let q = q_marginal(qproc, start, t)?;
    let sum = (cond - q).abs().sum();
    Ok((0.5 * sum, sum))
}

/// Default sweep of `T - t` used for the rate fit.
pub const DEFAULT_SWEEP: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];

pub fn conditional_vs_q_gap(
    chain: &AbsorbedChain,
    triple: &SpectralTriple,
    cert: &ErgodicityCertificate,
    mu: &InitialLaw,
    t: f64,
    horizon: f64,
    sweep: &[f64],
) -> Result<ConditionalGapReport> {
    if t < 0.0 || horizon < t {
        return Err(Error::Domain(format!("need 0 <= t <= T, got t = {t}, T = {horizon}")));
    }
    let qproc = h_transform(chain, triple, &cert.psi1)?;
    let start = qproc.reweight(mu)?;
    let mu_eta = mu.integrate(&triple.eta);
    let mu_psi1 = mu.integrate(cert.psi1.values());
    let (gap, gap_sum) = tv_gap(chain, &qproc, mu, &start, t, horizon)?;

    let mut points = Vec::with_capacity(sweep.len());
    for &s in sweep {
        let (g, _) = tv_gap(chain, &qproc, mu, &start, t, t + s)?;
        points.push(GapPoint {
            horizon_offset: s,
            tv_gap: g,
        });
    }
    let prefactor = |offset: f64, g: f64| g * (triple.gamma * offset).exp() * mu_eta / mu_psi1;
    let c_prime = points
        .iter()
        .map(|p| prefactor(p.horizon_offset, p.tv_gap))
        .fold(prefactor(horizon - t, gap), f64::max);
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.tv_gap > 1e-13)
        .map(|p| (p.horizon_offset, p.tv_gap))
        .unzip();
    let fitted_rate = (xs.len() >= 2).then(|| -log_slope(&xs, &ys));
    let threshold = (2.0 * cert.c * mu_psi1 / mu_eta).ln() / triple.gamma;
    Ok(ConditionalGapReport {
        t,
        horizon,
        tv_gap: gap,
        tv_gap_sum: gap_sum,
        c_prime,
        bound: c_prime * mu_psi1 / mu_eta * (-triple.gamma * (horizon - t)).exp(),
        fitted_rate,
        sweep: points,
        threshold,
        threshold_ok: horizon >= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::fixtures;
    use crate::spectral::{certify_ergodicity, default_grid, solve_spectral};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn setup(chain: &AbsorbedChain) -> (SpectralTriple, QProcessChain) {
        let t = solve_spectral(chain).unwrap();
        let q = h_transform(chain, &t, &WeightFunction::ones(chain.len())).unwrap();
        (t, q)
    }

    #[test]
    fn m2sym_q_generator() {
        let (_, q) = setup(&fixtures::m2sym());
        assert!((&q.q_generator - dmatrix![-1.0, 1.0; 1.0, -1.0]).amax() < 1e-12);
        assert_relative_eq!(q.beta.as_slice(), &[0.5, 0.5][..], epsilon = 1e-12);
        assert!(q.is_reversible());
    }

    #[test]
    fn constant_eta_only_removes_killing() {
        // Constant killing rate 0.7 on a ring: eta is constant.
        let l = dmatrix![-1.7, 1.0, 0.0; 0.0, -1.7, 1.0; 1.0, 0.0, -1.7];
        let chain = AbsorbedChain::new(l.clone()).unwrap();
        let (t, q) = setup(&chain);
        assert_relative_eq!(t.lambda0, 0.7, epsilon = 1e-12);
        let expected = l + DMatrix::identity(3, 3) * t.lambda0;
        assert!((&q.q_generator - expected).amax() < 1e-12);
    }

    #[test]
    fn m2asym_direct_assembly() {
        let chain = fixtures::m2asym();
        let (t, q) = setup(&chain);
        let e = &t.eta;
        let l = chain.generator();
        let a01 = e[1] * l[(0, 1)] / e[0];
        let a10 = e[0] * l[(1, 0)] / e[1];
        let hand = dmatrix![-a01, a01; a10, -a10];
        assert!((&q.q_generator - hand).amax() < 1e-14);
        for i in 0..2 {
            assert!(q.q_generator.row(i).sum().abs() < 1e-12);
        }
        assert!(q.q_generator.tr_mul(&q.beta).amax() < 1e-10);
        assert_relative_eq!(q.beta.sum(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn intertwining_identity() {
        let chain = fixtures::random_chain(5, 42);
        let (t, q) = setup(&chain);
        for &s in &[0.5, 2.0] {
            let lhs = q.semigroup(s).unwrap();
            let p = expm_t(chain.generator(), s).unwrap();
            let rhs = DMatrix::from_fn(5, 5, |x, y| {
                (t.lambda0 * s).exp() * p[(x, y)] * t.eta[y] / t.eta[x]
            });
            assert!((lhs - rhs).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_eta_is_rejected() {
        let chain = fixtures::m2sym();
        let mut t = solve_spectral(&chain).unwrap();
        t.eta[1] = 0.0;
        assert!(matches!(
            h_transform(&chain, &t, &WeightFunction::ones(2)),
            Err(Error::ZeroEta { state: 1, .. })
        ));
    }

    #[test]
    fn q_marginal_cases() {
        let (_, q) = setup(&fixtures::m2sym());
        let d = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(q_marginal(&q, &d, 0.0).unwrap(), d);
        let m = q_marginal(&q, &d, 1.0).unwrap();
        let e = (-2.0f64).exp();
        assert_relative_eq!(m[0], (1.0 + e) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(m[1], (1.0 - e) / 2.0, epsilon = 1e-14);
        let (_, q) = setup(&fixtures::bd5());
        for &s in &[1.0, 10.0] {
            assert!((q_marginal(&q, &q.beta, s).unwrap() - &q.beta).amax() < 1e-10);
        }
    }

    #[test]
    fn m2sym_q_ergodicity_is_exact() {
        let (_, q) = setup(&fixtures::m2sym());
        let grid = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        let r = check_q_ergodicity(&q, &grid).unwrap();
        for row in &r.rows {
            assert_relative_eq!(row.worst_deviation, (-2.0 * row.t).exp(), max_relative = 1e-9);
        }
        assert_relative_eq!(r.fitted_rate.unwrap(), 2.0, max_relative = 1e-8);
        // at t = 0: ||delta_x - beta|| = 1
        assert_relative_eq!(r.rows[0].worst_deviation, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn bd5_q_rate_matches_gap() {
        let (t, q) = setup(&fixtures::bd5());
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 / t.gamma).collect();
        let r = check_q_ergodicity(&q, &grid).unwrap();
        let rate = r.fitted_rate.unwrap();
        assert!((rate - t.gamma).abs() <= 0.05 * t.gamma, "rate {rate} vs gamma {}", t.gamma);
    }

    #[test]
    fn conditional_marginal_degenerate_horizon() {
        let chain = fixtures::m2asym();
        let mu = InitialLaw::new(DVector::from_vec(vec![0.3, 0.7])).unwrap();
        let m = conditional_marginal(&chain, &mu, 1.3, 1.3).unwrap();
        let p = expm_t(chain.generator(), 1.3).unwrap().tr_mul(mu.values());
        assert!((m - &p / p.sum()).amax() < 1e-14);
    }

    #[test]
    fn m2sym_conditioning_equals_q_process() {
        let chain = fixtures::m2sym();
        let (_, q) = setup(&chain);
        let mu = InitialLaw::new(DVector::from_vec(vec![0.8, 0.2])).unwrap();
        for &(t, horizon) in &[(0.5, 0.7), (1.0, 3.0), (2.0, 10.0)] {
            let c = conditional_marginal(&chain, &mu, t, horizon).unwrap();
            let m = q_marginal(&q, &q.reweight(&mu).unwrap(), t).unwrap();
            assert!((c - m).amax() < 1e-12);
        }
    }

    #[test]
    fn m2asym_conditional_lies_between() {
        let chain = fixtures::m2asym();
        let (_, q) = setup(&chain);
        let mu = InitialLaw::dirac(2, 0);
        let at_t = conditional_marginal(&chain, &mu, 1.0, 1.0).unwrap();
        let mid = conditional_marginal(&chain, &mu, 1.0, 3.0).unwrap();
        let limit = q_marginal(&q, &q.reweight(&mu).unwrap(), 1.0).unwrap();
        let (lo, hi) = if at_t[0] < limit[0] { (at_t[0], limit[0]) } else { (limit[0], at_t[0]) };
        assert!(lo < mid[0] && mid[0] < hi, "{lo} {} {hi}", mid[0]);
    }

    #[test]
    fn gap_report() {
        let chain = fixtures::m2asym();
        let t = solve_spectral(&chain).unwrap();
        let cert =
            certify_ergodicity(&chain, &t, &WeightFunction::ones(2), &default_grid(t.gamma)).unwrap();
        let mu = InitialLaw::dirac(2, 0);
        let r = conditional_vs_q_gap(&chain, &t, &cert, &mu, 1.0, 3.0, &DEFAULT_SWEEP).unwrap();
        let rate = r.fitted_rate.unwrap();
        assert!((rate - t.gamma).abs() <= 0.1 * t.gamma, "{rate}");
        assert!(r.tv_gap <= r.bound * (1.0 + 1e-12));
        assert_relative_eq!(r.tv_gap_sum, 2.0 * r.tv_gap, epsilon = 1e-15);
        let r0 = conditional_vs_q_gap(&chain, &t, &cert, &mu, 30.0, 30.0, &DEFAULT_SWEEP).unwrap();
        assert!(r0.tv_gap_sum <= 2.0);

        let sym = fixtures::m2sym();
        let ts = solve_spectral(&sym).unwrap();
        let cs = certify_ergodicity(&sym, &ts, &WeightFunction::ones(2), &default_grid(2.0)).unwrap();
        let mu = InitialLaw::dirac(2, 1);
        let r = conditional_vs_q_gap(&sym, &ts, &cs, &mu, 0.5, 2.0, &DEFAULT_SWEEP).unwrap();
        assert!(r.tv_gap < 1e-12);
        assert!(r.fitted_rate.is_none());
    }

    #[test]
    fn gap_shrinks_past_threshold() {
        let chain = fixtures::bd5();
        let t = solve_spectral(&chain).unwrap();
        let cert =
            certify_ergodicity(&chain, &t, &WeightFunction::ones(5), &default_grid(t.gamma)).unwrap();
        let mu = InitialLaw::dirac(5, 2);
        let start = 1.0;
        let sweep: Vec<f64> = (1..=20).map(|j| j as f64 / t.gamma).collect();
        let long = conditional_vs_q_gap(&chain, &t, &cert, &mu, start, start, &sweep).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let horizon = start + k as f64;
            let r = conditional_vs_q_gap(&chain, &t, &cert, &mu, start, horizon, &DEFAULT_SWEEP)
                .unwrap();
            if r.threshold_ok {
                let bound = long.c_prime * r.bound / r.c_prime;
                assert!(r.tv_gap <= prev * (1.0 + 1e-9));
                assert!(r.tv_gap <= bound * (1.0 + 1e-9), "{} > {bound}", r.tv_gap);
            }
            prev = r.tv_gap;
        }
    }

    #[test]
    fn reversible_q_process_has_real_spectrum() {
        for chain in [fixtures::bd5(), fixtures::m2asym()] {
            let (_, q) = setup(&chain);
            assert!(q.is_reversible());
            let eig = q.q_generator.clone().complex_eigenvalues();
            assert!(eig.iter().all(|z| z.im.abs() < 1e-10));
        }
    }
}
