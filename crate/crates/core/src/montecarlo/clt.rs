use nalgebra::DVector;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::chain::{AbsorbedChain, InitialLaw, WeightFunction};
use crate::error::{Error, Result};
use crate::linalg::loglog_slope;
use crate::qprocess::{conditional_marginal, h_transform, q_marginal, QProcessChain};
use crate::spectral::SpectralTriple;
use crate::variance::{exact_conditional_moments, sigma2_value, AdditiveObservable, Dynamics};

use super::simulate::{replica_rng, Categorical, JumpSampler};

/// Default cap on the number of simulated paths for rejection sampling.
pub const DEFAULT_BUDGET: f64 = 1e8;

/// `sigma^2` at or below this is treated as degenerate.
pub const SIGMA2_TOLERANCE: f64 = 1e-10;

/// Largest chain for which the exact mean-square oracle is evaluated.
pub const EXACT_ORACLE_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Rejection below `t = 3 / lambda0`, Q-process above.
    Auto,
    Rejection,
    QProcess,
}

impl Method {
    pub fn resolve(self, t: f64, lambda0: f64) -> Method {
        match self {
            Method::Auto if t > 3.0 / lambda0 => Method::QProcess,
            Method::Auto => Method::Rejection,
            m => m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Auto => "auto",
            Method::Rejection => "rejection",
            Method::QProcess => "qprocess",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Method::Auto),
            "rejection" => Ok(Method::Rejection),
            "qprocess" => Ok(Method::QProcess),
            other => Err(Error::Validation {
                field: "method".into(),
                message: format!("unknown method `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan {
    pub n_replicas: usize,
    pub method: Method,
    pub seed: u64,
    /// Maximum number of rejection attempts.
    pub budget: f64,
}

impl SamplingPlan {
    pub fn new(n_replicas: usize, seed: u64) -> Self {
        Self {
            n_replicas,
            method: Method::Auto,
            seed,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn with_method(self, method: Method) -> Self {
        Self { method, ..self }
    }
}

/// Sorted draws of `sqrt(t) (S_t / t - beta(f))` under the conditional law or its surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub samples: Vec<f64>,
    pub n_effective: usize,
    pub seed: u64,
    /// Replica stream of every kept draw, in replica order.
    pub streams: Vec<u64>,
    pub method: Method,
    pub t: f64,
    pub sigma2: f64,
    /// Paths simulated, including rejected ones.
    pub attempts: u64,
    /// For the Q-process surrogate: exact total variation distance between
    /// its path law on `[0, t]` and the conditional law given `tau > t`.
    pub gap_bound: Option<f64>,
}

impl EmpiricalDistribution {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.n_effective as f64
    }

    /// Empirical CDF `F_n(x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.samples.partition_point(|&s| s <= x) as f64 / self.n_effective as f64
    }
}

/// `1 / (2 sqrt n)`, the largest standard error of an empirical CDF value.
pub fn ecdf_standard_error(n: usize) -> f64 {
    0.5 / (n as f64).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `sup_x |F_n(x) - Phi(x / sigma)|`, evaluated on both sides of every jump of `F_n`.
pub fn kolmogorov_distance(empirical: &EmpiricalDistribution, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain("sigma2 must be positive".into()));
    }
    Ok(ks_against_normal(&empirical.samples, sigma2.sqrt()))
}

fn ks_against_normal(sorted: &[f64], sigma: f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let j = i + sorted[i..].partition_point(|&s| s <= x);
        let phi = normal_cdf(x / sigma);
        d = d.max((i as f64 / n - phi).abs()).max((j as f64 / n - phi).abs());
        i = j;
    }
    d
}

/// `sup_x |F_a(x) - F_b(x)|` for two sorted samples.
pub fn kolmogorov_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        i += a[i..].partition_point(|&s| s <= x);
        j += b[j..].partition_point(|&s| s <= x);
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn observable_for(qproc: &QProcessChain, f: &DVector<f64>) -> Result<(AdditiveObservable, f64)> {
    let obs = AdditiveObservable::new(f.clone(), &qproc.beta)?;
    if obs.is_constant() {
        return Ok((obs, 0.0));
    }
    let sigma2 = sigma2_value(qproc, &obs)?;
    if sigma2 <= SIGMA2_TOLERANCE {
        return Err(Error::DegenerateVariance(sigma2));
    }
    Ok((obs, sigma2))
}

/// Samples the conditional CLT statistic at time `t`.
///
/// A constant observable yields exact zeros. A nonconstant one with
/// `sigma^2 <= SIGMA2_TOLERANCE` is rejected.
pub fn conditional_clt_sample(
    chain: &AbsorbedChain,
    triple: &SpectralTriple,
    mu: &InitialLaw,
    f: &DVector<f64>,
    t: f64,
    plan: &SamplingPlan,
) -> Result<EmpiricalDistribution> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("t must be positive and finite, got {t}")));
    }
    if plan.n_replicas == 0 {
        return Err(Error::Domain("n_replicas must be positive".into()));
    }
    let qproc = h_transform(chain, triple, &WeightFunction::ones(chain.len()))?;
    let mu_eta = mu.integrate(&triple.eta);
    if !(mu_eta > 0.0) {
        return Err(Error::Domain("mu(eta) must be positive".into()));
    }
    let (obs, sigma2) = observable_for(&qproc, f)?;
    let centered = &obs.f_centered;
    let root_t = t.sqrt();
    let n = plan.n_replicas;
    let method = plan.method.resolve(t, triple.lambda0);

    let (mut samples, streams, attempts, gap_bound) = match method {
        Method::QProcess | Method::Auto => {
            let start_law = qproc.reweight(mu)?;
            let start = Categorical::new(&start_law);
            let sampler = JumpSampler::conservative(&qproc);
            let samples: Vec<f64> = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = replica_rng(plan.seed, i);
                    let x0 = start.sample(&mut rng);
                    let s = sampler.additive(x0, centered, t, &mut rng).expect("conservative");
                    s / root_t
                })
                .collect();
            let conditional = conditional_marginal(chain, mu, t, t)?;
            let surrogate = q_marginal(&qproc, &start_law, t)?;
            let gap = 0.5 * (conditional - surrogate).abs().sum();
            (samples, (0..n as u64).collect(), n as u64, Some(gap))
        }
        Method::Rejection => {
            let growth = (triple.lambda0 * t).exp() / mu_eta.min(1.0);
            let expected = n as f64 * (triple.lambda0 * t).exp();
            if expected > plan.budget {
                return Err(Error::BudgetExceeded {
                    expected,
                    budget: plan.budget,
                });
            }
            let cap = plan.budget as u64;
            let start = Categorical::new(mu.values());
            let sampler = JumpSampler::absorbed(chain);
            let mut kept: Vec<(u64, f64)> = Vec::with_capacity(n);
            let mut next = 0u64;
            while kept.len() < n {
                if next >= cap {
                    return Err(Error::BudgetExceeded {
                        expected: next as f64 * n as f64 / kept.len().max(1) as f64,
                        budget: plan.budget,
                    });
                }
                let wanted = (n - kept.len()) as f64 * growth * 1.1;
                let batch = (wanted.ceil() as u64 + 64).min(cap - next);
                let draws: Vec<Option<f64>> = (next..next + batch)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = replica_rng(plan.seed, i);
                        let x0 = start.sample(&mut rng);
                        sampler.additive(x0, centered, t, &mut rng).map(|s| s / root_t)
                    })
                    .collect();
                kept.extend(
                    draws
                        .into_iter()
                        .enumerate()
                        .filter_map(|(j, s)| s.map(|s| (next + j as u64, s))),
                );
                next += batch;
            }
            kept.truncate(n);
            let attempts = kept.last().map_or(0, |(i, _)| i + 1);
            let (streams, samples) = kept.into_iter().unzip();
            (samples, streams, attempts, None)
        }
    };
    samples.sort_by(f64::total_cmp);
    Ok(EmpiricalDistribution {
        samples,
        n_effective: n,
        seed: plan.seed,
        streams,
        method,
        t,
        sigma2,
        attempts,
        gap_bound,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QedRow {
    pub t: f64,
    pub method: Method,
    /// Monte Carlo estimate of `E[(S_t / t - beta(f))^2 | tau > t]`.
    pub mean_square: f64,
    pub standard_error: f64,
    /// Exact conditional value from the moment oracle.
    pub exact_conditional: Option<f64>,
    /// Exact value of the quantity actually sampled (differs under the Q-process surrogate).
    pub exact_sampled: Option<f64>,
    pub gap_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QedReport {
    pub rows: Vec<QedRow>,
    pub sigma2: f64,
    /// Log-log slope of the Monte Carlo mean squares against `t`.
    pub fitted_slope: Option<f64>,
    pub exact_slope: Option<f64>,
}

/// Mean-square quasi-ergodic convergence of `S_t / t` towards `beta(f)`.
pub fn quasi_ergodic_check(
    chain: &AbsorbedChain,
    triple: &SpectralTriple,
    mu: &InitialLaw,
    f: &DVector<f64>,
    t_grid: &[f64],
    plan: &SamplingPlan,
) -> Result<QedReport> {
    let qproc = h_transform(chain, triple, &WeightFunction::ones(chain.len()))?;
    let obs = AdditiveObservable::new(f.clone(), &qproc.beta)?;
    let small = chain.len() <= EXACT_ORACLE_LIMIT;
    let mut rows = Vec::with_capacity(t_grid.len());
    let mut sigma2 = 0.0;
    for &t in t_grid {
        let sample = conditional_clt_sample(chain, triple, mu, f, t, plan)?;
        sigma2 = sample.sigma2;
        let n = sample.n_effective as f64;
        let squares: Vec<f64> = sample.samples.iter().map(|z| z * z / t).collect();
        let mean = squares.iter().sum::<f64>() / n;
        let var = squares.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let (exact_conditional, exact_sampled) = if small {
            let oracle = |dynamics: Dynamics, start: &DVector<f64>| -> Result<f64> {
                let m = exact_conditional_moments(dynamics, start, &obs.f_centered, 2, t)?;
                Ok(m.conditional[2] / (t * t))
            };
            let conditional = oracle(Dynamics::Absorbed(chain), mu.values())?;
            let sampled = match sample.method {
                Method::QProcess => oracle(Dynamics::QProcess(&qproc), &qproc.reweight(mu)?)?,
                _ => conditional,
            };
            (Some(conditional), Some(sampled))
        } else {
            (None, None)
        };
        rows.push(QedRow {
            t,
            method: sample.method,
            mean_square: mean,
            standard_error: (var / n).sqrt(),
            exact_conditional,
            exact_sampled,
            gap_bound: sample.gap_bound,
        });
    }
    let slope = |values: Vec<Option<f64>>| -> Option<f64> {
        let (ts, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .zip(values)
            .filter_map(|(r, v)| v.filter(|v| *v > 0.0).map(|v| (r.t, v)))
            .unzip();
        (ts.len() >= 2).then(|| loglog_slope(&ts, &ys))
    };
    let fitted_slope = slope(rows.iter().map(|r| Some(r.mean_square)).collect());
    let exact_slope = slope(rows.iter().map(|r| r.exact_conditional).collect());
    Ok(QedReport {
        rows,
        sigma2,
        fitted_slope,
        exact_slope,
    })
}
