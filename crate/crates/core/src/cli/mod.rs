//! The `qsdlab` command line.
//!
//! Every subcommand writes CSV reports, a `manifest.json` replay record and a
//! `timing.json` into `--out`. Exit codes: 0 success, 2 usage, 3 invalid
//! model or input, 4 numerical failure. Failures print one line on stderr:
//! `error: kind=<Kind> exit=<code> message=<text>`.

pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::chain::{fixtures, InitialLaw, ModelBundle};
use crate::config::{emit_model_config, load_model_config};
use crate::error::{Error, Result};
use crate::linalg::expm_t;
use crate::montecarlo::{
    conditional_clt_sample, kolmogorov_distance, quasi_ergodic_check, Method, SamplingPlan,
    DEFAULT_BUDGET, SIGMA2_TOLERANCE,
};
use crate::qprocess::{check_q_ergodicity, conditional_vs_q_gap, h_transform, QProcessChain};
use crate::spectral::{
    certify_ergodicity, default_grid, solve_spectral_with, ErgodicityCertificate, SpectralMethod,
    SpectralTriple, CERTIFICATE_SLACK, DENSE_LIMIT, GAP_TOLERANCE,
};
use crate::variance::{
    check_even_moment_limit, check_odd_moment_decay, check_uniform_charfun_bound,
    constants_table, exact_conditional_charfun, sigma2_poisson, test_function_ball,
    verify_constant_identities, AdditiveObservable, Dynamics, MAX_ORDER,
};

use report::{list, num, write_report, Report, RunInfo, Table};

#[derive(Debug, Parser)]
#[command(name = "qsdlab", version, about = "Quasi-stationary laboratory for finite absorbed Markov chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Model file (TOML) or fixture name: m2sym, m2asym, bd5.
    #[arg(long)]
    pub model: String,
    /// Output directory.
    #[arg(long, default_value = "qsdlab-out")]
    pub out: PathBuf,
    /// Master seed of the Monte Carlo streams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads, 0 for one per CPU. Outputs do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Solver {
    Auto,
    Dense,
    Power,
}

#[derive(Debug, Clone, Args)]
pub struct CertifyArgs {
    /// Comma-separated increasing time grid ending at or after 5/gamma.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct QprocessArgs {
    /// Observation time t.
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// Conditioning horizon T >= t; defaults to t + 5/gamma.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VarianceArgs {
    /// Quadrature horizon; defaults to 20/gamma.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Quadrature step; defaults to 0.005/gamma.
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct MomentsArgs {
    /// Highest even order checked is 2k.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,40,80,160")]
    pub t_grid: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CharfunArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    pub omega: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10,40,160")]
    pub t_grid: Vec<f64>,
    /// Random test functions drawn in addition to +-psi.
    #[arg(long, default_value_t = 64)]
    pub test_functions: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CltArgs {
    #[arg(long, default_value_t = 200.0)]
    pub t: f64,
    /// Number of replicas.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// auto, rejection or qprocess.
    #[arg(long, default_value = "auto")]
    pub method: Method,
    /// Maximum number of rejection attempts.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: f64,
    /// Also dump the sorted samples, one per line.
    #[arg(long)]
    pub samples: bool,
}

#[derive(Debug, Clone, Args)]
pub struct QedArgs {
    #[arg(long, value_delimiter = ',', default_value = "20,40,80,160")]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value = "auto")]
    pub method: Method,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: f64,
}

#[derive(Debug, Clone, Args)]
pub struct AllArgs {
    /// Replicas for the Monte Carlo stages.
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// lambda0, gap, QSD and right eigenvector.
    Spectral {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "auto")]
        solver: Solver,
    },
    /// Grid certificate of exponential convergence to quasi-stationarity.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: CertifyArgs,
    },
    /// Q-process generator, its ergodicity, and the conditional-law gap.
    Qprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: QprocessArgs,
    },
    /// Asymptotic variance by Poisson equation and by quadrature, and moment constants.
    Variance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: VarianceArgs,
    },
    /// Exact even and odd moments of the additive functional.
    Moments {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: MomentsArgs,
    },
    /// Characteristic-function coupling bound and exact conditional charfun.
    Charfun {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: CharfunArgs,
    },
    /// Monte Carlo conditional CLT sample and its Kolmogorov distance to the normal law.
    Clt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: CltArgs,
    },
    /// Mean-square quasi-ergodic convergence.
    Qed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: QedArgs,
    },
    /// Every pipeline above with defaults, plus a table of checks.
    All {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: AllArgs,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Spectral { common, .. }
            | Command::Certify { common, .. }
            | Command::Qprocess { common, .. }
            | Command::Variance { common, .. }
            | Command::Moments { common, .. }
            | Command::Charfun { common, .. }
            | Command::Clt { common, .. }
            | Command::Qed { common, .. }
            | Command::All { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Spectral { .. } => "spectral",
            Command::Certify { .. } => "certify",
            Command::Qprocess { .. } => "qprocess",
            Command::Variance { .. } => "variance",
            Command::Moments { .. } => "moments",
            Command::Charfun { .. } => "charfun",
            Command::Clt { .. } => "clt",
            Command::Qed { .. } => "qed",
            Command::All { .. } => "all",
        }
    }
}

/// A model file path, or else a fixture name.
pub fn resolve_model(spec: &str) -> Result<ModelBundle> {
    let path = Path::new(spec);
    if path.is_file() {
        return load_model_config(path);
    }
    fixtures::bundle(spec).ok_or_else(|| {
        Error::Io(format!(
            "`{spec}` is neither a model file nor a fixture ({})",
            fixtures::NAMES.join(", ")
        ))
    })
}

struct Setup {
    bundle: ModelBundle,
    triple: SpectralTriple,
}

impl Setup {
    fn new(bundle: ModelBundle, solver: Solver) -> Result<Self> {
        let method = match solver {
            Solver::Auto => SpectralMethod::Auto,
            Solver::Dense => SpectralMethod::Dense,
            Solver::Power => SpectralMethod::Power,
        };
        let triple = solve_spectral_with(&bundle.chain, method)?;
        Ok(Self { bundle, triple })
    }

    fn certificate(&self) -> Result<ErgodicityCertificate> {
        certify_ergodicity(
            &self.bundle.chain,
            &self.triple,
            &self.bundle.psi1,
            &default_grid(self.triple.gamma),
        )
    }

    fn qprocess(&self) -> Result<QProcessChain> {
        h_transform(&self.bundle.chain, &self.triple, &self.bundle.psi1)
    }

    fn observable(&self) -> Result<AdditiveObservable> {
        AdditiveObservable::new(self.bundle.observable.clone(), &self.triple.beta())
    }

    /// `eta o mu`, the Q-process start matching conditioning from `mu`.
    fn q_start(&self, q: &QProcessChain) -> Result<InitialLaw> {
        InitialLaw::new(q.reweight(&self.bundle.mu)?)
    }

    fn label(&self, x: usize) -> String {
        self.bundle.chain.states()[x].clone()
    }
}

fn spectral_report(s: &Setup, solver: Solver) -> Report {
    let mut r = Report::default();
    r.param("solver", format!("{solver:?}").to_lowercase());
    let (left, right) = s.triple.residuals(&s.bundle.chain);
    r.table(
        "spectral_summary",
        Table::summary(vec![
            ("states", s.bundle.chain.len().into()),
            ("lambda0", s.triple.lambda0.into()),
            ("gamma", s.triple.gamma.into()),
            ("residual_left", left.into()),
            ("residual_right", right.into()),
        ]),
    );
    let beta = s.triple.beta();
    let mut t = Table::new(&["state", "label", "alpha", "eta", "beta"]);
    for x in 0..s.bundle.chain.len() {
        t.push(vec![
            x.into(),
            s.label(x).into(),
            s.triple.alpha[x].into(),
            s.triple.eta[x].into(),
            beta[x].into(),
        ]);
    }
    r.table("spectral_states", t);
    r
}

fn certify_report(s: &Setup, args: &CertifyArgs) -> Result<Report> {
    let grid = if args.grid.is_empty() {
        default_grid(s.triple.gamma)
    } else {
        args.grid.clone()
    };
    let cert = certify_ergodicity(&s.bundle.chain, &s.triple, &s.bundle.psi1, &grid)?;
    let mut r = Report::default();
    r.param("grid", list(&grid));
    r.table(
        "certify_summary",
        Table::summary(vec![
            ("c", cert.c.into()),
            ("gamma", cert.gamma.into()),
            ("slack", CERTIFICATE_SLACK.into()),
            ("worst_ratio", cert.worst_ratio.into()),
            ("worst_t", cert.worst_t.into()),
            ("worst_state", cert.worst_state.into()),
        ]),
    );
    let mut t = Table::new(&["t", "state", "ratio"]);
    for (i, &time) in cert.t_grid.iter().enumerate() {
        for (x, ratio) in cert.ratios[i].iter().enumerate() {
            t.push(vec![time.into(), x.into(), (*ratio).into()]);
        }
    }
    r.table("certify_ratios", t);
    Ok(r)
}

fn qprocess_report(s: &Setup, args: &QprocessArgs) -> Result<Report> {
    let gamma = s.triple.gamma;
    let horizon = args.horizon.unwrap_or(args.t + 5.0 / gamma);
    let cert = s.certificate()?;
    let q = s.qprocess()?;
    let decay = check_q_ergodicity(&q, &default_grid(gamma))?;
    let sweep: Vec<f64> = (1..=6).map(|j| j as f64 / gamma).collect();
    let gap = conditional_vs_q_gap(&s.bundle.chain, &s.triple, &cert, &s.bundle.mu, args.t, horizon, &sweep)?;
    let mut r = Report::default();
    r.param("t", num(args.t));
    r.param("T", num(horizon));
    r.param("sweep", list(&sweep));
    r.table(
        "qprocess_summary",
        Table::summary(vec![
            ("c_psi_min", q.c.into()),
            ("beta_psi", q.beta_psi().into()),
            ("reversible", q.is_reversible().into()),
            ("gamma", gamma.into()),
            ("decay_fitted_rate", decay.fitted_rate.into()),
            ("t", args.t.into()),
            ("T", horizon.into()),
            ("tv_gap", gap.tv_gap.into()),
            ("tv_gap_sum", gap.tv_gap_sum.into()),
            ("c_prime", gap.c_prime.into()),
            ("bound", gap.bound.into()),
            ("gap_fitted_rate", gap.fitted_rate.into()),
            ("threshold", gap.threshold.into()),
            ("threshold_ok", gap.threshold_ok.into()),
        ]),
    );
    let n = q.len();
    let mut g = Table::new(&["from", "to", "rate"]);
    for x in 0..n {
        for y in 0..n {
            g.push(vec![x.into(), y.into(), q.q_generator[(x, y)].into()]);
        }
    }
    r.table("qprocess_generator", g);
    let mut d = Table::new(&["t", "worst_deviation", "implied_c", "worst_tv", "tv_implied_c"]);
    for row in &decay.rows {
        d.push(vec![
            row.t.into(),
            row.worst_deviation.into(),
            row.implied_c.into(),
            row.worst_tv.into(),
            row.tv_implied_c.into(),
        ]);
    }
    r.table("qprocess_decay", d);
    let mut sw = Table::new(&["horizon_offset", "tv_gap"]);
    for p in &gap.sweep {
        sw.push(vec![p.horizon_offset.into(), p.tv_gap.into()]);
    }
    r.table("qprocess_gap", sw);
    Ok(r)
}

fn variance_report(s: &Setup, args: &VarianceArgs) -> Result<Report> {
    let cert = s.certificate()?;
    let q = s.qprocess()?;
    let obs = s.observable()?;
    let mut v = sigma2_poisson(&q, &obs, &cert)?;
    if args.horizon.is_some() || args.step.is_some() {
        v.quadrature = crate::variance::sigma2_quadrature(
            &q,
            &obs,
            cert.c,
            args.horizon.unwrap_or(20.0 / q.gamma),
            args.step.unwrap_or(0.005 / q.gamma),
        )?;
    }
    let table = constants_table(&cert, &q, MAX_ORDER)?;
    let ids = verify_constant_identities(&table);
    let mut r = Report::default();
    r.param("horizon", num(v.quadrature.horizon));
    r.param("step", num(v.quadrature.step));
    r.table(
        "variance_summary",
        Table::summary(vec![
            ("beta_f", obs.beta_f.into()),
            ("sigma2_poisson", v.sigma2.into()),
            ("sigma2_quadrature", v.quadrature.value.into()),
            ("difference", (v.sigma2 - v.quadrature.value).abs().into()),
            ("truncation_bound", v.quadrature.truncation_bound.into()),
            ("discretization_error", v.quadrature.discretization_error.into()),
            ("quadrature_horizon", v.quadrature.horizon.into()),
            ("quadrature_step", v.quadrature.step.into()),
            ("c_const", cert.c.into()),
            ("d_recursion_exact", ids.d_recursion.into()),
            ("ck_recursion_exact", ids.ck_recursion.into()),
            ("ck_identity_exact", ids.ck_identity.into()),
            ("table_matches", ids.table_matches.into()),
        ]),
    );
    let mut p = Table::new(&["state", "f", "f_centered", "poisson_solution"]);
    for x in 0..q.len() {
        p.push(vec![
            x.into(),
            obs.f[x].into(),
            obs.f_centered[x].into(),
            v.poisson_solution[x].into(),
        ]);
    }
    r.table("variance_poisson", p);
    let mut c = Table::new(&["k", "d_k", "c_k"]);
    for k in 1..=MAX_ORDER {
        c.push(vec![k.into(), table.d_k(k).into(), table.c_k(k).into()]);
    }
    r.table("constants", c);
    Ok(r)
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Validation {
            field: name.into(),
            message: "entries must be positive and finite".into(),
        });
    }
    Ok(())
}

fn moments_report(s: &Setup, args: &MomentsArgs) -> Result<Report> {
    check_grid("t-grid", &args.t_grid)?;
    if args.k == 0 || 2 * args.k > MAX_ORDER {
        return Err(Error::Validation {
            field: "k".into(),
            message: format!("must be in 1..={}", MAX_ORDER / 2),
        });
    }
    let cert = s.certificate()?;
    let q = s.qprocess()?;
    let obs = s.observable()?;
    let sigma2 = crate::variance::sigma2_value(&q, &obs)?;
    let table = constants_table(&cert, &q, MAX_ORDER)?;
    let start = s.q_start(&q)?;
    let mu_psi = start.integrate(&q.psi);
    let mut r = Report::default();
    r.param("k", args.k);
    r.param("t_grid", list(&args.t_grid));
    let mut even = Table::new(&["k", "t", "value", "limit", "error", "bound"]);
    let mut even_summary = Table::new(&["k", "limit", "fitted_slope", "within_bounds"]);
    for k in 1..=args.k {
        let m = check_even_moment_limit(
            Dynamics::QProcess(&q),
            sigma2,
            &start,
            &obs,
            k,
            &args.t_grid,
            Some((&table, mu_psi)),
        )?;
        for (i, &t) in m.t_grid.iter().enumerate() {
            let bound = m.bounds.as_ref().map(|b| b[i]);
            even.push(vec![k.into(), t.into(), m.even_values[i].into(), m.limit.into(), m.errors[i].into(), bound.into()]);
        }
        even_summary.push(vec![k.into(), m.limit.into(), m.fitted_slope.into(), m.within_bounds().into()]);
    }
    let mut odd = Table::new(&["k", "t", "value"]);
    let mut odd_summary = Table::new(&["k", "fitted_slope", "coefficient", "fitted_prefactor"]);
    for k in (0..args.k).filter(|k| 2 * k + 1 <= MAX_ORDER) {
        let m = check_odd_moment_decay(&q, &start, &obs, k, &args.t_grid, &table)?;
        for (i, &t) in m.t_grid.iter().enumerate() {
            odd.push(vec![k.into(), t.into(), m.values[i].into()]);
        }
        odd_summary.push(vec![k.into(), m.fitted_slope.into(), m.coefficient.into(), m.fitted_prefactor.into()]);
    }
    r.table("moments_even", even);
    r.table("moments_even_summary", even_summary);
    r.table("moments_odd", odd);
    r.table("moments_odd_summary", odd_summary);
    Ok(r)
}

fn charfun_report(s: &Setup, args: &CharfunArgs, seed: u64) -> Result<Report> {
    check_grid("t-grid", &args.t_grid)?;
    let cert = s.certificate()?;
    let q = s.qprocess()?;
    let obs = s.observable()?;
    let sigma2 = crate::variance::sigma2_value(&q, &obs)?;
    let start = s.q_start(&q)?;
    let tests = test_function_ball(&q.psi, args.test_functions, seed);
    let mut r = Report::default();
    r.param("omega", list(&args.omega));
    r.param("t_grid", list(&args.t_grid));
    r.param("test_functions", args.test_functions);
    let mut rows = Table::new(&["omega", "t", "coupling_gap", "sampled_gap", "bound", "limit_gap"]);
    let mut summary = Table::new(&["omega", "bound_holds", "monotone_10pct"]);
    for &omega in &args.omega {
        let c = check_uniform_charfun_bound(&q, &cert, sigma2, &start, &obs, omega, &args.t_grid, &tests)?;
        for row in &c.rows {
            rows.push(vec![
                omega.into(),
                row.t.into(),
                row.coupling_gap.into(),
                row.sampled_gap.into(),
                row.bound.into(),
                row.limit_gap.into(),
            ]);
        }
        summary.push(vec![omega.into(), c.bound_holds().into(), c.monotone(0.1).into()]);
    }
    r.table("charfun_coupling", rows);
    r.table("charfun_summary", summary);

    let t = 100.0 / s.triple.gamma;
    r.param("exact_t", num(t));
    let mut exact = Table::new(&["omega", "t", "re", "im", "gaussian", "abs_error"]);
    for j in -8..=8 {
        let omega = j as f64 * 0.25;
        let phi: Complex64 = exact_conditional_charfun(
            Dynamics::Absorbed(&s.bundle.chain),
            s.bundle.mu.values(),
            &obs.f_centered,
            omega,
            t,
        )?;
        let gauss = (-sigma2 * omega * omega / 2.0).exp();
        exact.push(vec![
            omega.into(),
            t.into(),
            phi.re.into(),
            phi.im.into(),
            gauss.into(),
            (phi - gauss).norm().into(),
        ]);
    }
    r.table("charfun_exact", exact);
    Ok(r)
}

fn clt_report(s: &Setup, args: &CltArgs, seed: u64) -> Result<Report> {
    let plan = SamplingPlan {
        n_replicas: args.n,
        method: args.method,
        seed,
        budget: args.budget,
    };
    let e = conditional_clt_sample(&s.bundle.chain, &s.triple, &s.bundle.mu, &s.bundle.observable, args.t, &plan)?;
    let d = if e.sigma2 > 0.0 {
        Some(kolmogorov_distance(&e, e.sigma2)?)
    } else {
        None
    };
    let mut r = Report::default();
    r.param("t", num(args.t));
    r.param("n", args.n);
    r.param("method", args.method.name());
    r.param("budget", num(args.budget));
    r.param("samples", args.samples);
    let mut t = Table::new(&["t", "n_eff", "d_kolm", "sigma2", "method", "gap_bound", "attempts", "seed"]);
    t.push(vec![
        e.t.into(),
        e.n_effective.into(),
        d.into(),
        e.sigma2.into(),
        e.method.name().into(),
        e.gap_bound.into(),
        e.attempts.into(),
        e.seed.into(),
    ]);
    r.table("clt", t);
    if args.samples {
        let mut text = String::with_capacity(e.samples.len() * 24);
        for v in &e.samples {
            text.push_str(&num(*v));
            text.push('\n');
        }
        r.texts.push(("clt_samples.txt".into(), text));
    }
    Ok(r)
}

fn qed_report(s: &Setup, args: &QedArgs, seed: u64) -> Result<Report> {
    check_grid("t-grid", &args.t_grid)?;
    let plan = SamplingPlan {
        n_replicas: args.n,
        method: args.method,
        seed,
        budget: args.budget,
    };
    let q = quasi_ergodic_check(&s.bundle.chain, &s.triple, &s.bundle.mu, &s.bundle.observable, &args.t_grid, &plan)?;
    let mut r = Report::default();
    r.param("t_grid", list(&args.t_grid));
    r.param("n", args.n);
    r.param("method", args.method.name());
    r.param("budget", num(args.budget));
    let mut t = Table::new(&[
        "t",
        "method",
        "mean_square",
        "standard_error",
        "exact_conditional",
        "exact_sampled",
        "gap_bound",
    ]);
    for row in &q.rows {
        t.push(vec![
            row.t.into(),
            row.method.name().into(),
            row.mean_square.into(),
            row.standard_error.into(),
            row.exact_conditional.into(),
            row.exact_sampled.into(),
            row.gap_bound.into(),
        ]);
    }
    r.table("qed", t);
    r.table(
        "qed_summary",
        Table::summary(vec![
            ("sigma2", q.sigma2.into()),
            ("fitted_slope", q.fitted_slope.into()),
            ("exact_slope", q.exact_slope.into()),
        ]),
    );
    Ok(r)
}

/// `max |exp(t L_Q) - diag(eta)^-1 e^{lambda0 t} exp(t L) diag(eta)|` over `t`.
fn intertwining_error(s: &Setup, q: &QProcessChain, times: &[f64]) -> Result<f64> {
    let eta = &s.triple.eta;
    let mut worst = 0.0f64;
    for &t in times {
        let p = expm_t(s.bundle.chain.generator(), t)? * (s.triple.lambda0 * t).exp();
        let n = eta.len();
        let conj = DMatrix::from_fn(n, n, |x, y| p[(x, y)] * eta[y] / eta[x]);
        worst = worst.max((q.semigroup(t)? - conj).amax());
    }
    Ok(worst)
}

fn check_row(t: &mut Table, name: &str, value: f64, threshold: &str, pass: bool) {
    t.push(vec![name.into(), value.into(), threshold.into(), pass.into()]);
}

fn all_report(s: &Setup, args: &AllArgs, seed: u64) -> Result<Report> {
    let mut r = Report::default();
    r.param("n", args.n);
    r.absorb("spectral", spectral_report(s, Solver::Auto));
    r.absorb("certify", certify_report(s, &CertifyArgs { grid: vec![] })?);
    r.absorb("qprocess", qprocess_report(s, &QprocessArgs { t: 1.0, horizon: None })?);
    r.absorb("variance", variance_report(s, &VarianceArgs { horizon: None, step: None })?);
    let moments = MomentsArgs {
        k: 3,
        t_grid: vec![20.0, 40.0, 80.0, 160.0],
    };
    r.absorb("moments", moments_report(s, &moments)?);
    let charfun = CharfunArgs {
        omega: vec![0.5, 1.0, 2.0],
        t_grid: vec![10.0, 40.0, 160.0],
        test_functions: 64,
    };
    r.absorb("charfun", charfun_report(s, &charfun, seed)?);
    let clt = CltArgs {
        t: 200.0,
        n: args.n,
        method: Method::QProcess,
        budget: DEFAULT_BUDGET,
        samples: false,
    };
    r.absorb("clt", clt_report(s, &clt, seed)?);
    let qed = QedArgs {
        t_grid: vec![20.0, 40.0, 80.0, 160.0],
        n: args.n,
        method: Method::QProcess,
        budget: DEFAULT_BUDGET,
    };
    r.absorb("qed", qed_report(s, &qed, seed)?);

    // Checks recomputed from the library so the table stands on its own.
    let q = s.qprocess()?;
    let obs = s.observable()?;
    let cert = s.certificate()?;
    let mut checks = Table::new(&["check", "value", "threshold", "pass"]);
    let (left, right) = s.triple.residuals(&s.bundle.chain);
    let res = left.max(right);
    check_row(&mut checks, "eigen_residual", res, "<= 1e-9", res <= 1e-9);
    let inter = intertwining_error(s, &q, &[0.5, 2.0])?;
    check_row(&mut checks, "h_transform_intertwining", inter, "<= 1e-9", inter <= 1e-9);
    let invariance = q.q_generator.tr_mul(&q.beta).amax();
    check_row(&mut checks, "beta_invariance", invariance, "<= 1e-10", invariance <= 1e-10);
    let v = sigma2_poisson(&q, &obs, &cert)?;
    let diff = (v.sigma2 - v.quadrature.value).abs();
    check_row(&mut checks, "sigma2_cross_oracle", diff, "<= quadrature error bound", diff <= v.quadrature.error_bound());
    let ids = verify_constant_identities(&constants_table(&cert, &q, MAX_ORDER)?);
    let exact = ids.d_recursion && ids.ck_recursion && ids.ck_identity;
    check_row(&mut checks, "constant_identities", if exact { 1.0 } else { 0.0 }, "exact", exact);
    let start = s.q_start(&q)?;
    let table = constants_table(&cert, &q, MAX_ORDER)?;
    if v.sigma2 > SIGMA2_TOLERANCE {
        for k in 1..=3 {
            let m = check_even_moment_limit(
                Dynamics::QProcess(&q),
                v.sigma2,
                &start,
                &obs,
                k,
                &moments.t_grid,
                Some((&table, start.integrate(&q.psi))),
            )?;
            let slope = m.fitted_slope.unwrap_or(f64::NAN);
            let ok = (-1.3..=-0.8).contains(&slope) || m.errors.iter().all(|e| e.abs() < 1e-12);
            check_row(&mut checks, &format!("even_moment_slope_k{k}"), slope, "in [-1.3, -0.8]", ok);
            check_row(&mut checks, &format!("even_moment_bound_k{k}"), m.errors.iter().fold(0.0, |a, e| a.max(e.abs())), "<= constants bound", m.within_bounds());
        }
        let tests = test_function_ball(&q.psi, charfun.test_functions, seed);
        for &omega in &charfun.omega {
            let c = check_uniform_charfun_bound(&q, &cert, v.sigma2, &start, &obs, omega, &charfun.t_grid, &tests)?;
            let worst = c.rows.iter().map(|row| row.coupling_gap / row.bound).fold(0.0, f64::max);
            check_row(&mut checks, &format!("charfun_bound_omega{omega}"), worst, "gap/bound <= 1", c.bound_holds());
        }
        let e = conditional_clt_sample(
            &s.bundle.chain,
            &s.triple,
            &s.bundle.mu,
            &s.bundle.observable,
            clt.t,
            &SamplingPlan::new(args.n, seed).with_method(Method::QProcess),
        )?;
        let d = kolmogorov_distance(&e, e.sigma2)?;
        check_row(&mut checks, "clt_d_kolm_t200", d, "<= 0.02", d <= 0.02);
    }
    r.table("checks", checks);
    Ok(r)
}

fn tolerances() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("gap_tolerance".to_string(), format!("{GAP_TOLERANCE:e}")),
        ("certificate_slack".to_string(), format!("{CERTIFICATE_SLACK}")),
        ("sigma2_tolerance".to_string(), format!("{SIGMA2_TOLERANCE:e}")),
        ("dense_limit".to_string(), format!("{DENSE_LIMIT}")),
    ])
}

fn execute(command: &Command) -> Result<(Report, ModelBundle)> {
    let common = command.common();
    let bundle = resolve_model(&common.model)?;
    let solver = match command {
        Command::Spectral { solver, .. } => *solver,
        _ => Solver::Auto,
    };
    let s = Setup::new(bundle, solver)?;
    let seed = common.seed;
    let report = match command {
        Command::Spectral { solver, .. } => spectral_report(&s, *solver),
        Command::Certify { args, .. } => certify_report(&s, args)?,
        Command::Qprocess { args, .. } => qprocess_report(&s, args)?,
        Command::Variance { args, .. } => variance_report(&s, args)?,
        Command::Moments { args, .. } => moments_report(&s, args)?,
        Command::Charfun { args, .. } => charfun_report(&s, args, seed)?,
        Command::Clt { args, .. } => clt_report(&s, args, seed)?,
        Command::Qed { args, .. } => qed_report(&s, args, seed)?,
        Command::All { args, .. } => all_report(&s, args, seed)?,
    };
    Ok((report, s.bundle))
}

/// Runs one invocation and returns its report hash.
pub fn run_command(command: &Command) -> Result<String> {
    let started = Instant::now();
    let common = command.common().clone();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| Error::Validation {
            field: "threads".into(),
            message: e.to_string(),
        })?;
    let (report, bundle) = pool.install(|| execute(command))?;
    let info = RunInfo {
        subcommand: command.name(),
        model: &common.model,
        model_text: &emit_model_config(&bundle),
        seed: common.seed,
        tolerances: tolerances(),
    };
    write_report(&common.out, &info, &report, started.elapsed().as_secs_f64())
}

fn diagnostic(kind: &str, code: i32, message: &str) {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: kind={kind} exit={code} message={line}");
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            diagnostic("Usage", 2, first);
            return 2;
        }
    };
    match run_command(&cli.command) {
        Ok(digest) => {
            println!("{digest}");
            0
        }
        Err(e) => {
            let code = if e.is_validation() { 3 } else { 4 };
            diagnostic(e.kind(), code, &e.to_string());
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["qsdlab", "spectral", "--model", "m2sym", "--bogus"]), 2);
        assert_eq!(run(["qsdlab", "frobnicate"]), 2);
        assert_eq!(run(["qsdlab", "clt", "--model", "m2sym", "--method", "magic"]), 2);
    }

    #[test]
    fn unknown_model_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["qsdlab", "spectral", "--model", "nope", "--out", out]), 3);
    }

    #[test]
    fn degenerate_gap_exits_four() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("flat.toml");
        // Nearly decoupled states: the gap 2e-12 is far below 1e-8 lambda0.
        std::fs::write(&model, "generator = [[-1.0, 1e-12], [1e-12, -1.0]]\n").unwrap();
        let code = run([
            "qsdlab",
            "spectral",
            "--model",
            model.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(code, 4);
    }

    #[test]
    fn resolves_files_and_fixtures() {
        assert_eq!(resolve_model("M2SYM").unwrap(), fixtures::bundle("m2sym").unwrap());
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("m.toml");
        std::fs::write(&model, emit_model_config(&fixtures::bundle("bd5").unwrap())).unwrap();
        assert_eq!(resolve_model(model.to_str().unwrap()).unwrap(), fixtures::bundle("bd5").unwrap());
    }

    #[test]
    fn intertwining_on_fixtures() {
        for name in fixtures::NAMES {
            let s = Setup::new(fixtures::bundle(name).unwrap(), Solver::Auto).unwrap();
            let q = s.qprocess().unwrap();
            assert!(intertwining_error(&s, &q, &[0.5, 2.0]).unwrap() < 1e-9);
        }
    }
}
