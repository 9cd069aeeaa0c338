//! Finite absorbed Markov chains.
//!
//! A chain lives on `E = {0, .., n-1}` plus a cemetery state. It is described
//! by its sub-generator `L` (rates in 1/time): off-diagonal entries are jump
//! rates inside `E`, and the row deficit `kappa(x) = -sum_y L(x, y)` is the
//! killing rate towards the cemetery. The sub-Markov semigroup is
//! `P_t = exp(t L)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative tolerance on row sums, scaled by the largest rate.
const ROW_SUM_TOL: f64 = 1e-12;

/// A validated finite sub-Markov generator with its killing rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbedChain {
    states: Vec<String>,
    generator: DMatrix<f64>,
    killing: DVector<f64>,
}

impl AbsorbedChain {
    /// Validates `raw` and labels the states `1..=n`.
    pub fn new(raw: DMatrix<f64>) -> Result<Self> {
        let labels = (1..=raw.nrows()).map(|i| i.to_string()).collect();
        Self::with_labels(raw, labels)
    }

    pub fn with_labels(raw: DMatrix<f64>, states: Vec<String>) -> Result<Self> {
        let n = raw.nrows();
        if n == 0 || raw.ncols() != n {
            return Err(Error::Shape(format!(
                "sub-generator must be a non-empty square matrix, got {}x{}",
                n,
                raw.ncols()
            )));
        }
        if states.len() != n {
            return Err(Error::Shape(format!(
                "{} state labels for {} states",
                states.len(),
                n
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sub-generator has non-finite entries".into()));
        }
        let scale = raw.amax().max(f64::MIN_POSITIVE);
        let tol = ROW_SUM_TOL * scale;
        let mut killing = DVector::zeros(n);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = raw[(i, j)];
                if i != j && v < 0.0 {
                    return Err(Error::NegativeOffDiagonal { row: i, col: j, value: v });
                }
                sum += v;
            }
            if sum > tol {
                return Err(Error::PositiveRowSum { row: i, sum });
            }
            killing[i] = if sum < -tol { -sum } else { 0.0 };
        }
        if killing.iter().all(|&k| k == 0.0) {
            return Err(Error::NoKilling);
        }
        check_irreducible(&raw)?;
        Ok(Self {
            states,
            generator: raw,
            killing,
        })
    }

    pub fn len(&self) -> usize {
        self.generator.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn killing(&self) -> &DVector<f64> {
        &self.killing
    }

    /// Total exit rate `-L(x, x)` of state `x` (jumps plus killing).
    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.generator[(x, x)]
    }

    /// The same chain with every rate multiplied by `s` (time unit change).
    pub fn time_scaled(&self, s: f64) -> Result<Self> {
        Self::with_labels(&self.generator * s, self.states.clone())
    }
}

/// Strong connectivity of the graph of positive off-diagonal rates.
fn check_irreducible(l: &DMatrix<f64>) -> Result<()> {
    let n = l.nrows();
    let reach = |forward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(x) = queue.pop_front() {
            for y in 0..n {
                let rate = if forward { l[(x, y)] } else { l[(y, x)] };
                if x != y && rate > 0.0 && !seen[y] {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
        seen
    };
    if let Some(to) = reach(true).iter().position(|s| !s) {
        return Err(Error::Reducible { from: 0, to });
    }
    if let Some(from) = reach(false).iter().position(|s| !s) {
        return Err(Error::Reducible { from, to: 0 });
    }
    Ok(())
}

/// Validates a raw sub-generator.
pub fn validate_chain(raw: &DMatrix<f64>) -> Result<AbsorbedChain> {
    AbsorbedChain::new(raw.clone())
}

/// Birth-death chain on `{1..n}` absorbed at 0 through the death rate of state 1.
///
/// `birth[i]` is the rate `i -> i+1`, `death[i]` the rate `i -> i-1`
/// (0-based indices; `death[0]` is the killing rate).
pub fn build_birth_death(n: usize, birth: &[f64], death: &[f64]) -> Result<AbsorbedChain> {
    if n == 0 {
        return Err(Error::InvalidRates("n must be at least 1".into()));
    }
    if birth.len() != n || death.len() != n {
        return Err(Error::InvalidRates(format!(
            "expected {n} birth and death rates, got {} and {}",
            birth.len(),
            death.len()
        )));
    }
    if let Some(v) = birth.iter().chain(death).find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidRates(format!("rate {v} is negative or not finite")));
    }
    if death[0] <= 0.0 {
        return Err(Error::InvalidRates("death rate of state 1 must be positive".into()));
    }
    if birth[n - 1] != 0.0 {
        return Err(Error::InvalidRates("birth rate of the top state must be 0".into()));
    }
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        if i + 1 < n {
            l[(i, i + 1)] = birth[i];
        }
        if i > 0 {
            l[(i, i - 1)] = death[i];
        }
        l[(i, i)] = -(birth[i] + death[i]);
    }
    AbsorbedChain::new(l)
}

/// Weight function `psi_1 : E -> [1, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    psi1: DVector<f64>,
}

impl WeightFunction {
    pub fn new(psi1: DVector<f64>) -> Result<Self> {
        if let Some((i, v)) = psi1.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 1.0) {
            return Err(Error::Validation {
                field: "psi1".into(),
                message: format!("entry {i} = {v} must be finite and >= 1"),
            });
        }
        Ok(Self { psi1 })
    }

    /// The constant weight `psi_1 = 1`.
    pub fn ones(n: usize) -> Self {
        Self {
            psi1: DVector::from_element(n, 1.0),
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.psi1
    }
}

/// Initial probability law on `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    mu: DVector<f64>,
}

impl InitialLaw {
    pub fn new(mu: DVector<f64>) -> Result<Self> {
        if let Some((i, v)) = mu.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation {
                field: "mu".into(),
                message: format!("entry {i} = {v} must be finite and >= 0"),
            });
        }
        let total = mu.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation {
                field: "mu".into(),
                message: format!("entries sum to {total}, expected 1"),
            });
        }
        Ok(Self { mu })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            mu: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub fn dirac(n: usize, x: usize) -> Self {
        let mut mu = DVector::zeros(n);
        mu[x] = 1.0;
        Self { mu }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `mu(f)`.
    pub fn integrate(&self, f: &DVector<f64>) -> f64 {
        self.mu.dot(f)
    }
}

/// A chain together with the weight, initial law and observable used by the checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub chain: AbsorbedChain,
    pub psi1: WeightFunction,
    pub mu: InitialLaw,
    pub observable: DVector<f64>,
}

impl ModelBundle {
    pub fn new(
        chain: AbsorbedChain,
        psi1: WeightFunction,
        mu: InitialLaw,
        observable: DVector<f64>,
    ) -> Result<Self> {
        let n = chain.len();
        for (name, len) in [
            ("psi1", psi1.values().len()),
            ("mu", mu.values().len()),
            ("observable", observable.len()),
        ] {
            if len != n {
                return Err(Error::Validation {
                    field: name.into(),
                    message: format!("length {len} does not match {n} states"),
                });
            }
        }
        if observable.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                field: "observable".into(),
                message: "non-finite entry".into(),
            });
        }
        Ok(Self {
            chain,
            psi1,
            mu,
            observable,
        })
    }
}

/// Named fixtures with analytic ground truth.
pub mod fixtures {
    use super::*;

    /// `[[-2, 1], [1, -2]]`: lambda0 = 1, uniform QSD, constant eta, gap 2.
    pub fn m2sym() -> AbsorbedChain {
        AbsorbedChain::new(DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -2.0]))
            .expect("fixture is valid")
    }

    /// `[[-3, 1], [2, -3]]`: lambda0 = 3 - sqrt 2, gap 2 sqrt 2.
    pub fn m2asym() -> AbsorbedChain {
        AbsorbedChain::new(DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 2.0, -3.0]))
            .expect("fixture is valid")
    }

    /// Five-state birth-death chain with unit rates, absorbed below state 1.
    pub fn bd5() -> AbsorbedChain {
        build_birth_death(5, &[1.0, 1.0, 1.0, 1.0, 0.0], &[1.0; 5]).expect("fixture is valid")
    }

    /// Fixture bundles with their default initial law and observable.
    pub fn bundle(name: &str) -> Option<ModelBundle> {
        let (chain, mu, f) = match name.to_ascii_lowercase().as_str() {
            "m2sym" => (m2sym(), InitialLaw::uniform(2), DVector::from_vec(vec![1.0, -1.0])),
            "m2asym" => (m2asym(), InitialLaw::dirac(2, 0), DVector::from_vec(vec![1.0, -1.0])),
            "bd5" => {
                let mut f = DVector::zeros(5);
                f[0] = 1.0;
                (bd5(), InitialLaw::uniform(5), f)
            }
            _ => return None,
        };
        let n = chain.len();
        ModelBundle::new(chain, WeightFunction::ones(n), mu, f).ok()
    }

    pub const NAMES: [&str; 3] = ["m2sym", "m2asym", "bd5"];

    /// Random irreducible sub-generator on `n` states.
    ///
    /// A directed ring guarantees strong connectivity; other edges appear with
    /// probability 0.4. Killing is positive on at least one state.
    pub fn random_chain(n: usize, seed: u64) -> AbsorbedChain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if j == (i + 1) % n || rng.random::<f64>() < 0.4 {
                    l[(i, j)] = rng.random_range(0.1..2.0);
                }
            }
        }
        let forced = rng.random_range(0..n);
        for i in 0..n {
            let kill = if i == forced || rng.random::<f64>() < 0.3 {
                rng.random_range(0.05..1.0)
            } else {
                0.0
            };
            let out: f64 = (0..n).filter(|&j| j != i).map(|j| l[(i, j)]).sum();
            l[(i, i)] = -(out + kill);
        }
        AbsorbedChain::new(l).expect("random chain is valid by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::expm_t;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn symmetric_two_state() {
        let c = validate_chain(&dmatrix![-2.0, 1.0; 1.0, -2.0]).unwrap();
        assert_eq!(c.killing().as_slice(), &[1.0, 1.0]);
        assert_eq!(c.states(), &["1".to_string(), "2".to_string()]);
    }

    #[test]
    fn conservative_is_rejected() {
        assert_eq!(validate_chain(&dmatrix![-1.0, 1.0; 1.0, -1.0]), Err(Error::NoKilling));
    }

    #[test]
    fn reducible_is_rejected() {
        assert_eq!(
            validate_chain(&dmatrix![-2.0, 0.0; 1.0, -2.0]),
            Err(Error::Reducible { from: 0, to: 1 })
        );
        assert_eq!(
            validate_chain(&dmatrix![-2.0, 1.0; 0.0, -2.0]),
            Err(Error::Reducible { from: 1, to: 0 })
        );
    }

    #[test]
    fn sign_violations() {
        assert!(matches!(
            validate_chain(&dmatrix![-2.0, -1.0; 1.0, -2.0]),
            Err(Error::NegativeOffDiagonal { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            validate_chain(&dmatrix![-1.0, 2.0; 1.0, -2.0]),
            Err(Error::PositiveRowSum { row: 0, .. })
        ));
        assert!(matches!(
            validate_chain(&DMatrix::from_row_slice(2, 3, &[0.0; 6])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn birth_death_small_cases() {
        let c = build_birth_death(1, &[0.0], &[1.0]).unwrap();
        assert_eq!(c.generator(), &dmatrix![-1.0]);
        let c = build_birth_death(2, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.generator(), &dmatrix![-2.0, 1.0; 1.0, -1.0]);
        assert_eq!(c.killing().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn bd5_matches_hand_assembly() {
        let hand = dmatrix![
            -2.0, 1.0, 0.0, 0.0, 0.0;
            1.0, -2.0, 1.0, 0.0, 0.0;
            0.0, 1.0, -2.0, 1.0, 0.0;
            0.0, 0.0, 1.0, -2.0, 1.0;
            0.0, 0.0, 0.0, 1.0, -1.0
        ];
        let bd = fixtures::bd5();
        assert_eq!(bd.generator(), &hand);
        assert_eq!(validate_chain(&hand).unwrap(), bd);
    }

    #[test]
    fn birth_death_rejects_bad_rates() {
        assert!(matches!(build_birth_death(2, &[1.0, 0.0], &[0.0, 1.0]), Err(Error::InvalidRates(_))));
        assert!(matches!(build_birth_death(2, &[1.0, 1.0], &[1.0, 1.0]), Err(Error::InvalidRates(_))));
        assert!(matches!(build_birth_death(2, &[-1.0, 0.0], &[1.0, 1.0]), Err(Error::InvalidRates(_))));
    }

    #[test]
    fn initial_law_must_sum_to_one() {
        assert!(InitialLaw::new(DVector::from_vec(vec![0.5, 0.6])).is_err());
        assert!(InitialLaw::new(DVector::from_vec(vec![0.25, 0.75])).is_ok());
        assert!(WeightFunction::new(DVector::from_vec(vec![1.0, 0.5])).is_err());
    }

    proptest! {
        #[test]
        fn semigroup_is_sub_stochastic(n in 1usize..9, seed in any::<u64>()) {
            let chain = if n == 1 {
                AbsorbedChain::new(dmatrix![-0.7]).unwrap()
            } else {
                fixtures::random_chain(n, seed)
            };
            for &t in &[0.1, 1.0, 10.0] {
                let p = expm_t(chain.generator(), t).unwrap();
                for i in 0..n {
                    let mut row = 0.0;
                    for j in 0..n {
                        prop_assert!(p[(i, j)] >= -1e-14);
                        row += p[(i, j)];
                    }
                    prop_assert!(row <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn birth_death_always_validates(
            n in 1usize..10,
            rates in proptest::collection::vec(0.01f64..5.0, 20),
        ) {
            let mut birth: Vec<f64> = rates[..n].to_vec();
            birth[n - 1] = 0.0;
            let death: Vec<f64> = rates[10..10 + n].to_vec();
            let chain = build_birth_death(n, &birth, &death).unwrap();
            prop_assert_eq!(validate_chain(chain.generator()).unwrap(), chain);
        }
    }
}
