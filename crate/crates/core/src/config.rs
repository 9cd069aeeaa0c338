//! Model files.
//!
//! A model file is TOML with the following keys:
//!
//! ```toml
//! states = ["a", "b"]                      # optional labels
//! generator = [[-2.0, 1.0], [1.0, -2.0]]   # row-major sub-generator
//! psi1 = [1.0, 1.0]                        # optional, default 1
//! mu = [0.5, 0.5]                          # optional, default uniform
//! observable = [1.0, -1.0]                 # optional, default indicator of the first state
//! ```
//!
//! Instead of `generator`, a `[birth_death]` table with `n`, `birth` and
//! `death` arrays may be given. Exactly one of the two must be present.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{build_birth_death, AbsorbedChain, InitialLaw, ModelBundle, WeightFunction};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    birth_death: Option<RawBirthDeath>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observable: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawBirthDeath {
    n: usize,
    birth: Vec<f64>,
    death: Vec<f64>,
}

fn line_col(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    format!("line {line}, column {col}")
}

/// Parses a model from TOML text.
pub fn parse_model_config(text: &str) -> Result<ModelBundle> {
    let raw: RawModel = toml::from_str(text).map_err(|e| Error::Parse {
        message: e.message().to_string(),
        location: e.span().map(|s| line_col(text, s.start)),
    })?;

    let chain = match (raw.generator, raw.birth_death) {
        (Some(_), Some(_)) => {
            return Err(Error::Parse {
                message: "`generator` and `birth_death` are mutually exclusive".into(),
                location: None,
            })
        }
        (None, None) => {
            return Err(Error::Parse {
                message: "one of `generator` or `birth_death` is required".into(),
                location: None,
            })
        }
        (Some(rows), None) => {
            let n = rows.len();
            if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
                return Err(Error::Validation {
                    field: "generator".into(),
                    message: format!("row {i} has {} entries, expected {n}", r.len()),
                });
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            AbsorbedChain::new(DMatrix::from_row_slice(n, n, &flat))?
        }
        (None, Some(bd)) => build_birth_death(bd.n, &bd.birth, &bd.death)?,
    };
    let chain = match raw.states {
        Some(labels) => AbsorbedChain::with_labels(chain.generator().clone(), labels)?,
        None => chain,
    };
    let n = chain.len();
    let vector = |field: &str, v: Vec<f64>| -> Result<DVector<f64>> {
        if v.len() != n {
            return Err(Error::Validation {
                field: field.into(),
                message: format!("length {} does not match {n} states", v.len()),
            });
        }
        Ok(DVector::from_vec(v))
    };
    let psi1 = match raw.psi1 {
        Some(v) => WeightFunction::new(vector("psi1", v)?)?,
        None => WeightFunction::ones(n),
    };
    let mu = match raw.mu {
        Some(v) => InitialLaw::new(vector("mu", v)?)?,
        None => InitialLaw::uniform(n),
    };
    let observable = match raw.observable {
        Some(v) => vector("observable", v)?,
        None => {
            let mut f = DVector::zeros(n);
            f[0] = 1.0;
            f
        }
    };
    ModelBundle::new(chain, psi1, mu, observable)
}

/// Reads and validates a model file.
pub fn load_model_config(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_model_config(&text)
}

/// Serializes a bundle in the explicit `generator` form.
pub fn emit_model_config(bundle: &ModelBundle) -> String {
    let l = bundle.chain.generator();
    let n = l.nrows();
    let raw = RawModel {
        states: Some(bundle.chain.states().to_vec()),
        generator: Some((0..n).map(|i| l.row(i).iter().copied().collect()).collect()),
        birth_death: None,
        psi1: Some(bundle.psi1.values().iter().copied().collect()),
        mu: Some(bundle.mu.values().iter().copied().collect()),
        observable: Some(bundle.observable.iter().copied().collect()),
    };
    toml::to_string(&raw).expect("model serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::fixtures;
    use proptest::prelude::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let b = parse_model_config("generator = [[-2.0, 1.0], [1.0, -2.0]]\n").unwrap();
        assert_eq!(b.psi1, WeightFunction::ones(2));
        assert_eq!(b.mu, InitialLaw::uniform(2));
        assert_eq!(b.observable.as_slice(), &[1.0, 0.0]);
        assert_eq!(b.chain, fixtures::m2sym());
    }

    #[test]
    fn birth_death_block_matches_builder() {
        let text = "[birth_death]\nn = 5\nbirth = [1.0, 1.0, 1.0, 1.0, 0.0]\ndeath = [1.0, 1.0, 1.0, 1.0, 1.0]\n";
        let b = parse_model_config(text).unwrap();
        let reference = fixtures::bd5();
        let ours: Vec<u64> = b.chain.generator().iter().map(|v| v.to_bits()).collect();
        let theirs: Vec<u64> = reference.generator().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ours, theirs);
    }

    #[test]
    fn mu_must_sum_to_one() {
        let err = parse_model_config("generator = [[-2.0, 1.0], [1.0, -2.0]]\nmu = [0.3, 0.3]\n")
            .unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "mu"), "{err}");
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = parse_model_config("generator = [[-2.0, 1.0],\n  [1.0, oops]]\n").unwrap_err();
        match err {
            Error::Parse { location: Some(loc), .. } => assert!(loc.starts_with("line 2"), "{loc}"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_model_config("generator = [[-1.0]]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn generator_errors_are_delegated() {
        let err = parse_model_config("generator = [[-1.0, 1.0], [1.0, -1.0]]\n").unwrap_err();
        assert_eq!(err, Error::NoKilling);
        let err = parse_model_config("mu = [1.0]\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    proptest! {
        #[test]
        fn emit_then_load_is_identity(n in 2usize..8, seed in any::<u64>(), w in 1.0f64..10.0) {
            let chain = fixtures::random_chain(n, seed);
            let weights = DVector::from_fn(n, |i, _| (i + 1) as f64);
            let mu = InitialLaw::new(&weights / weights.sum()).unwrap();
            let psi1 = WeightFunction::new(DVector::from_fn(n, |i, _| w + i as f64 / 3.0)).unwrap();
            let f = DVector::from_fn(n, |i, _| ((i as f64) * 0.37).sin());
            let bundle = ModelBundle::new(chain, psi1, mu, f).unwrap();
            let text = emit_model_config(&bundle);
            prop_assert_eq!(parse_model_config(&text).unwrap(), bundle);
        }
    }
}
