use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::chain::{AbsorbedChain, InitialLaw};
use crate::qprocess::QProcessChain;

/// Jump target standing for the cemetery state.
const CEMETERY: usize = usize::MAX;

/// Random stream of one replica.
///
/// ChaCha8 keyed by `seed_from_u64(seed)`, with the replica index as the
/// 64-bit stream id and the block counter starting at zero. Every replica
/// therefore draws from its own counter-addressed sequence, whatever thread
/// runs it.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// A sample path on `[0, t_max]`, stopped at absorption.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub jump_times: Vec<f64>,
    /// `visited_states[i]` is occupied on `[jump_times[i-1], jump_times[i])`.
    pub visited_states: Vec<usize>,
    /// `None` when the path is still alive at `t_max`.
    pub absorption_time: Option<f64>,
    pub t_max: f64,
}

impl Trajectory {
    pub fn survived(&self) -> bool {
        self.absorption_time.is_none()
    }

    /// End of the observed window, `min(t_max, tau)`.
    pub fn end(&self) -> f64 {
        self.absorption_time.unwrap_or(self.t_max)
    }

    /// `int_0^{min(t_max, tau)} f(X_s) ds`, summed sojourn by sojourn.
    pub fn additive_integral(&self, f: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        let mut enter = 0.0;
        for (i, &x) in self.visited_states.iter().enumerate() {
            let leave = self.jump_times.get(i).copied().unwrap_or_else(|| self.end());
            acc += f[x] * (leave - enter);
            enter = leave;
        }
        acc
    }

    /// State occupied at time `t`, or `None` after absorption or past `t_max`.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        if t < 0.0 || t > self.t_max || self.absorption_time.is_some_and(|a| t >= a) {
            return None;
        }
        let i = self.jump_times.partition_point(|&s| s <= t);
        Some(self.visited_states[i])
    }
}

#[derive(Debug, Clone)]
struct Exits {
    total: f64,
    targets: Vec<usize>,
    cumulative: Vec<f64>,
}

/// Precomputed holding rates and jump tables of a (sub-)generator.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    exits: Vec<Exits>,
}

impl JumpSampler {
    fn from_rates(generator: &DMatrix<f64>, killing: Option<&DVector<f64>>) -> Self {
        let n = generator.nrows();
        let exits = (0..n)
            .map(|x| {
                let mut targets = Vec::new();
                let mut cumulative = Vec::new();
                let mut acc = 0.0;
                let mut push = |target: usize, rate: f64| {
                    if rate > 0.0 {
                        acc += rate;
                        targets.push(target);
                        cumulative.push(acc);
                    }
                };
                for y in (0..n).filter(|&y| y != x) {
                    push(y, generator[(x, y)]);
                }
                if let Some(k) = killing {
                    push(CEMETERY, k[x]);
                }
                Exits {
                    total: acc,
                    targets,
                    cumulative,
                }
            })
            .collect();
        Self { exits }
    }

    pub fn absorbed(chain: &AbsorbedChain) -> Self {
        Self::from_rates(chain.generator(), Some(chain.killing()))
    }

    pub fn conservative(qproc: &QProcessChain) -> Self {
        Self::from_rates(&qproc.q_generator, None)
    }

    pub fn len(&self) -> usize {
        self.exits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exits.is_empty()
    }

    /// Destination of one jump out of `x`; `None` means absorption.
    pub fn jump<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Option<usize> {
        let e = &self.exits[x];
        let u = rng.random::<f64>() * e.total;
        let i = e.cumulative.partition_point(|&c| c <= u).min(e.targets.len() - 1);
        match e.targets[i] {
            CEMETERY => None,
            y => Some(y),
        }
    }

    /// Runs the chain from `start` up to `t_max`, reporting every sojourn as
    /// `(state, enter, leave)`. Returns the absorption time if it comes first.
    pub fn walk<R: Rng + ?Sized>(
        &self,
        start: usize,
        t_max: f64,
        rng: &mut R,
        mut sojourn: impl FnMut(usize, f64, f64),
    ) -> Option<f64> {
        let mut x = start;
        let mut now = 0.0;
        loop {
            let e = &self.exits[x];
            let hold = if e.total > 0.0 {
                rng.sample::<f64, _>(Exp1) / e.total
            } else {
                f64::INFINITY
            };
            let leave = now + hold;
            if leave >= t_max {
                sojourn(x, now, t_max);
                return None;
            }
            sojourn(x, now, leave);
            match self.jump(x, rng) {
                Some(y) => x = y,
                None => return Some(leave),
            }
            now = leave;
        }
    }

    pub fn trajectory<R: Rng + ?Sized>(&self, start: usize, t_max: f64, rng: &mut R) -> Trajectory {
        let mut jump_times = Vec::new();
        let mut visited_states = Vec::new();
        let absorption_time = self.walk(start, t_max, rng, |x, enter, _| {
            if !visited_states.is_empty() {
                jump_times.push(enter);
            }
            visited_states.push(x);
        });
        Trajectory {
            jump_times,
            visited_states,
            absorption_time,
            t_max,
        }
    }

    /// `S_{t_max} = int_0^{t_max} f(X_s) ds`, or `None` if the path is absorbed first.
    pub fn additive<R: Rng + ?Sized>(
        &self,
        start: usize,
        f: &DVector<f64>,
        t_max: f64,
        rng: &mut R,
    ) -> Option<f64> {
        let mut acc = 0.0;
        let absorbed = self.walk(start, t_max, rng, |x, enter, leave| acc += f[x] * (leave - enter));
        absorbed.is_none().then_some(acc)
    }
}

/// Cumulative table of a probability vector, for inverse-CDF draws.
#[derive(Debug, Clone)]
pub struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn new(weights: &DVector<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w.max(0.0);
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty law");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Exact simulation of the absorbed chain started from `mu`.
pub fn simulate_absorbed<R: Rng + ?Sized>(
    chain: &AbsorbedChain,
    mu: &InitialLaw,
    t_max: f64,
    rng: &mut R,
) -> Trajectory {
    let start = Categorical::new(mu.values()).sample(rng);
    JumpSampler::absorbed(chain).trajectory(start, t_max, rng)
}

/// Exact simulation of the Q-process started from the law `initial`.
pub fn simulate_qprocess<R: Rng + ?Sized>(
    qproc: &QProcessChain,
    initial: &DVector<f64>,
    t_max: f64,
    rng: &mut R,
) -> Trajectory {
    let start = Categorical::new(initial).sample(rng);
    JumpSampler::conservative(qproc).trajectory(start, t_max, rng)
}
