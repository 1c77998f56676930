//! Gross-contamination adversaries acting on the per-round gradient matrix.
//!
//! Each round the adversary picks `floor(psi * b)` rows (a fresh uniform
//! draw every round when `dynamic`, otherwise one draw reused for the whole
//! run) and rewrites them. Clean rows are never touched.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{pairwise_row_sum, GradMatrix};
use crate::rng::RngStream;

pub const DEFAULT_GAUSSIAN_STD: f64 = 10.0;
pub const DEFAULT_BIT_FLIP_SCALE: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    #[default]
    None,
    /// Adds i.i.d. `N(0, std^2)` to every coordinate of a corrupt row.
    AdditiveGaussian { std: f64 },
    /// Replaces a corrupt row `g` by `scale * g`.
    ScaledBitFlip { scale: f64 },
    /// Corrupt rows share `-(sum of clean rows) / |B|`, so the row mean is zero.
    NegSum,
}

impl Attack {
    pub fn additive_gaussian() -> Self {
        Attack::AdditiveGaussian {
            std: DEFAULT_GAUSSIAN_STD,
        }
    }

    pub fn scaled_bit_flip() -> Self {
        Attack::ScaledBitFlip {
            scale: DEFAULT_BIT_FLIP_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Attack::AdditiveGaussian { std } if !(std > 0.0 && std.is_finite()) => {
                Err(invalid("std", "must be positive and finite"))
            }
            Attack::ScaledBitFlip { scale } if !scale.is_finite() => {
                Err(invalid("scale", "must be finite"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub psi: f64,
    pub attack: Attack,
    pub dynamic: bool,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            psi: 0.0,
            attack: Attack::None,
            dynamic: true,
        }
    }
}

impl CorruptionSpec {
    pub fn new(psi: f64, attack: Attack, dynamic: bool) -> Result<Self> {
        let spec = Self {
            psi,
            attack,
            dynamic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.psi) {
            return Err(invalid("psi", "must lie in [0, 0.5)"));
        }
        self.attack.validate()
    }

    /// `floor(psi * b)`.
    pub fn num_corrupt(&self, b: usize) -> usize {
        // The epsilon absorbs products such as 0.29 * 100 = 28.999999999999996.
        ((self.psi * b as f64) + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionOutcome {
    /// Sorted.
    pub corrupt: Vec<usize>,
    /// Sorted; disjoint from `corrupt`, together they cover `0..b`.
    pub clean: Vec<usize>,
}

impl CorruptionOutcome {
    pub fn none(b: usize) -> Self {
        Self {
            corrupt: Vec::new(),
            clean: (0..b).collect(),
        }
    }

    fn from_corrupt(b: usize, mut corrupt: Vec<usize>) -> Self {
        corrupt.sort_unstable();
        let mut is_bad = vec![false; b];
        for &i in &corrupt {
            is_bad[i] = true;
        }
        let clean = (0..b).filter(|&i| !is_bad[i]).collect();
        Self { corrupt, clean }
    }

    /// `|B| / |G|`.
    pub fn alpha(&self) -> f64 {
        self.corrupt.len() as f64 / self.clean.len() as f64
    }
}

/// A stateful adversary: remembers its victims when corruption is static.
#[derive(Debug, Clone)]
pub struct Adversary {
    spec: CorruptionSpec,
    rng: RngStream,
    fixed: Option<Vec<usize>>,
}

impl Adversary {
    pub fn new(spec: CorruptionSpec, rng: RngStream) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng,
            fixed: None,
        })
    }

    pub fn spec(&self) -> &CorruptionSpec {
        &self.spec
    }

    /// Picks the corrupt rows for round `t` out of `b`.
    pub fn choose_victims(&mut self, b: usize, t: u64) -> Result<CorruptionOutcome> {
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let count = self.spec.num_corrupt(b);
        if self.spec.dynamic {
            let victims = sample_without_replacement(&mut self.rng, b, count);
            return Ok(CorruptionOutcome::from_corrupt(b, victims));
        }
        if t == 0 || self.fixed.is_none() {
            self.fixed = Some(sample_without_replacement(&mut self.rng, b, count));
        }
        let fixed = self.fixed.clone().expect("drawn above");
        if fixed.iter().any(|&i| i >= b) {
            return Err(invalid("b", "batch size changed under static corruption"));
        }
        Ok(CorruptionOutcome::from_corrupt(b, fixed))
    }

    /// Chooses victims for round `t` and rewrites them.
    pub fn corrupt(&mut self, g: &GradMatrix, t: u64) -> Result<(GradMatrix, CorruptionOutcome)> {
        let outcome = self.choose_victims(g.rows(), t)?;
        let attack = self.spec.attack;
        let out = apply_gradient_attack(g, &outcome, &attack, &mut self.rng)?;
        Ok((out, outcome))
    }
}

/// Partial Fisher-Yates: `count` distinct indices from `0..n`, uniformly.
fn sample_without_replacement(rng: &mut RngStream, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Rewrites the corrupt rows of `g`; clean rows are copied bit-exactly.
pub fn apply_gradient_attack(
    g: &GradMatrix,
    outcome: &CorruptionOutcome,
    attack: &Attack,
    rng: &mut RngStream,
) -> Result<GradMatrix> {
    let b = g.rows();
    let d = g.cols();
    if outcome.corrupt.len() + outcome.clean.len() != b
        || outcome.corrupt.iter().chain(&outcome.clean).any(|&i| i >= b)
    {
        return Err(invalid("outcome", "does not partition the rows of G"));
    }
    attack.validate()?;
    if outcome.corrupt.is_empty() || matches!(attack, Attack::None) {
        return Ok(g.clone());
    }
    let mut data = g.as_slice().to_vec();
    match *attack {
        Attack::None => {}
        Attack::AdditiveGaussian { std } => {
            for &i in &outcome.corrupt {
                for v in &mut data[i * d..(i + 1) * d] {
                    *v += std * rng.normal();
                }
            }
        }
        Attack::ScaledBitFlip { scale } => {
            for &i in &outcome.corrupt {
                for v in &mut data[i * d..(i + 1) * d] {
                    *v *= scale;
                }
            }
        }
        Attack::NegSum => {
            let clean = g.select_rows(&outcome.clean)?;
            let sum = if outcome.clean.is_empty() {
                vec![0.0; d]
            } else {
                pairwise_row_sum(clean.as_slice(), d)
            };
            let share = outcome.corrupt.len() as f64;
            for &i in &outcome.corrupt {
                for (v, s) in data[i * d..(i + 1) * d].iter_mut().zip(&sum) {
                    *v = -s / share;
                }
            }
        }
    }
    GradMatrix::new(b, d, data)
}
