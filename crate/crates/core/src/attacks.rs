//! Baseline model-poisoning attacks.
//!
//! All attacks implement [`Attack`] and only see an [`AttackContext`]; the
//! augmentation pipeline wraps any of them without knowing which one runs.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defenses::{krum_scores, krum_select};
use crate::nn::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("{attack} needs at least {needed} compromised updates, got {got}")]
    TooFewCompromised {
        attack: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("invalid {attack} knob: {msg}")]
    InvalidKnob { attack: &'static str, msg: String },
}

pub struct AttackContext<'a> {
    /// Base update the attack perturbs.
    pub reference_update: &'a ParamVector,
    /// Honest updates the compromised clients computed this round.
    pub compromised_updates: &'a [ParamVector],
    pub round: usize,
    /// Participants this round (benign and malicious).
    pub total_clients: usize,
}

impl AttackContext<'_> {
    pub fn malicious(&self) -> usize {
        self.compromised_updates.len()
    }
}

pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;
    fn craft(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> Result<ParamVector, AttackError>;
}

/// Coordinate-wise mean and population standard deviation.
fn mean_std(updates: &[ParamVector]) -> (ParamVector, ParamVector) {
    let mu = ParamVector::mean_of(updates);
    let mut var = ParamVector::zeros(mu.shape());
    for u in updates {
        for ((v, x), m) in var.as_mut_slice().iter_mut().zip(u.as_slice()).zip(mu.as_slice()) {
            *v += (x - m) * (x - m);
        }
    }
    let n = updates.len() as f64;
    let std = var.map(|v| (v / n).sqrt());
    (mu, std)
}

/// Returns `-scale * reference`.
#[derive(Clone, Debug)]
pub struct SignFlip {
    pub scale: f64,
}

impl Attack for SignFlip {
    fn name(&self) -> &'static str {
        "sign_flip"
    }

    fn craft(&self, ctx: &AttackContext<'_>, _rng: &mut dyn RngCore) -> Result<ParamVector, AttackError> {
        if !(self.scale > 0.0) {
            return Err(AttackError::InvalidKnob {
                attack: "sign_flip",
                msg: format!("scale must be > 0, got {}", self.scale),
            });
        }
        Ok(ctx.reference_update.scale(-self.scale))
    }
}

/// Full-knowledge-free Trim attack: each coordinate is drawn from
/// `[mu + low*sigma, mu + high*sigma]` when `mu < 0`, else from
/// `[mu - high*sigma, mu - low*sigma]`.
#[derive(Clone, Debug)]
pub struct TrimAttack {
    pub low: f64,
    pub high: f64,
}

impl Attack for TrimAttack {
    fn name(&self) -> &'static str {
        "trim"
    }

    fn craft(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> Result<ParamVector, AttackError> {
        if ctx.compromised_updates.is_empty() {
            return Err(AttackError::TooFewCompromised {
                attack: "trim",
                needed: 1,
                got: 0,
            });
        }
        if !(self.low >= 0.0 && self.high >= self.low) {
            return Err(AttackError::InvalidKnob {
                attack: "trim",
                msg: format!("need 0 <= low <= high, got [{}, {}]", self.low, self.high),
            });
        }
        let (mu, std) = mean_std(ctx.compromised_updates);
        let mut out = mu.clone();
        for (o, s) in out.as_mut_slice().iter_mut().zip(std.as_slice()) {
            if *s == 0.0 {
                continue;
            }
            let magnitude = rng.random_range(self.low..=self.high) * s;
            if *o < 0.0 {
                *o += magnitude;
            } else {
                *o -= magnitude;
            }
        }
        Ok(out)
    }
}

/// Krum attack: the largest `lambda` for which `m` copies of
/// `-lambda * s / |s|` (with `s` the mean compromised update) win a local Krum
/// election against the compromised updates.
#[derive(Clone, Debug)]
pub struct KrumAttack {
    pub lambda_max: f64,
    pub steps: usize,
    pub lambda_min: f64,
}

impl KrumAttack {
    /// Whether `candidate` would be picked by Krum over `m` copies of itself
    /// plus the compromised updates (copies come first, so they win ties).
    pub fn wins(&self, candidate: &ParamVector, compromised: &[ParamVector]) -> bool {
        let m = compromised.len();
        let mut pool = vec![candidate.clone(); m];
        pool.extend_from_slice(compromised);
        let selected = match krum_select(&pool, m) {
            Ok(i) => i,
            Err(_) => {
                let neighbors = pool.len().saturating_sub(m + 2).max(1);
                let scores = krum_scores(&pool, neighbors);
                let mut best = 0;
                for (i, s) in scores.iter().enumerate() {
                    if *s < scores[best] {
                        best = i;
                    }
                }
                best
            }
        };
        selected < m
    }

    pub fn search_lambda(&self, direction: &ParamVector, compromised: &[ParamVector]) -> Option<f64> {
        let works = |lambda: f64| self.wins(&direction.scale(-lambda), compromised);
        if works(self.lambda_max) {
            return Some(self.lambda_max);
        }
        let (mut lo, mut hi) = (0.0, self.lambda_max);
        for _ in 0..self.steps {
            let mid = 0.5 * (lo + hi);
            if works(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo > 0.0).then_some(lo)
    }
}

impl Attack for KrumAttack {
    fn name(&self) -> &'static str {
        "krum"
    }

    fn craft(&self, ctx: &AttackContext<'_>, rng: &mut dyn RngCore) -> Result<ParamVector, AttackError> {
        if ctx.compromised_updates.is_empty() {
            return Err(AttackError::TooFewCompromised {
                attack: "krum",
                needed: 1,
                got: 0,
            });
        }
        if !(self.lambda_max > 0.0) {
            return Err(AttackError::InvalidKnob {
                attack: "krum",
                msg: format!("lambda_max must be > 0, got {}", self.lambda_max),
            });
        }
        let s = ParamVector::mean_of(ctx.compromised_updates);
        let norm = s.norm();
        if norm == 0.0 {
            return SignFlip { scale: 1.0 }.craft(ctx, rng);
        }
        let direction = s.scale(1.0 / norm);
        let lambda = self
            .search_lambda(&direction, ctx.compromised_updates)
            .unwrap_or(self.lambda_min);
        Ok(direction.scale(-lambda))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `-std / |std|`
    #[default]
    Std,
    /// `-mean / |mean|`
    UnitVec,
    /// `-sign(mean)`
    Sign,
}

/// Min-Max attack: `mu + gamma * p` with the largest `gamma` keeping the
/// maximum distance to any compromised update within their maximum pairwise
/// distance.
#[derive(Clone, Debug)]
pub struct MinMaxAttack {
    pub gamma_max: f64,
    pub steps: usize,
    pub direction: Perturbation,
}

impl MinMaxAttack {
    pub fn perturbation(&self, updates: &[ParamVector]) -> ParamVector {
        let (mu, std) = mean_std(updates);
        let unit = |v: ParamVector| {
            let n = v.norm();
            if n == 0.0 {
                v
            } else {
                v.scale(-1.0 / n)
            }
        };
        match self.direction {
            Perturbation::Std => unit(std),
            Perturbation::UnitVec => unit(mu),
            Perturbation::Sign => mu.map(|v| -v.signum() * (v != 0.0) as u8 as f64),
        }
    }

    pub fn gamma(&self, updates: &[ParamVector], perturbation: &ParamVector) -> f64 {
        let mu = ParamVector::mean_of(updates);
        let mut threshold: f64 = 0.0;
        for i in 0..updates.len() {
            for k in i + 1..updates.len() {
                threshold = threshold.max(updates[i].dist(&updates[k]));
            }
        }
        let feasible = |gamma: f64| {
            let mut cand = mu.clone();
            cand.axpy(gamma, perturbation);
            updates.iter().all(|u| cand.dist(u) <= threshold)
        };
        if feasible(self.gamma_max) {
            return self.gamma_max;
        }
        let (mut lo, mut hi) = (0.0, self.gamma_max);
        for _ in 0..self.steps {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

impl Attack for MinMaxAttack {
    fn name(&self) -> &'static str {
        "min_max"
    }

    fn craft(&self, ctx: &AttackContext<'_>, _rng: &mut dyn RngCore) -> Result<ParamVector, AttackError> {
        if ctx.compromised_updates.len() < 2 {
            return Err(AttackError::TooFewCompromised {
                attack: "min_max",
                needed: 2,
                got: ctx.compromised_updates.len(),
            });
        }
        let p = self.perturbation(ctx.compromised_updates);
        let gamma = self.gamma(ctx.compromised_updates, &p);
        let mut out = ParamVector::mean_of(ctx.compromised_updates);
        out.axpy(gamma, &p);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    SignFlip,
    Trim,
    Krum,
    MinMax,
}

/// Attack selection and knobs as they appear under `attack.*` in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub scale: f64,
    pub trim_low: f64,
    pub trim_high: f64,
    pub lambda_max: f64,
    pub lambda_steps: usize,
    pub gamma_max: f64,
    pub gamma_steps: usize,
    pub perturbation: Perturbation,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            scale: 4.0,
            trim_low: 3.0,
            trim_high: 4.0,
            lambda_max: 5.0,
            lambda_steps: 30,
            gamma_max: 50.0,
            gamma_steps: 20,
            perturbation: Perturbation::Std,
        }
    }
}

impl AttackSpec {
    pub fn build(&self) -> Option<Box<dyn Attack>> {
        Some(match self.kind {
            AttackKind::None => return None,
            AttackKind::SignFlip => Box::new(SignFlip { scale: self.scale }),
            AttackKind::Trim => Box::new(TrimAttack {
                low: self.trim_low,
                high: self.trim_high,
            }),
            AttackKind::Krum => Box::new(KrumAttack {
                lambda_max: self.lambda_max,
                steps: self.lambda_steps,
                lambda_min: 1e-5,
            }),
            AttackKind::MinMax => Box::new(MinMaxAttack {
                gamma_max: self.gamma_max,
                steps: self.gamma_steps,
                direction: self.perturbation,
            }),
        })
    }
}
