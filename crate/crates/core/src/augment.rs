//! The malicious coalition's per-round pipeline.
//!
//! Stages, in order: pill (re)search, extra training on the pooled coalition
//! data, the wrapped attack restricted to the pill, insertion into the
//! estimated benign update with disconnection, then similarity- and
//! distance-based magnitude adjustment.

use log::{debug, warn};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{Attack, AttackContext, AttackError};
use crate::data::LabeledDataset;
use crate::nn::{sgd_train, DenseNet, NnError, ParamVector, TrainOptions};
use crate::pill::{Blueprint, PatternState, PillError, PillMasks, RoundCtx, SearchOptions};
use crate::rng::{derive_rng, derive_seed, stream};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("coalition has no members this round")]
    NoMembers,
    #[error("coalition has no training data")]
    EmptyData,
    #[error("invalid augmentation parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Train(#[from] NnError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Pill(#[from] PillError),
}

type Result<T> = std::result::Result<T, AugmentError>;

/// Knobs under `augment.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub enabled: bool,
    pub c_up: f64,
    pub c_down: f64,
    pub c_iter: usize,
    /// Extra-training epochs; `m * E` when unset.
    pub e_extra: Option<usize>,
    pub jitter: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            enabled: false,
            c_up: 2.0,
            c_down: 0.5,
            c_iter: 20,
            e_extra: None,
            jitter: 0.0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_up > 1.0) {
            return Err(AugmentError::InvalidParams(format!("c_up must be > 1, got {}", self.c_up)));
        }
        if !(self.c_down > 0.0 && self.c_down < 1.0) {
            return Err(AugmentError::InvalidParams(format!(
                "c_down must be in (0, 1), got {}",
                self.c_down
            )));
        }
        if self.c_iter == 0 {
            return Err(AugmentError::InvalidParams("c_iter must be >= 1".into()));
        }
        if self.e_extra == Some(0) {
            return Err(AugmentError::InvalidParams("e_extra must be >= 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(AugmentError::InvalidParams("jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// Extra-training epochs for `m` members with `epochs` local epochs each,
    /// capped at `m * epochs`.
    pub fn extra_epochs(&self, m: usize, epochs: usize) -> usize {
        let cap = (m * epochs).max(1);
        match self.e_extra {
            None => cap,
            Some(e) if e > cap => {
                warn!("e_extra = {e} exceeds m * E = {cap}; capping");
                cap
            }
            Some(e) => e,
        }
    }
}

/// `g_t - (g_t trained for `epochs` epochs on the pooled coalition data)`.
pub fn extra_train(
    global: &DenseNet,
    pooled: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    if pooled.is_empty() {
        return Err(AugmentError::EmptyData);
    }
    let opts = TrainOptions {
        epochs,
        lr,
        batch_size,
    };
    let (_, update) = sgd_train(global, pooled.features(), pooled.labels(), opts, seed)?;
    Ok(update)
}

/// Coordinate-wise mean of the coalition's honest updates.
pub fn estimate_benign(normal_updates: &[ParamVector]) -> Result<ParamVector> {
    if normal_updates.is_empty() {
        return Err(AugmentError::NoMembers);
    }
    Ok(ParamVector::mean_of(normal_updates))
}

/// Runs `attack` unmodified and keeps only the pill coordinates.
pub fn pill_poison(
    attack: &dyn Attack,
    ctx: &AttackContext<'_>,
    pill_mask: &ParamVector,
    rng: &mut dyn RngCore,
) -> Result<ParamVector> {
    Ok(attack.craft(ctx, rng)?.hadamard(pill_mask))
}

/// Disconnection update: moves every parameter toward zero by at most the
/// value range of `reference` (`clamp(g_t, min ref, max ref)` under the
/// `g <- g - update` convention).
pub fn disconnection_update(global: &ParamVector, reference: &ParamVector) -> ParamVector {
    let (lo, hi) = (reference.min_value().min(0.0), reference.max_value().max(0.0));
    global.map(|g| g.clamp(lo, hi))
}

/// Inserts the poisoned pill into the benign estimate and overwrites the
/// disconnection coordinates.
pub fn inject(
    poisoned: &ParamVector,
    benign_estimate: &ParamVector,
    global: &ParamVector,
    masks: &PillMasks,
    reference: &ParamVector,
) -> ParamVector {
    let zero = disconnection_update(global, reference);
    let mut out = poisoned.clone();
    let (m, disc) = (masks.pill.as_slice(), masks.disc.as_slice());
    for (j, o) in out.as_mut_slice().iter_mut().enumerate() {
        if disc[j] != 0.0 {
            *o = zero.as_slice()[j];
        } else if m[j] == 0.0 {
            *o += benign_estimate.as_slice()[j];
        }
    }
    out
}

/// Alternately shrinks the `M_all` part (even iterations) and grows the rest
/// (odd iterations) until the cosine with the benign estimate reaches the best
/// honest cosine, or `c_iter` iterations are spent. Returns the adjusted update
/// and the number of iterations used.
pub fn sim_adjust(
    update: &ParamVector,
    benign_estimate: &ParamVector,
    normal_updates: &[ParamVector],
    m_all: &ParamVector,
    c_up: f64,
    c_down: f64,
    c_iter: usize,
) -> (ParamVector, usize) {
    let s_max = normal_updates
        .iter()
        .map(|u| benign_estimate.cosine(u))
        .fold(0.0, f64::max);
    let mut out = update.clone();
    let mut iter = 0;
    while benign_estimate.cosine(&out) < s_max && iter < c_iter {
        let (inside, outside) = if iter % 2 == 1 { (1.0, c_up) } else { (c_down, 1.0) };
        for (o, &m) in out.as_mut_slice().iter_mut().zip(m_all.as_slice()) {
            *o *= if m != 0.0 { inside } else { outside };
        }
        iter += 1;
    }
    (out, iter)
}

/// Scales the whole update by one factor (`c_down` or `c_up`, whichever first
/// brings it closer to the benign estimate) while it is still at least the
/// largest honest distance away and each step strictly reduces the distance.
/// Returns the adjusted update and the number of accepted steps.
pub fn dist_adjust(
    update: &ParamVector,
    benign_estimate: &ParamVector,
    normal_updates: &[ParamVector],
    c_up: f64,
    c_down: f64,
) -> (ParamVector, usize) {
    let dist_max = normal_updates
        .iter()
        .map(|u| u.dist(benign_estimate))
        .fold(0.0, f64::max);
    let mut out = update.clone();
    let mut dist = out.dist(benign_estimate);
    let c = if out.scale(c_down).dist(benign_estimate) < out.scale(c_up).dist(benign_estimate) {
        c_down
    } else {
        c_up
    };
    let mut steps = 0;
    while dist >= dist_max {
        let next = out.scale(c);
        let next_dist = next.dist(benign_estimate);
        if !(next_dist < dist) {
            break;
        }
        out = next;
        dist = next_dist;
        steps += 1;
    }
    (out, steps)
}

/// Intermediate results of one coalition round.
#[derive(Clone, Debug)]
pub struct CoalitionRoundPlan {
    pub masks: PillMasks,
    pub m_all: ParamVector,
    /// Extra-trained reference update handed to the attack.
    pub reference: ParamVector,
    pub benign_estimate: ParamVector,
    pub normal_updates: Vec<ParamVector>,
    pub poisoned: ParamVector,
    pub injected: ParamVector,
    pub sim_adjusted: ParamVector,
    pub sim_iterations: usize,
    pub dist_steps: usize,
    pub upload: ParamVector,
}

/// One compromised client taking part in the round.
pub struct Member<'a> {
    pub client_id: usize,
    pub data: &'a LabeledDataset,
}

pub struct CoalitionInput<'a> {
    pub global: &'a DenseNet,
    pub members: &'a [Member<'a>],
    pub round: usize,
    pub participants: usize,
    /// Benign local training settings (`E`, `lr`, batch size).
    pub train: TrainOptions,
    pub master_seed: u64,
    /// `g_{t-1} - g_t`, absent in the first round.
    pub last_global_update: Option<&'a ParamVector>,
}

/// Honest local update of client `id` in `round`; benign clients use the same
/// seed derivation.
pub fn honest_update(
    global: &DenseNet,
    data: &LabeledDataset,
    train: TrainOptions,
    master_seed: u64,
    client_id: usize,
    round: usize,
) -> Result<ParamVector> {
    let seed = derive_seed(master_seed, &[stream::LOCAL_TRAIN, client_id as u64, round as u64]);
    let (_, update) = sgd_train(global, data.features(), data.labels(), train, seed)?;
    Ok(update)
}

/// Coalition controller: owns the pattern state and the fixed start neuron.
pub struct Coalition {
    params: AugmentParams,
    blueprint: Option<Blueprint>,
    search: SearchOptions,
    pattern: Option<PatternState>,
    start_neuron: Option<usize>,
    last_upload: Option<ParamVector>,
}

impl Coalition {
    /// `blueprint`/`pattern` are only needed when augmentation is enabled.
    pub fn new(
        params: AugmentParams,
        blueprint: Option<Blueprint>,
        pattern: Option<PatternState>,
        search: SearchOptions,
    ) -> Result<Self> {
        params.validate()?;
        if params.enabled && (blueprint.is_none() || pattern.is_none()) {
            return Err(AugmentError::InvalidParams(
                "augmentation needs a blueprint and a pattern state".into(),
            ));
        }
        Ok(Coalition {
            params,
            blueprint,
            search,
            pattern,
            start_neuron: None,
            last_upload: None,
        })
    }

    pub fn params(&self) -> &AugmentParams {
        &self.params
    }

    pub fn start_neuron(&self) -> Option<usize> {
        self.start_neuron
    }

    /// Uploads for every member (in member order). Without an attack the
    /// members behave honestly; without augmentation the raw attack output,
    /// computed with the benign estimate as reference, is uploaded.
    pub fn round(
        &mut self,
        attack: Option<&dyn Attack>,
        input: &CoalitionInput<'_>,
    ) -> Result<(Vec<ParamVector>, Option<CoalitionRoundPlan>)> {
        if input.members.is_empty() {
            return Err(AugmentError::NoMembers);
        }
        let normal: Vec<ParamVector> = input
            .members
            .iter()
            .map(|mem| {
                honest_update(input.global, mem.data, input.train, input.master_seed, mem.client_id, input.round)
            })
            .collect::<Result<_>>()?;
        let Some(attack) = attack else {
            return Ok((normal, None));
        };

        if !self.params.enabled {
            let benign = estimate_benign(&normal)?;
            let ctx = AttackContext {
                reference_update: &benign,
                compromised_updates: &normal,
                round: input.round,
                total_clients: input.participants,
            };
            // each member runs the attack itself, with its own randomness
            let uploads = input
                .members
                .iter()
                .map(|mem| {
                    let mut rng = derive_rng(
                        input.master_seed,
                        &[stream::ATTACK, input.round as u64, mem.client_id as u64],
                    );
                    attack.craft(&ctx, &mut rng)
                })
                .collect::<std::result::Result<_, _>>()?;
            return Ok((uploads, None));
        }

        let mut attack_rng = derive_rng(input.master_seed, &[stream::ATTACK, input.round as u64]);
        let plan = self.augmented(attack, input, normal, &mut attack_rng)?;
        let m = input.members.len();
        let uploads = if self.params.jitter > 0.0 {
            let mut rng = derive_rng(input.master_seed, &[stream::JITTER, input.round as u64]);
            (0..m)
                .map(|_| {
                    let mut u = plan.upload.clone();
                    for (x, &mask) in u.as_mut_slice().iter_mut().zip(plan.m_all.as_slice()) {
                        if mask == 0.0 {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *x *= 1.0 + self.params.jitter * z;
                        }
                    }
                    u
                })
                .collect()
        } else {
            vec![plan.upload.clone(); m]
        };
        self.last_upload = Some(plan.upload.clone());
        Ok((uploads, Some(plan)))
    }

    fn augmented(
        &mut self,
        attack: &dyn Attack,
        input: &CoalitionInput<'_>,
        normal: Vec<ParamVector>,
        attack_rng: &mut dyn RngCore,
    ) -> Result<CoalitionRoundPlan> {
        let blueprint = self.blueprint.as_ref().expect("checked in new");
        let pattern = self.pattern.as_mut().expect("checked in new");
        let start = *self.start_neuron.get_or_insert_with(|| {
            let width = input.global.layer_dims()[1];
            derive_rng(input.master_seed, &[stream::PILL_START]).random_range(0..width)
        });

        let ctx = RoundCtx {
            round: input.round,
            global_update: input.last_global_update,
            my_update: self.last_upload.as_ref(),
        };
        let masks = pattern.advance(input.global, blueprint, start, &ctx, self.search)?.clone();
        let m_all = masks.all();

        let m = input.members.len();
        let parts: Vec<&LabeledDataset> = input.members.iter().map(|mem| mem.data).collect();
        let pooled = concat(&parts);
        let epochs = self.params.extra_epochs(m, input.train.epochs);
        let extra_seed = derive_seed(input.master_seed, &[stream::EXTRA_TRAIN, input.round as u64]);
        let reference = extra_train(
            input.global,
            &pooled,
            epochs,
            input.train.lr,
            input.train.batch_size,
            extra_seed,
        )?;

        let ctx = AttackContext {
            reference_update: &reference,
            compromised_updates: &normal,
            round: input.round,
            total_clients: input.participants,
        };
        let poisoned = pill_poison(attack, &ctx, &masks.pill, attack_rng)?;
        let benign_estimate = estimate_benign(&normal)?;
        let injected = inject(&poisoned, &benign_estimate, input.global.params(), &masks, &reference);
        let p = &self.params;
        let (sim_adjusted, sim_iterations) =
            sim_adjust(&injected, &benign_estimate, &normal, &m_all, p.c_up, p.c_down, p.c_iter);
        let (upload, dist_steps) = dist_adjust(&sim_adjusted, &benign_estimate, &normal, p.c_up, p.c_down);
        debug!(
            "round {}: pill |M| = {}, |M_disc| = {}, sim iters {sim_iterations}, dist steps {dist_steps}",
            input.round,
            masks.pill.count_nonzero(),
            masks.disc.count_nonzero()
        );

        Ok(CoalitionRoundPlan {
            masks,
            m_all,
            reference,
            benign_estimate,
            normal_updates: normal,
            poisoned,
            injected,
            sim_adjusted,
            sim_iterations,
            dist_steps,
            upload,
        })
    }
}

fn concat(parts: &[&LabeledDataset]) -> LabeledDataset {
    let dim = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut features = ndarray::Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for part in parts {
        for i in 0..part.len() {
            features.row_mut(row).assign(&part.features().row(i));
            labels.push(part.labels()[i]);
            row += 1;
        }
    }
    LabeledDataset::new(features, labels, parts[0].num_classes()).expect("consistent parts")
}
