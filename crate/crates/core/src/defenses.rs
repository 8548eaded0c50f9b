//! Server-side aggregation rules.
//!
//! Every rule maps one round's client updates to a single global update plus a
//! per-client score and accept flag. Rules see client ids (for history-based
//! detection) but never whether a client is malicious.

use std::collections::{HashMap, VecDeque};

use log::warn;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DefenseError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("aggregation weights must be non-negative and not all zero")]
    BadWeights,
    #[error("{rule} needs at least {needed} updates, got {got}")]
    TooFewClients {
        rule: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("invalid {rule} parameter: {msg}")]
    InvalidParam { rule: &'static str, msg: String },
    #[error("{0} needs a server update from a non-empty root dataset")]
    MissingServerUpdate(&'static str),
}

type Result<T> = std::result::Result<T, DefenseError>;

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub global_update: ParamVector,
    pub scores: Vec<f64>,
    pub accepted: Vec<bool>,
}

fn non_empty(updates: &[ParamVector]) -> Result<()> {
    if updates.is_empty() {
        Err(DefenseError::NoUpdates)
    } else {
        Ok(())
    }
}

fn mean_of_indices(updates: &[ParamVector], idx: &[usize]) -> ParamVector {
    let picked: Vec<ParamVector> = idx.iter().map(|&i| updates[i].clone()).collect();
    ParamVector::mean_of(&picked)
}

fn distances_to(updates: &[ParamVector], center: &ParamVector) -> Vec<f64> {
    updates.iter().map(|u| u.dist(center)).collect()
}

pub fn fedavg(updates: &[ParamVector], weights: &[f64]) -> Result<AggregationResult> {
    non_empty(updates)?;
    if weights.len() != updates.len()
        || weights.iter().any(|w| !(*w >= 0.0))
        || weights.iter().sum::<f64>() <= 0.0
    {
        return Err(DefenseError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    let mut out = ParamVector::zeros(updates[0].shape());
    for (u, w) in updates.iter().zip(weights) {
        out.axpy(w / total, u);
    }
    Ok(AggregationResult {
        scores: distances_to(updates, &out),
        accepted: vec![true; updates.len()],
        global_update: out,
    })
}

/// Row-major `n x n` matrix of squared pairwise distances.
fn pairwise_sq(updates: &[ParamVector]) -> Vec<f64> {
    let n = updates.len();
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].sq_dist(&updates[j]);
            sq[i * n + j] = d;
            sq[j * n + i] = d;
        }
    }
    sq
}

/// Krum scores of the members of `subset`, using a precomputed distance matrix.
fn subset_scores(sq: &[f64], n: usize, subset: &[usize], neighbors: usize) -> Vec<f64> {
    subset
        .iter()
        .map(|&i| {
            let mut row: Vec<f64> = subset.iter().filter(|&&j| j != i).map(|&j| sq[i * n + j]).collect();
            row.sort_by(f64::total_cmp);
            row.iter().take(neighbors).sum()
        })
        .collect()
}

/// Krum score of every update: the sum of squared distances to its
/// `neighbors` nearest other updates.
pub fn krum_scores(updates: &[ParamVector], neighbors: usize) -> Vec<f64> {
    let n = updates.len();
    let all: Vec<usize> = (0..n).collect();
    subset_scores(&pairwise_sq(updates), n, &all, neighbors)
}

/// Position of the smallest value; lowest index on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn krum_neighbors(n: usize, m: usize) -> Result<usize> {
    if n < m + 3 {
        return Err(DefenseError::TooFewClients {
            rule: "krum",
            needed: m + 3,
            got: n,
        });
    }
    Ok(n - m - 2)
}

pub fn krum_select(updates: &[ParamVector], m: usize) -> Result<usize> {
    let neighbors = krum_neighbors(updates.len(), m)?;
    Ok(argmin(&krum_scores(updates, neighbors)))
}

pub fn krum(updates: &[ParamVector], m: usize) -> Result<AggregationResult> {
    let neighbors = krum_neighbors(updates.len(), m)?;
    let scores = krum_scores(updates, neighbors);
    let winner = argmin(&scores);
    let mut accepted = vec![false; updates.len()];
    accepted[winner] = true;
    Ok(AggregationResult {
        global_update: updates[winner].clone(),
        scores,
        accepted,
    })
}

/// Repeated Krum selection on a shrinking set. The neighbor count follows the
/// set size (`n - m - 2`, kept within `[1, n - 1]`). Returns the chosen
/// indices in selection order.
fn iterative_krum(updates: &[ParamVector], m: usize, count: usize) -> Vec<usize> {
    let n = updates.len();
    let sq = pairwise_sq(updates);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut chosen = Vec::with_capacity(count);
    while chosen.len() < count && !remaining.is_empty() {
        let pick = if remaining.len() == 1 {
            0
        } else {
            let neighbors = remaining
                .len()
                .saturating_sub(m + 2)
                .clamp(1, remaining.len() - 1);
            argmin(&subset_scores(&sq, n, &remaining, neighbors))
        };
        chosen.push(remaining.remove(pick));
    }
    chosen
}

pub fn multi_krum(updates: &[ParamVector], m: usize, c: usize) -> Result<AggregationResult> {
    let neighbors = krum_neighbors(updates.len(), m)?;
    if c == 0 || c > updates.len() {
        return Err(DefenseError::InvalidParam {
            rule: "mkrum",
            msg: format!("candidate count {c} not in 1..={}", updates.len()),
        });
    }
    let winners = iterative_krum(updates, m, c);
    let mut accepted = vec![false; updates.len()];
    for &w in &winners {
        accepted[w] = true;
    }
    Ok(AggregationResult {
        global_update: mean_of_indices(updates, &winners),
        scores: krum_scores(updates, neighbors),
        accepted,
    })
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Applies `f` to the sorted column of every coordinate.
fn per_coordinate(updates: &[ParamVector], f: impl Fn(&[f64]) -> f64) -> ParamVector {
    let d = updates[0].len();
    let mut col = vec![0.0; updates.len()];
    let mut out = ParamVector::zeros(updates[0].shape());
    for j in 0..d {
        for (c, u) in col.iter_mut().zip(updates) {
            *c = u.as_slice()[j];
        }
        col.sort_by(f64::total_cmp);
        out.as_mut_slice()[j] = f(&col);
    }
    out
}

pub fn coord_median(updates: &[ParamVector]) -> Result<AggregationResult> {
    non_empty(updates)?;
    let out = per_coordinate(updates, median_sorted);
    Ok(AggregationResult {
        scores: distances_to(updates, &out),
        accepted: vec![true; updates.len()],
        global_update: out,
    })
}

pub fn trim_mean(updates: &[ParamVector], b: usize) -> Result<AggregationResult> {
    non_empty(updates)?;
    if 2 * b >= updates.len() {
        return Err(DefenseError::InvalidParam {
            rule: "trim",
            msg: format!("2b = {} must be below K = {}", 2 * b, updates.len()),
        });
    }
    let keep = updates.len() - 2 * b;
    let out = per_coordinate(updates, |col| col[b..b + keep].iter().sum::<f64>() / keep as f64);
    Ok(AggregationResult {
        scores: distances_to(updates, &out),
        accepted: vec![true; updates.len()],
        global_update: out,
    })
}

/// Bulyan: `theta = K - 2m` candidates by iterative Krum, then per coordinate
/// the mean of the `theta - 2m` candidate values closest to their median.
/// `relaxed` admits `K < 4m + 3` as long as at least one value survives.
pub fn bulyan(updates: &[ParamVector], m: usize, relaxed: bool) -> Result<AggregationResult> {
    non_empty(updates)?;
    let k = updates.len();
    if k < 4 * m + 3 {
        if !relaxed || k < 2 * m + 3 {
            return Err(DefenseError::TooFewClients {
                rule: "bulyan",
                needed: if relaxed { 2 * m + 3 } else { 4 * m + 3 },
                got: k,
            });
        }
        warn!("bulyan: K = {k} < 4m + 3 = {}, running relaxed", 4 * m + 3);
    }
    let theta = k - 2 * m;
    let beta = theta.saturating_sub(2 * m).max(1);
    let selected = iterative_krum(updates, m, theta);

    let d = updates[0].len();
    let mut out = ParamVector::zeros(updates[0].shape());
    let mut col: Vec<f64> = vec![0.0; theta];
    for j in 0..d {
        for (c, &i) in col.iter_mut().zip(&selected) {
            *c = updates[i].as_slice()[j];
        }
        col.sort_by(f64::total_cmp);
        let med = median_sorted(&col);
        let mut by_gap = col.clone();
        by_gap.sort_by(|a, b| (a - med).abs().total_cmp(&(b - med).abs()));
        out.as_mut_slice()[j] = by_gap[..beta].iter().sum::<f64>() / beta as f64;
    }
    let mut accepted = vec![false; k];
    for &i in &selected {
        accepted[i] = true;
    }
    Ok(AggregationResult {
        scores: krum_scores(updates, k.saturating_sub(m + 2).max(1)),
        global_update: out,
        accepted,
    })
}

/// Weighted average of client updates rescaled to the server update's norm.
fn trust_weighted(
    updates: &[ParamVector],
    server: &ParamVector,
    trust: Vec<f64>,
) -> AggregationResult {
    let server_norm = server.norm();
    let total: f64 = trust.iter().sum();
    let mut out = ParamVector::zeros(server.shape());
    if total > 0.0 {
        for (u, &ts) in updates.iter().zip(&trust) {
            let n = u.norm();
            if ts > 0.0 && n > 0.0 {
                out.axpy(ts * server_norm / (n * total), u);
            }
        }
    }
    AggregationResult {
        global_update: out,
        accepted: trust.iter().map(|&t| t > 0.0).collect(),
        scores: trust,
    }
}

pub fn fltrust(updates: &[ParamVector], server_update: &ParamVector) -> Result<AggregationResult> {
    non_empty(updates)?;
    let trust = updates
        .iter()
        .map(|u| u.cosine(server_update).max(0.0))
        .collect();
    Ok(trust_weighted(updates, server_update, trust))
}

/// Trust score `ReLU(cos / dist)` against the server update. A client that
/// coincides with the server update (distance 0) receives the round's largest
/// finite score, or 1 when no finite score exists.
pub fn dstrust(updates: &[ParamVector], server_update: &ParamVector) -> Result<AggregationResult> {
    non_empty(updates)?;
    let raw: Vec<Option<f64>> = updates
        .iter()
        .map(|u| {
            let dist = u.dist(server_update);
            (dist > 0.0).then(|| (u.cosine(server_update) / dist).max(0.0))
        })
        .collect();
    let cap = raw
        .iter()
        .flatten()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .filter(|&m| m > 0.0)
        .unwrap_or(1.0);
    let trust = raw.into_iter().map(|s| s.unwrap_or(cap)).collect();
    Ok(trust_weighted(updates, server_update, trust))
}

/// Top right-singular direction of `matrix` by power iteration on `AᵀA`.
/// Returns the zero vector when `AᵀA` annihilates the start vector.
pub fn top_singular_direction<R: Rng + ?Sized>(
    matrix: ArrayView2<'_, f64>,
    iters: usize,
    rng: &mut R,
) -> Array1<f64> {
    let mut v: Array1<f64> = Array1::from_shape_fn(matrix.ncols(), |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v /= norm;
    for _ in 0..iters {
        let av = matrix.dot(&v);
        let mut next = matrix.t().dot(&av);
        let n = next.dot(&next).sqrt();
        if n == 0.0 {
            return Array1::zeros(matrix.ncols());
        }
        next /= n;
        v = next;
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DncParams {
    pub iters: usize,
    pub subsample: usize,
    pub power_iters: usize,
    pub filter_frac: f64,
}

impl Default for DncParams {
    fn default() -> Self {
        DncParams {
            iters: 5,
            subsample: 1000,
            power_iters: 50,
            filter_frac: 1.0,
        }
    }
}

/// Divide-and-conquer outlier filtering on random coordinate subsets.
pub fn dnc<R: Rng + ?Sized>(
    updates: &[ParamVector],
    m: usize,
    params: &DncParams,
    rng: &mut R,
) -> Result<AggregationResult> {
    non_empty(updates)?;
    let k = updates.len();
    if k <= m {
        return Err(DefenseError::TooFewClients {
            rule: "dnc",
            needed: m + 1,
            got: k,
        });
    }
    let d = updates[0].len();
    let sub = params.subsample.min(d).max(1);
    let drop = ((params.filter_frac * m as f64).ceil() as usize).min(k);
    let mut rejected = vec![false; k];
    let mut last_scores = vec![0.0; k];

    for _ in 0..params.iters {
        let mut coords = index::sample(rng, d, sub).into_vec();
        coords.sort_unstable();
        let mut x = Array2::from_shape_fn((k, sub), |(i, j)| updates[i].as_slice()[coords[j]]);
        let mu = x.mean_axis(ndarray::Axis(0)).unwrap();
        x -= &mu;
        let v = top_singular_direction(x.view(), params.power_iters, rng);
        let scores: Vec<f64> = x.dot(&v).iter().map(|p| p * p).collect();
        if scores.iter().all(|&s| s == 0.0) {
            last_scores = scores;
            continue;
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for &i in &order[..drop] {
            rejected[i] = true;
        }
        last_scores = scores;
    }

    let survivors: Vec<usize> = (0..k).filter(|&i| !rejected[i]).collect();
    if survivors.is_empty() {
        warn!("dnc rejected every client; falling back to coordinate median");
        let mut res = coord_median(updates)?;
        res.accepted = vec![false; k];
        return Ok(res);
    }
    Ok(AggregationResult {
        global_update: mean_of_indices(updates, &survivors),
        scores: last_scores,
        accepted: rejected.iter().map(|r| !r).collect(),
    })
}

/// Optimal 1-D two-means split. Returns `None` when the two cluster means are
/// closer than `1e-9` (one cluster); otherwise a flag per value, `true` for the
/// higher cluster.
pub fn two_means_1d(values: &[f64]) -> Option<Vec<bool>> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut best: Option<(f64, usize)> = None;
    for split in 1..n {
        let (lo, hi) = sorted.split_at(split);
        let sse = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let cost = sse(lo) + sse(hi);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, split));
        }
    }
    let split = best?.1;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if mean(&sorted[split..]) - mean(&sorted[..split]) < 1e-9 {
        return None;
    }
    let mut high = vec![false; n];
    for &i in &order[split..] {
        high[i] = true;
    }
    Some(high)
}

/// First-order consistency detector (`fld-lite`): a client whose update keeps
/// changing between rounds relative to its peers is rejected.
#[derive(Clone, Debug, Default)]
pub struct FlDetector {
    window: usize,
    previous: HashMap<usize, ParamVector>,
    history: HashMap<usize, VecDeque<f64>>,
    rounds_seen: usize,
}

impl FlDetector {
    pub fn new(window: usize) -> Self {
        FlDetector {
            window: window.max(1),
            ..Default::default()
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn aggregate(
        &mut self,
        client_ids: &[usize],
        updates: &[ParamVector],
        weights: &[f64],
    ) -> Result<AggregationResult> {
        non_empty(updates)?;
        let dists: Vec<Option<f64>> = client_ids
            .iter()
            .zip(updates)
            .map(|(id, u)| self.previous.get(id).map(|p| u.dist(p)))
            .collect();
        let mut known: Vec<f64> = dists.iter().flatten().copied().collect();
        known.sort_by(f64::total_cmp);
        if !known.is_empty() {
            let med = median_sorted(&known);
            for (id, d) in client_ids.iter().zip(&dists) {
                if let Some(d) = d {
                    let normalized = if med > 0.0 { d / med } else { 0.0 };
                    let h = self.history.entry(*id).or_default();
                    h.push_back(normalized);
                    while h.len() > self.window {
                        h.pop_front();
                    }
                }
            }
            self.rounds_seen += 1;
        }
        for (id, u) in client_ids.iter().zip(updates) {
            self.previous.insert(*id, u.clone());
        }

        if self.rounds_seen < 2 {
            return fedavg(updates, weights);
        }
        let raw: Vec<Option<f64>> = client_ids
            .iter()
            .map(|id| {
                self.history
                    .get(id)
                    .filter(|h| !h.is_empty())
                    .map(|h| h.iter().sum::<f64>() / h.len() as f64)
            })
            .collect();
        let mut present: Vec<f64> = raw.iter().flatten().copied().collect();
        present.sort_by(f64::total_cmp);
        let fill = if present.is_empty() { 1.0 } else { median_sorted(&present) };
        let scores: Vec<f64> = raw.into_iter().map(|s| s.unwrap_or(fill)).collect();

        let accepted: Vec<bool> = match two_means_1d(&scores) {
            Some(high) => high.iter().map(|h| !h).collect(),
            None => vec![true; updates.len()],
        };
        let survivors: Vec<usize> = (0..updates.len()).filter(|&i| accepted[i]).collect();
        Ok(AggregationResult {
            global_update: mean_of_indices(updates, &survivors),
            scores,
            accepted,
        })
    }
}

/// `flame-lite`: cosine-distance 2-means filtering, median-norm clipping and
/// Gaussian noise proportional to the clipping bound.
pub fn flame<R: Rng + ?Sized>(
    updates: &[ParamVector],
    noise_lambda: f64,
    rng: &mut R,
) -> Result<AggregationResult> {
    let k = updates.len();
    if k < 3 {
        return Err(DefenseError::TooFewClients {
            rule: "flame-lite",
            needed: 3,
            got: k,
        });
    }
    let mean_dist: Vec<f64> = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| 1.0 - updates[i].cosine(&updates[j]))
                .sum::<f64>()
                / (k - 1) as f64
        })
        .collect();
    let accepted: Vec<bool> = match two_means_1d(&mean_dist) {
        None => vec![true; k],
        Some(high) => {
            let n_high = high.iter().filter(|h| **h).count();
            // keep the larger cluster; on a tie keep the tighter (low) one
            let keep_high = n_high > k - n_high;
            high.iter().map(|&h| h == keep_high).collect()
        }
    };
    let kept: Vec<usize> = (0..k).filter(|&i| accepted[i]).collect();
    let mut norms: Vec<f64> = kept.iter().map(|&i| updates[i].norm()).collect();
    norms.sort_by(f64::total_cmp);
    let bound = median_sorted(&norms);

    let mut out = ParamVector::zeros(updates[0].shape());
    for &i in &kept {
        let n = updates[i].norm();
        let s = if n > bound && n > 0.0 { bound / n } else { 1.0 };
        out.axpy(s / kept.len() as f64, &updates[i]);
    }
    let sigma = noise_lambda * bound;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
    Ok(AggregationResult {
        global_update: out,
        scores: mean_dist,
        accepted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Fedavg,
    Krum,
    Mkrum,
    Median,
    Trim,
    Bulyan,
    Fltrust,
    Dstrust,
    Dnc,
    FldLite,
    FlameLite,
}

impl DefenseKind {
    pub fn needs_server_update(self) -> bool {
        matches!(self, DefenseKind::Fltrust | DefenseKind::Dstrust)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Multi-Krum candidate count; `K - m` when unset.
    pub mkrum_c: Option<usize>,
    /// Trimmed-mean trim count per side; `m` when unset.
    pub trim_b: Option<usize>,
    pub bulyan_relaxed: bool,
    pub dnc: DncParams,
    pub fld_window: usize,
    pub flame_noise: f64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        DefenseSpec {
            kind: DefenseKind::Fedavg,
            mkrum_c: None,
            trim_b: None,
            bulyan_relaxed: false,
            dnc: DncParams::default(),
            fld_window: 10,
            flame_noise: 0.001,
        }
    }
}

/// Everything a rule may look at in one round.
pub struct RoundInput<'a> {
    pub client_ids: &'a [usize],
    pub updates: &'a [ParamVector],
    /// FedAvg weights, normally shard sizes.
    pub weights: &'a [f64],
    /// Update the server computed on its root dataset (FLTrust/DSTrust).
    pub server_update: Option<&'a ParamVector>,
    /// Number of malicious clients the server assumes among the participants.
    pub assumed_malicious: usize,
}

/// A configured rule together with the state it keeps across rounds.
#[derive(Clone, Debug)]
pub struct Defense {
    spec: DefenseSpec,
    detector: FlDetector,
}

impl Defense {
    pub fn new(spec: DefenseSpec) -> Self {
        let detector = FlDetector::new(spec.fld_window);
        Defense { spec, detector }
    }

    pub fn spec(&self) -> &DefenseSpec {
        &self.spec
    }

    pub fn aggregate<R: Rng + ?Sized>(
        &mut self,
        input: &RoundInput<'_>,
        rng: &mut R,
    ) -> Result<AggregationResult> {
        let updates = input.updates;
        let m = input.assumed_malicious;
        non_empty(updates)?;
        match self.spec.kind {
            DefenseKind::Fedavg => fedavg(updates, input.weights),
            DefenseKind::Krum => krum(updates, m),
            DefenseKind::Mkrum => {
                let c = self.spec.mkrum_c.unwrap_or(updates.len().saturating_sub(m)).min(updates.len());
                multi_krum(updates, m, c)
            }
            DefenseKind::Median => coord_median(updates),
            DefenseKind::Trim => trim_mean(updates, self.spec.trim_b.unwrap_or(m)),
            DefenseKind::Bulyan => bulyan(updates, m, self.spec.bulyan_relaxed),
            DefenseKind::Fltrust => fltrust(
                updates,
                input.server_update.ok_or(DefenseError::MissingServerUpdate("fltrust"))?,
            ),
            DefenseKind::Dstrust => dstrust(
                updates,
                input.server_update.ok_or(DefenseError::MissingServerUpdate("dstrust"))?,
            ),
            DefenseKind::Dnc => dnc(updates, m, &self.spec.dnc, rng),
            DefenseKind::FldLite => self.detector.aggregate(input.client_ids, updates, input.weights),
            DefenseKind::FlameLite => flame(updates, self.spec.flame_noise, rng),
        }
    }
}
