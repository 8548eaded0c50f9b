//! Pill construction: blueprint, layer-wise subnet search and the two masks.
//!
//! Layers are numbered `1..=L` here (linear layer `i` is `nn` layer `i - 1`),
//! and "neurons of layer `i`" are the output units of linear layer `i`. The
//! pill is a thin input-to-output path: one start neuron in layer 1, the
//! blueprint's number of neurons in every further hidden layer, and a one-to-one
//! pairing between the selected layer `L - 1` neurons and the outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{DenseNet, ParamVector, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PillError {
    #[error("pill search needs at least 3 linear layers, got {0}")]
    TooFewLayers(usize),
    #[error("layer L-1 has {width} neurons, fewer than {classes} classes")]
    NarrowPenultimate { width: usize, classes: usize },
    #[error("output layer has {outputs} neurons but the task has {classes} classes")]
    OutputMismatch { outputs: usize, classes: usize },
    #[error("start neuron {start} out of range for {width} first-layer neurons")]
    StartOutOfRange { start: usize, width: usize },
    #[error("pattern id {0} not in 1..=6")]
    InvalidPattern(u8),
    #[error("FE/CLS boundary {boundary} must be in 1..{layers}")]
    InvalidBoundary { boundary: usize, layers: usize },
}

type Result<T> = std::result::Result<T, PillError>;

/// Pill width per linear layer (index 0 is layer 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blueprint {
    widths: Vec<usize>,
}

impl Blueprint {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Width of layer `i` (1-based).
    pub fn width(&self, layer: usize) -> usize {
        self.widths[layer - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }
}

/// One neuron in every layer before `L - 1`, `num_classes` neurons in the
/// last two layers.
pub fn build_blueprint(layer_dims: &[usize], num_classes: usize) -> Result<Blueprint> {
    let layers = layer_dims.len().saturating_sub(1);
    if layers < 3 {
        return Err(PillError::TooFewLayers(layers));
    }
    let outputs = layer_dims[layers];
    if outputs != num_classes {
        return Err(PillError::OutputMismatch {
            outputs,
            classes: num_classes,
        });
    }
    let penultimate = layer_dims[layers - 1];
    if penultimate < num_classes {
        return Err(PillError::NarrowPenultimate {
            width: penultimate,
            classes: num_classes,
        });
    }
    let widths = (1..=layers)
        .map(|i| if i < layers - 1 { 1 } else { num_classes })
        .collect();
    Ok(Blueprint { widths })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchOrder {
    /// Rank by largest weight sum ("approximate max pill search").
    #[default]
    Max,
    /// Rank by smallest weight sum.
    Min,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchOptions {
    pub order: SearchOrder,
    /// Rank raw weight sums instead of sums of magnitudes.
    pub signed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PillMasks {
    /// `M`: the pill's own parameters.
    pub pill: ParamVector,
    /// `M_disc`: connections between the pill and the rest of the model.
    pub disc: ParamVector,
    /// `V_1..V_L`; hidden layers in rank order, outputs ascending.
    pub selected: Vec<Vec<usize>>,
    pub start_neuron: usize,
    /// Number of weight terms summed while ranking.
    pub search_evaluations: usize,
}

impl PillMasks {
    /// Masks with empty support (no pill).
    pub fn empty(shape: &Shape) -> Self {
        PillMasks {
            pill: ParamVector::zeros(shape),
            disc: ParamVector::zeros(shape),
            selected: Vec::new(),
            start_neuron: 0,
            search_evaluations: 0,
        }
    }

    /// `M_all = M + M_disc`
    pub fn all(&self) -> ParamVector {
        &self.pill + &self.disc
    }

    pub fn shape(&self) -> &Shape {
        self.pill.shape()
    }
}

/// Layer `i`'s neurons ranked by their summed incoming weights from `prev`.
/// Returns the top `count` and the number of weight terms read.
fn rank_layer(
    net: &DenseNet,
    layer: usize,
    prev: &[usize],
    count: usize,
    opts: SearchOptions,
) -> (Vec<usize>, usize) {
    let w = net.weights(layer - 1);
    let scores: Vec<f64> = (0..w.nrows())
        .map(|n| {
            prev.iter()
                .map(|&u| if opts.signed { w[[n, u]] } else { w[[n, u]].abs() })
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match opts.order {
        SearchOrder::Max => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        SearchOrder::Min => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    order.truncate(count);
    (order, scores.len() * prev.len())
}

/// Re-runs the layer-wise search for layers `from..=to` (both within
/// `2..=L-1`), seeding from the current `V_{from-1}` and keeping every other
/// layer's selection.
fn search_range(
    net: &DenseNet,
    blueprint: &Blueprint,
    selected: &mut [Vec<usize>],
    from: usize,
    to: usize,
    opts: SearchOptions,
) -> usize {
    let mut evaluations = 0;
    for layer in from..=to {
        let (picked, evals) = rank_layer(net, layer, &selected[layer - 2], blueprint.width(layer), opts);
        selected[layer - 1] = picked;
        evaluations += evals;
    }
    evaluations
}

/// Builds `M` and `M_disc` from the neuron selections `V_1..V_L`.
pub fn build_masks(shape: &Shape, selected: &[Vec<usize>]) -> (ParamVector, ParamVector) {
    let layers = shape.num_layers();
    let mut pill = ParamVector::zeros(shape);
    let mut disc = ParamVector::zeros(shape);
    {
        let m = pill.as_mut_slice();
        let d = disc.as_mut_slice();

        for &v in &selected[0] {
            for col in 0..shape.fan_in(0) {
                m[shape.weight_index(0, v, col)] = 1.0;
            }
            m[shape.bias_index(0, v)] = 1.0;
        }
        for layer in 2..layers {
            let (prev, cur) = (&selected[layer - 2], &selected[layer - 1]);
            let idx = layer - 1;
            for row in 0..shape.fan_out(idx) {
                let row_in = cur.contains(&row);
                for col in 0..shape.fan_in(idx) {
                    let col_in = prev.contains(&col);
                    let at = shape.weight_index(idx, row, col);
                    match (row_in, col_in) {
                        (true, true) => m[at] = 1.0,
                        (true, false) | (false, true) => d[at] = 1.0,
                        (false, false) => {}
                    }
                }
            }
            for &v in cur {
                m[shape.bias_index(idx, v)] = 1.0;
            }
        }
        let mut paired = selected[layers - 2].clone();
        paired.sort_unstable();
        let out = layers - 1;
        for (k, &v) in paired.iter().enumerate() {
            for row in 0..shape.fan_out(out) {
                let at = shape.weight_index(out, row, v);
                if row == k {
                    m[at] = 1.0;
                } else {
                    d[at] = 1.0;
                }
            }
        }
    }
    (pill, disc)
}

fn finish(
    net: &DenseNet,
    mut selected: Vec<Vec<usize>>,
    start_neuron: usize,
    search_evaluations: usize,
) -> PillMasks {
    let layers = net.num_layers();
    selected[layers - 1] = (0..net.num_classes()).collect();
    let (pill, disc) = build_masks(net.shape(), &selected);
    PillMasks {
        pill,
        disc,
        selected,
        start_neuron,
        search_evaluations,
    }
}

fn check(net: &DenseNet, blueprint: &Blueprint, start: usize) -> Result<()> {
    let layers = net.num_layers();
    if layers < 3 || blueprint.num_layers() != layers {
        return Err(PillError::TooFewLayers(layers));
    }
    let width = net.layer_dims()[1];
    if start >= width {
        return Err(PillError::StartOutOfRange { start, width });
    }
    Ok(())
}

pub fn pill_search(
    net: &DenseNet,
    blueprint: &Blueprint,
    start_neuron: usize,
    opts: SearchOptions,
) -> Result<PillMasks> {
    check(net, blueprint, start_neuron)?;
    let layers = net.num_layers();
    let mut selected = vec![Vec::new(); layers];
    selected[0] = vec![start_neuron];
    let evals = search_range(net, blueprint, &mut selected, 2, layers - 1, opts);
    Ok(finish(net, selected, start_neuron, evals))
}

pub fn max_pill_search(net: &DenseNet, blueprint: &Blueprint, start_neuron: usize) -> Result<PillMasks> {
    pill_search(net, blueprint, start_neuron, SearchOptions::default())
}

pub fn min_pill_search(net: &DenseNet, blueprint: &Blueprint, start_neuron: usize) -> Result<PillMasks> {
    let opts = SearchOptions {
        order: SearchOrder::Min,
        signed: false,
    };
    pill_search(net, blueprint, start_neuron, opts)
}

/// Adaptive trigger: the masked global update and the masked own update have
/// cosine similarity below `c_search` (zero vectors count as similarity 0).
pub fn should_research(
    masks: &PillMasks,
    global_update: &ParamVector,
    my_update: &ParamVector,
    c_search: f64,
) -> bool {
    let a = masks.pill.hadamard(global_update);
    let b = masks.pill.hadamard(my_update);
    a.cosine(&b) < c_search
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    OneTime,
    Repeated,
    Adaptive,
}

/// Searching strategies of the feature-extractor and classifier segments.
pub fn pattern_strategies(pattern: u8) -> Result<(Strategy, Strategy)> {
    use Strategy::*;
    Ok(match pattern {
        1 => (Adaptive, Adaptive),
        2 => (OneTime, OneTime),
        3 => (Adaptive, Repeated),
        4 => (Repeated, Adaptive),
        5 => (Adaptive, OneTime),
        6 => (OneTime, Adaptive),
        other => return Err(PillError::InvalidPattern(other)),
    })
}

fn strategy_fires(strategy: Strategy, round: usize, similarity: Option<f64>, c_search: f64) -> bool {
    if round == 0 {
        return true;
    }
    match strategy {
        Strategy::OneTime => false,
        Strategy::Repeated => true,
        Strategy::Adaptive => similarity.is_none_or(|s| s < c_search),
    }
}

/// Per-round inputs to the pattern controller.
#[derive(Clone, Copy, Debug, Default)]
pub struct RoundCtx<'a> {
    pub round: usize,
    /// Last aggregated global update (`g_{t-1} - g_t`).
    pub global_update: Option<&'a ParamVector>,
    /// The coalition's own upload from the previous round.
    pub my_update: Option<&'a ParamVector>,
}

#[derive(Clone, Debug)]
pub struct PatternState {
    pub pattern: u8,
    /// Last FE layer; layers `2..=fe_boundary` are FE, the rest CLS.
    pub fe_boundary: usize,
    pub c_search: f64,
    pub last_masks: Option<PillMasks>,
}

impl PatternState {
    pub fn new(pattern: u8, fe_boundary: usize, c_search: f64, layers: usize) -> Result<Self> {
        pattern_strategies(pattern)?;
        if fe_boundary == 0 || fe_boundary >= layers {
            return Err(PillError::InvalidBoundary {
                boundary: fe_boundary,
                layers,
            });
        }
        Ok(PatternState {
            pattern,
            fe_boundary,
            c_search,
            last_masks: None,
        })
    }

    /// `ceil(L / 2)`
    pub fn default_boundary(layers: usize) -> usize {
        layers.div_ceil(2)
    }

    /// Similarity used by the adaptive trigger, if it can be computed.
    pub fn similarity(&self, ctx: &RoundCtx<'_>) -> Option<f64> {
        let masks = self.last_masks.as_ref()?;
        let (g, mine) = (ctx.global_update?, ctx.my_update?);
        Some(masks.pill.hadamard(g).cosine(&masks.pill.hadamard(mine)))
    }

    /// Which segments to re-search this round: `(fe, cls)`.
    pub fn step(&self, ctx: &RoundCtx<'_>) -> Result<(bool, bool)> {
        let (fe, cls) = pattern_strategies(self.pattern)?;
        let sim = self.similarity(ctx);
        let first = ctx.round == 0 || self.last_masks.is_none();
        let round = if first { 0 } else { ctx.round };
        Ok((
            strategy_fires(fe, round, sim, self.c_search),
            strategy_fires(cls, round, sim, self.c_search),
        ))
    }

    /// Runs [`PatternState::step`] and re-searches the flagged segments.
    pub fn advance(
        &mut self,
        net: &DenseNet,
        blueprint: &Blueprint,
        start_neuron: usize,
        ctx: &RoundCtx<'_>,
        opts: SearchOptions,
    ) -> Result<&PillMasks> {
        let (search_fe, search_cls) = self.step(ctx)?;
        let layers = net.num_layers();
        let masks = match self.last_masks.take() {
            Some(prev) if !(search_fe && search_cls) => {
                let mut selected = prev.selected.clone();
                let mut evals = 0;
                let fe_end = self.fe_boundary.min(layers - 1);
                if search_fe && fe_end >= 2 {
                    evals += search_range(net, blueprint, &mut selected, 2, fe_end, opts);
                }
                if search_cls && self.fe_boundary < layers - 1 {
                    let from = self.fe_boundary + 1;
                    evals += search_range(net, blueprint, &mut selected, from.max(2), layers - 1, opts);
                }
                if search_fe || search_cls {
                    finish(net, selected, start_neuron, evals)
                } else {
                    prev
                }
            }
            _ => pill_search(net, blueprint, start_neuron, opts)?,
        };
        self.last_masks = Some(masks);
        Ok(self.last_masks.as_ref().unwrap())
    }
}

/// Expected `|M|` for a blueprint: input fan-in of the start neurons, the
/// hidden-to-hidden pill edges, the output pairing and the hidden pill biases.
pub fn expected_pill_size(layer_dims: &[usize], blueprint: &Blueprint) -> usize {
    let l = blueprint.num_layers();
    let w = blueprint.widths();
    let inner: usize = (2..l).map(|i| w[i - 2] * w[i - 1]).sum();
    let biases: usize = w[..l - 1].iter().sum();
    layer_dims[0] * w[0] + inner + w[l - 1] + biases
}
