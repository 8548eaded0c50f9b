//! Experiment orchestration: configuration, the round loop, metrics and logs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attacks::{AttackKind, AttackSpec};
use crate::augment::{honest_update, AugmentParams, Coalition, CoalitionInput, Member};
use crate::data::{load_idx, split_root, split_root_noniid, synth_blobs, DataError, LabeledDataset, Partition};
use crate::defenses::{krum_scores, Defense, DefenseSpec, RoundInput};
use crate::nn::{DenseNet, ParamVector, TrainOptions};
use crate::pill::{build_blueprint, PatternState, SearchOptions, SearchOrder};
use crate::rng::{derive_rng, derive_seed, stream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_HEADER: &str = "round,client_id,is_malicious,accepted,distance_score,cosine_score,error_rate";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("round {round}, {stage}: {message}")]
    Round {
        round: usize,
        stage: &'static str,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

type Result<T> = std::result::Result<T, SimError>;

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs; `train + test` samples split evenly across classes.
    Blobs {
        classes: usize,
        dim: usize,
        spread: f64,
        train: usize,
        test: usize,
        /// Fixes the generated data independently of the master seed.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    /// IDX image/label files; the first `train` shuffled samples train, the
    /// next `test` (or the rest) evaluate.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        train: usize,
        #[serde(default)]
        test: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: 3,
            dim: 8,
            spread: 1.0,
            train: 3000,
            test: 1000,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    #[default]
    Iid,
    Noniid { p: f64 },
}

/// Knobs under `pill.*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillSpec {
    pub pattern: u8,
    pub search: SearchOrder,
    pub c_search: f64,
    /// Last feature-extraction layer; `ceil(L / 2)` when unset.
    pub fe_boundary: Option<usize>,
    pub signed_rank: bool,
}

impl Default for PillSpec {
    fn default() -> Self {
        PillSpec {
            pattern: 1,
            search: SearchOrder::Max,
            c_search: 0.94,
            fe_boundary: None,
            signed_rank: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub clients: usize,
    pub malicious: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Layer widths from input to output.
    pub model: Vec<usize>,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    /// Server root set size (taken from the training data before sharding).
    pub root_size: usize,
    /// Bias of the root set toward class 0, if any.
    pub root_noniid: Option<f64>,
    /// Fraction of clients selected per round; `1` is cross-silo.
    pub participation: f64,
    /// Malicious count the server assumes; `m` (cross-silo) or `ceil(q m)`.
    pub assumed_malicious: Option<usize>,
    pub attack: AttackSpec,
    pub defense: DefenseSpec,
    pub pill: PillSpec,
    pub augment: AugmentParams,
    pub seed: u64,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 150,
            clients: 20,
            malicious: 4,
            local_epochs: 2,
            lr: 0.05,
            batch_size: 32,
            model: vec![8, 16, 8, 3, 3],
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::Iid,
            root_size: 100,
            root_noniid: None,
            participation: 1.0,
            assumed_malicious: None,
            attack: AttackSpec::default(),
            defense: DefenseSpec::default(),
            pill: PillSpec::default(),
            augment: AugmentParams::default(),
            seed: 0,
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(config_err("clients must be >= 1"));
        }
        if 2 * self.malicious >= self.clients && self.malicious > 0 {
            return Err(config_err(format!(
                "malicious ({}) must be below half of clients ({})",
                self.malicious, self.clients
            )));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(config_err(format!("participation must be in (0, 1], got {}", self.participation)));
        }
        if self.local_epochs == 0 {
            return Err(config_err("local_epochs must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr must be finite and >= 0"));
        }
        if self.model.len() < 2 || self.model.contains(&0) {
            return Err(config_err("model needs >= 2 positive layer widths"));
        }
        if self.defense.kind.needs_server_update() && self.root_size == 0 {
            return Err(config_err("fltrust/dstrust need root_size > 0"));
        }
        if let Some(p) = self.root_noniid {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err("root_noniid must be in [0, 1]"));
            }
        }
        if let DatasetSpec::Blobs { classes, dim, .. } = &self.dataset {
            if self.model[0] != *dim || self.model.last() != Some(classes) {
                return Err(config_err(format!(
                    "model {:?} does not match blobs with dim {dim} and {classes} classes",
                    self.model
                )));
            }
        }
        self.augment.validate().map_err(|e| config_err(e.to_string()))?;
        if self.augment.enabled && self.attack.kind != AttackKind::None {
            let layers = self.model.len() - 1;
            build_blueprint(&self.model, *self.model.last().unwrap()).map_err(|e| config_err(e.to_string()))?;
            let boundary = self.pill.fe_boundary.unwrap_or(PatternState::default_boundary(layers));
            PatternState::new(self.pill.pattern, boundary, self.pill.c_search, layers)
                .map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn assumed_malicious_count(&self) -> usize {
        self.assumed_malicious.unwrap_or_else(|| {
            if self.participation >= 1.0 {
                self.malicious
            } else {
                (self.participation * self.malicious as f64).ceil() as usize
            }
        })
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

/// Parses a config from JSON text after applying `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree: Value = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{ov}` is not key=value")))?;
        apply_override(&mut tree, key, value)?;
    }
    let config: ExperimentConfig = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Sets the dotted `key` in `tree` to `value`, parsed as JSON when possible
/// and as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(tree: &mut Value, key: &str, value: &str) -> Result<()> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override `{key}` descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| config_err(format!("override `{key}` descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Reads a config file; relative dataset paths resolve against its directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut config = parse_config(&text, overrides)?;
    if let DatasetSpec::Idx { images, labels, .. } = &mut config.dataset {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [images, labels] {
            if p.is_relative() && !p.exists() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(config)
}

/// Training shards, root set and test set for one run.
pub struct Prepared {
    pub shards: Vec<LabeledDataset>,
    pub root: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<Prepared> {
    let data_seed = |fixed: Option<u64>| fixed.unwrap_or_else(|| derive_seed(config.seed, &[stream::DATA]));
    let (train, test) = match &config.dataset {
        DatasetSpec::Blobs {
            classes,
            dim,
            spread,
            train,
            test,
            data_seed: fixed,
        } => {
            let seed = data_seed(*fixed);
            let per_class = (train + test).div_ceil(*classes);
            let all = synth_blobs(*classes, per_class, *dim, *spread, seed)?;
            let (tr, rest) = all.shuffle_split(*train, derive_seed(seed, &[1]))?;
            let te = rest.subset(&(0..(*test).min(rest.len())).collect::<Vec<_>>());
            (tr, te)
        }
        DatasetSpec::Idx {
            images,
            labels,
            train,
            test,
        } => {
            let all = load_idx(images, labels)?;
            let (tr, rest) = all.shuffle_split(*train, data_seed(None))?;
            let n_test = test.unwrap_or(rest.len()).min(rest.len());
            (tr, rest.subset(&(0..n_test).collect::<Vec<_>>()))
        }
    };
    if test.is_empty() {
        return Err(config_err("test set is empty"));
    }
    if config.model[0] != train.dim() || *config.model.last().unwrap() != train.num_classes() {
        return Err(config_err(format!(
            "model {:?} does not match data with dim {} and {} classes",
            config.model,
            train.dim(),
            train.num_classes()
        )));
    }

    let root_seed = derive_seed(config.seed, &[stream::ROOT]);
    let base = match config.root_noniid {
        Some(p) => split_root_noniid(&train, config.root_size, p, root_seed)?,
        None => split_root(&train, config.root_size, root_seed)?,
    };
    let part_seed = derive_seed(config.seed, &[stream::PARTITION]);
    let partition: Partition = match config.partition {
        PartitionSpec::Iid => base.with_iid_shards(&train, config.clients, part_seed)?,
        PartitionSpec::Noniid { p } => base.with_noniid_shards(&train, config.clients, p, part_seed)?,
    };
    if let Some(c) = partition.shards.iter().position(|s| s.is_empty()) {
        return Err(config_err(format!("client {c} received no data")));
    }
    Ok(Prepared {
        shards: partition.shards.iter().map(|s| train.subset(s)).collect(),
        root: train.subset(&partition.root_indices),
        test,
    })
}

/// Participants of `round`, ascending. `q = 1` selects everyone.
pub fn select_clients(round: usize, k: usize, q: f64, seed: u64) -> Vec<usize> {
    if q >= 1.0 {
        return (0..k).collect();
    }
    let n = ((q * k as f64).ceil() as usize).clamp(1, k);
    let mut rng = derive_rng(seed, &[stream::SELECT, round as u64]);
    let mut picked = index::sample(&mut rng, k, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Fraction of misclassified samples.
pub fn error_rate(net: &DenseNet, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(config_err("error rate of an empty test set"));
    }
    let predicted = net.predict(test.features()).map_err(|e| config_err(e.to_string()))?;
    let wrong = predicted.iter().zip(test.labels()).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / test.len() as f64)
}

/// Per-client `(distance score, cosine score)`: the Multi-Krum score over
/// `n - m - 2` neighbours and, when a server update exists, the cosine to it.
pub fn stealth_metrics(
    updates: &[ParamVector],
    server_update: Option<&ParamVector>,
    m_assumed: usize,
) -> Vec<(f64, Option<f64>)> {
    let n = updates.len();
    if n == 0 {
        return Vec::new();
    }
    let neighbors = n.saturating_sub(m_assumed + 2).clamp(1, n.saturating_sub(1).max(1));
    let distance = if n == 1 { vec![0.0] } else { krum_scores(updates, neighbors) };
    distance
        .into_iter()
        .zip(updates)
        .map(|(d, u)| (d, server_update.map(|s| u.cosine(s))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub is_malicious: bool,
    pub accepted: bool,
    pub distance_score: f64,
    pub cosine_score: Option<f64>,
    /// Score reported by the active defense.
    pub defense_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Test error after applying this round's aggregate.
    pub error_rate: f64,
    pub clients: Vec<ClientRecord>,
    /// `cos(extra-trained reference, server update)`, when both exist.
    pub reference_cosine: Option<f64>,
    pub pill_size: Option<usize>,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub final_error_rate: f64,
    /// Error of the initial model followed by one entry per round.
    pub error_rates: Vec<f64>,
}

pub struct ExperimentResult {
    pub model: DenseNet,
    pub logs: Vec<RoundLog>,
    pub initial_error: f64,
}

impl ExperimentResult {
    pub fn error_series(&self) -> Vec<f64> {
        std::iter::once(self.initial_error).chain(self.logs.iter().map(|l| l.error_rate)).collect()
    }

    pub fn final_error(&self) -> f64 {
        self.logs.last().map_or(self.initial_error, |l| l.error_rate)
    }

    pub fn summary(&self, config: &ExperimentConfig) -> Summary {
        Summary {
            version: VERSION.to_string(),
            seed: config.seed,
            config: config.clone(),
            final_error_rate: self.final_error(),
            error_rates: self.error_series(),
        }
    }
}

fn round_err(round: usize, stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> SimError {
    move |e| SimError::Round {
        round,
        stage,
        message: e.to_string(),
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_with_data(config, &data)
}

/// Round loop over already prepared data.
pub fn run_with_data(config: &ExperimentConfig, data: &Prepared) -> Result<ExperimentResult> {
    let dims = &config.model;
    let layers = dims.len() - 1;
    let mut global = DenseNet::init(dims, derive_seed(config.seed, &[stream::INIT])).map_err(|e| config_err(e.to_string()))?;
    let initial_error = error_rate(&global, &data.test)?;

    let attack = config.attack.build();
    let augmenting = config.augment.enabled && attack.is_some();
    let (blueprint, pattern) = if augmenting {
        let bp = build_blueprint(dims, *dims.last().unwrap()).map_err(|e| config_err(e.to_string()))?;
        let boundary = config.pill.fe_boundary.unwrap_or(PatternState::default_boundary(layers));
        let ps = PatternState::new(config.pill.pattern, boundary, config.pill.c_search, layers)
            .map_err(|e| config_err(e.to_string()))?;
        (Some(bp), Some(ps))
    } else {
        (None, None)
    };
    let search = SearchOptions {
        order: config.pill.search,
        signed: config.pill.signed_rank,
    };
    let mut coalition = Coalition::new(config.augment.clone(), blueprint, pattern, search).map_err(|e| config_err(e.to_string()))?;
    let mut defense = Defense::new(config.defense.clone());
    let train = config.train_options();
    let m_assumed = config.assumed_malicious_count();
    let mut last_global_update: Option<ParamVector> = None;
    let mut logs = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let started = Instant::now();
        let participants = select_clients(t, config.clients, config.participation, config.seed);
        let (malicious, benign): (Vec<usize>, Vec<usize>) =
            participants.iter().partition(|&&c| c < config.malicious);

        let benign_updates: Vec<ParamVector> = benign
            .par_iter()
            .map(|&c| honest_update(&global, &data.shards[c], train, config.seed, c, t))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| round_err(t, "local training")(&e))?;

        let mut plan = None;
        let malicious_updates = if malicious.is_empty() {
            Vec::new()
        } else {
            let members: Vec<Member<'_>> = malicious
                .iter()
                .map(|&c| Member {
                    client_id: c,
                    data: &data.shards[c],
                })
                .collect();
            let input = CoalitionInput {
                global: &global,
                members: &members,
                round: t,
                participants: participants.len(),
                train,
                master_seed: config.seed,
                last_global_update: last_global_update.as_ref(),
            };
            let (ups, p) = coalition
                .round(attack.as_deref(), &input)
                .map_err(|e| round_err(t, "coalition")(&e))?;
            plan = p;
            ups
        };

        let server_update = if config.defense.kind.needs_server_update() {
            let seed = derive_seed(config.seed, &[stream::SERVER_TRAIN, t as u64]);
            let (_, u) = crate::nn::sgd_train(&global, data.root.features(), data.root.labels(), train, seed)
                .map_err(|e| round_err(t, "server training")(&e))?;
            Some(u)
        } else {
            None
        };

        // Updates in participant order; malicious ids come first.
        let updates: Vec<ParamVector> = malicious_updates.into_iter().chain(benign_updates).collect();
        let ids: Vec<usize> = malicious.iter().chain(&benign).copied().collect();
        let weights: Vec<f64> = ids.iter().map(|&c| data.shards[c].len() as f64).collect();
        let input = RoundInput {
            client_ids: &ids,
            updates: &updates,
            weights: &weights,
            server_update: server_update.as_ref(),
            assumed_malicious: m_assumed,
        };
        let mut defense_rng = derive_rng(config.seed, &[stream::DEFENSE, t as u64]);
        let result = defense
            .aggregate(&input, &mut defense_rng)
            .map_err(|e| round_err(t, "aggregation")(&e))?;
        global.apply_update(&result.global_update);
        let error = error_rate(&global, &data.test)?;

        let stealth = stealth_metrics(&updates, server_update.as_ref(), m_assumed);
        let clients = ids
            .iter()
            .enumerate()
            .map(|(i, &c)| ClientRecord {
                client_id: c,
                is_malicious: c < config.malicious,
                accepted: result.accepted[i],
                distance_score: stealth[i].0,
                cosine_score: stealth[i].1,
                defense_score: result.scores[i],
            })
            .collect();
        let reference_cosine = match (&plan, &server_update) {
            (Some(p), Some(s)) => Some(p.reference.cosine(s)),
            _ => None,
        };
        info!("round {t}: error {error:.4}");
        logs.push(RoundLog {
            round: t,
            error_rate: error,
            clients,
            reference_cosine,
            pill_size: plan.as_ref().map(|p| p.masks.pill.count_nonzero()),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        last_global_update = Some(result.global_update);
    }

    Ok(ExperimentResult {
        model: global,
        logs,
        initial_error,
    })
}

/// The per-client CSV log as a string.
pub fn render_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for log in logs {
        for c in &log.clients {
            let cosine = c.cosine_score.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                log.round, c.client_id, c.is_malicious, c.accepted, c.distance_score, cosine, log.error_rate
            )
            .unwrap();
        }
    }
    out
}

/// Writes `log.csv` and `summary.json` into `dir`.
pub fn write_logs(dir: &Path, logs: &[RoundLog], summary: &Summary) -> Result<(PathBuf, PathBuf)> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| SimError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("log.csv");
    fs::write(&csv_path, render_csv(logs)).map_err(io_err(&csv_path))?;
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    Ok((csv_path, json_path))
}
