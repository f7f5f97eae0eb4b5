//! Rollback-and-calibrate reconstruction, plus the Retrain and FedRemove
//! baselines.
//!
//! Reconstruction rolls the global model back to its initial state and
//! replays the original rounds with the removed clients left out. In each
//! replayed round the remaining participants train briefly (`λ·L` epochs)
//! from the reconstructed model to obtain a fresh update direction; the
//! server rescales the fresh aggregate to the length of the aggregate of
//! the same clients' stored updates and applies it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::devicelog::{self, DeviceLog, LogEntry};
use crate::error::{Error, Result};
use crate::federation::{
    self, aggregate, client_update, AggregatedDelta, ClientState, FederationConfig, LocalPlan,
    RoundSum, SelectionTrace, ServerUpdate, TrainOptions,
};
use crate::model::{DenseWeights, GlobalParameters};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMode {
    /// Calibrated replay; each client keeps only an α fraction of the item
    /// rows of its fresh update, chosen by the same rule as its log.
    Fru,
    /// Calibrated replay over every row the fresh update touches.
    FruWithoutIus,
    /// Uncalibrated replay of the remaining clients' stored updates.
    FedRemove,
    /// Full training from scratch without the removed clients.
    Retrain,
}

impl UnlearnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnlearnMode::Fru => "fru",
            UnlearnMode::FruWithoutIus => "fru-no-ius",
            UnlearnMode::FedRemove => "fedremove",
            UnlearnMode::Retrain => "retrain",
        }
    }
}

impl std::str::FromStr for UnlearnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fru" => Ok(Self::Fru),
            "fru-no-ius" | "fru-without-ius" => Ok(Self::FruWithoutIus),
            "fedremove" => Ok(Self::FedRemove),
            "retrain" => Ok(Self::Retrain),
            other => Err(Error::Config(format!("unknown unlearning mode {other:?}"))),
        }
    }
}

fn default_speedup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub mode: UnlearnMode,
    /// Speed-up factor λ: replay rounds run `round(λ·L)` local epochs.
    #[serde(default = "default_speedup")]
    pub speedup_factor: f64,
    pub targets: BTreeSet<u32>,
    /// Replay with the original per-client seeds instead of fresh ones.
    #[serde(default)]
    pub reuse_training_seeds: bool,
}

impl UnlearnConfig {
    pub fn new(mode: UnlearnMode, targets: BTreeSet<u32>) -> Self {
        Self {
            mode,
            speedup_factor: default_speedup(),
            targets,
            reuse_training_seeds: false,
        }
    }

    pub fn replay_epochs(&self, local_epochs: usize) -> usize {
        (self.speedup_factor * local_epochs as f64).round() as usize
    }

    pub fn validate(&self, local_epochs: usize) -> Result<()> {
        if !(self.speedup_factor > 0.0 && self.speedup_factor <= 1.0) {
            return Err(Error::Config("speedup_factor must be in (0, 1]".into()));
        }
        if self.replay_epochs(local_epochs) == 0 {
            return Err(Error::Config(format!(
                "speedup_factor {} gives zero replay epochs for L = {local_epochs}",
                self.speedup_factor
            )));
        }
        Ok(())
    }
}

fn l2(values: impl Iterator<Item = f32>) -> f64 {
    values
        .map(|v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

fn rescale(values: &mut [f32], scale: f64) {
    values
        .iter_mut()
        .for_each(|v| *v = (f64::from(*v) * scale) as f32);
}

/// L2 norm of the item-row tensor and of each dense tensor (with its length).
struct TensorNorms {
    items: f64,
    dense: Vec<(usize, f64)>,
}

impl TensorNorms {
    fn new(items: f64, dense: &DenseWeights<f32>, what: &str) -> Result<Self> {
        let dense: Vec<(usize, f64)> = dense
            .tensors()
            .into_iter()
            .map(|t| (t.len(), l2(t.iter().copied())))
            .collect();
        // A non-finite value anywhere makes its tensor's norm non-finite.
        if !items.is_finite() || dense.iter().any(|(_, n)| !n.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(Self { items, dense })
    }

    fn of(agg: &AggregatedDelta, what: &str) -> Result<Self> {
        Self::new(
            l2(agg.item_rows.values().flatten().copied()),
            &agg.dense,
            what,
        )
    }

    fn of_sum(sum: &RoundSum, what: &str) -> Result<Self> {
        Self::new(l2(sum.item_values()), sum.dense(), what)
    }
}

fn ratio(old: f64, new: f64) -> f64 {
    if new > 0.0 {
        old / new
    } else {
        0.0
    }
}

/// `‖old‖ · new / ‖new‖`, one norm per tensor: the item rows (union of both
/// supports, missing rows read as zero) form one tensor and each dense
/// tensor is separate. A zero fresh tensor yields zero.
pub fn calibrate(old: &AggregatedDelta, new: &AggregatedDelta) -> Result<AggregatedDelta> {
    calibrate_to(&TensorNorms::of(old, "stored aggregate")?, new.clone())
}

fn calibrate_to(old: &TensorNorms, mut new: AggregatedDelta) -> Result<AggregatedDelta> {
    let fresh = TensorNorms::of(&new, "fresh aggregate")?;
    let shapes_match = old.dense.len() == fresh.dense.len()
        && old.dense.iter().zip(&fresh.dense).all(|(o, n)| o.0 == n.0);
    if !shapes_match {
        return Err(Error::Shape(
            "stored and fresh dense aggregates differ in shape".into(),
        ));
    }
    let scale = ratio(old.items, fresh.items);
    for row in new.item_rows.values_mut() {
        rescale(row, scale);
    }
    for ((dst, o), n) in new
        .dense
        .tensors_mut()
        .into_iter()
        .zip(&old.dense)
        .zip(&fresh.dense)
    {
        rescale(dst, ratio(o.1, n.1));
    }
    Ok(new)
}

/// Files and state left behind by a training run.
#[derive(Debug, Clone, Copy)]
pub struct RunArtifacts<'a> {
    pub dataset: &'a SplitDataset,
    pub config: &'a FederationConfig,
    pub initial: &'a GlobalParameters,
    pub trace: &'a SelectionTrace,
    pub log_dir: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mode: UnlearnMode,
    pub lambda: f64,
    pub seconds_total: f64,
    pub seconds_per_round: Vec<f64>,
}

#[derive(Debug)]
pub struct Reconstruction {
    pub global: GlobalParameters,
    pub clients: Vec<ClientState>,
    pub timing: TimingReport,
}

struct LogBook<'a> {
    dir: &'a Path,
    embedding_size: usize,
    open: BTreeMap<u32, DeviceLog>,
}

impl LogBook<'_> {
    fn fetch(&mut self, client: u32, round: u32) -> Result<Option<LogEntry>> {
        if !self.open.contains_key(&client) {
            let path = devicelog::log_path(self.dir, client);
            if !path.exists() {
                return Err(Error::DeviceLog {
                    client,
                    message: format!("log file {} is missing", path.display()),
                });
            }
            self.open
                .insert(client, DeviceLog::open(path, client, self.embedding_size)?);
        }
        self.open[&client].fetch(round)
    }
}

fn stored_update(
    entry: LogEntry,
    client: u32,
    template: &DenseWeights<f32>,
) -> Result<ServerUpdate> {
    Ok(ServerUpdate {
        round: entry.round,
        client_id: client,
        dense_deltas: DenseWeights::from_tensors(template, &entry.dense_deltas)?,
        item_deltas: entry.item_deltas,
    })
}

/// Removes `config.targets` from a trained run.
pub fn unlearn(
    artifacts: RunArtifacts<'_>,
    config: &UnlearnConfig,
    serial: bool,
) -> Result<Reconstruction> {
    let dataset = artifacts.dataset;
    let fed = artifacts.config;
    for &t in &config.targets {
        if t as usize >= dataset.user_count {
            return Err(Error::UnknownClient(t));
        }
    }
    if config.mode == UnlearnMode::Retrain {
        return retrain(dataset, fed, &config.targets, config.speedup_factor, serial);
    }
    config.validate(fed.train.local_epochs)?;

    let started = Instant::now();
    let tc = &fed.train;
    let mut global = artifacts.initial.clone();
    let mut clients = federation::build_clients(dataset, tc, &BTreeSet::new());
    let mut logs = LogBook {
        dir: artifacts.log_dir,
        embedding_size: tc.embedding_size,
        open: BTreeMap::new(),
    };
    let template = global.dense.zeros_like();
    let plan = LocalPlan {
        train: tc,
        sampling: &fed.sampling,
        epochs: config.replay_epochs(tc.local_epochs),
        row_selection: (config.mode == UnlearnMode::Fru)
            .then_some((fed.log.selection_mode, fed.log.keep_fraction)),
    };
    let mut seconds_per_round = Vec::with_capacity(artifacts.trace.rounds.len());
    // Remaining clients start from their initial embedding. Once their first
    // participating round has been replayed, the embedding is replaced by the
    // snapshot stored at the end of that round; later rounds refine it with
    // fresh updates. Under exact replay the replacement changes nothing.
    let mut snapshots: BTreeMap<u32, (u32, Vec<f32>)> = BTreeMap::new();
    for c in clients.iter().filter(|c| !config.targets.contains(&c.id)) {
        if let Some(first) = artifacts.trace.first_participation(c.id) {
            if let Some(entry) = logs.fetch(c.id, first)? {
                snapshots.insert(c.id, (first, entry.user_embedding));
            }
        }
    }
    let first_round = artifacts.trace.rounds.first().map(|r| r.round);

    for round in &artifacts.trace.rounds {
        let round_started = Instant::now();
        let t = round.round;
        let mut stored: Vec<ServerUpdate> = Vec::new();
        for &k in round.clients.iter().filter(|k| !config.targets.contains(k)) {
            let Some(entry) = logs.fetch(k, t)? else {
                log::warn!("client {k} has no stored update for round {t}; leaving it out");
                continue;
            };
            if config.mode == UnlearnMode::FedRemove {
                clients[k as usize].user.user_embedding =
                    Array1::from_vec(entry.user_embedding.clone());
            }
            stored.push(stored_update(entry, k, &template)?);
        }
        if stored.is_empty() {
            seconds_per_round.push(round_started.elapsed().as_secs_f64());
            continue;
        }
        let stored_sum = RoundSum::of(&stored)?;
        let participants: Vec<u32> = stored.iter().map(|u| u.client_id).collect();
        drop(stored);

        let step = if config.mode == UnlearnMode::FedRemove || Some(t) == first_round {
            stored_sum.into_delta()
        } else {
            let stored_norms = TensorNorms::of_sum(&stored_sum, "stored aggregate")?;
            let global_ref = &global;
            let fresh = federation::run_clients(&mut clients, &participants, serial, |client| {
                let seed = if config.reuse_training_seeds {
                    round
                        .seed_of(client.id)
                        .expect("participant has a recorded seed")
                } else {
                    rng::derive_seed(tc.seed, rng::UNLEARN, &[u64::from(t), u64::from(client.id)])
                };
                Ok(client_update(client, global_ref, plan, t, seed)?.into_server())
            })?;
            calibrate_to(&stored_norms, aggregate(&fresh)?)?
        };
        step.apply(&mut global);
        if config.mode != UnlearnMode::FedRemove {
            for &k in &participants {
                if let Some((_, snapshot)) = snapshots.get(&k).filter(|(first, _)| *first == t) {
                    clients[k as usize].user.user_embedding = Array1::from(snapshot.clone());
                }
            }
        }
        seconds_per_round.push(round_started.elapsed().as_secs_f64());
    }

    Ok(Reconstruction {
        global,
        clients,
        timing: TimingReport {
            mode: config.mode,
            lambda: config.speedup_factor,
            seconds_total: started.elapsed().as_secs_f64(),
            seconds_per_round,
        },
    })
}

fn retrain(
    dataset: &SplitDataset,
    fed: &FederationConfig,
    targets: &BTreeSet<u32>,
    lambda: f64,
    serial: bool,
) -> Result<Reconstruction> {
    let started = Instant::now();
    let mut clean = fed.clone();
    clean.attack = None;
    let options = TrainOptions {
        log_dir: None,
        excluded: targets.clone(),
        malicious: BTreeSet::new(),
        serial,
    };
    let outcome = federation::train(dataset, &clean, &options, None)?;
    Ok(Reconstruction {
        global: outcome.global,
        clients: outcome.clients,
        timing: TimingReport {
            mode: UnlearnMode::Retrain,
            lambda,
            seconds_total: started.elapsed().as_secs_f64(),
            seconds_per_round: outcome.round_seconds,
        },
    })
}
