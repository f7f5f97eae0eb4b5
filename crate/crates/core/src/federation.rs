//! Round orchestration: client selection, local training, update collection
//! and averaging.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, AttackConfig};
use crate::dataset::{LocalDataset, SplitDataset};
use crate::devicelog::{self, DeviceLog, LogConfig, LogEntry, SelectionMode};
use crate::error::{Error, Result};
use crate::model::{
    DenseWeights, GlobalParameters, LocalModel, ModelKind, PrivateParameters, TrainConfig,
};
use crate::negsample::{self, SamplingConfig};
use crate::rng;

/// Sparse item-embedding deltas keyed by item id.
pub type RowDeltas = BTreeMap<u32, Vec<f32>>;

/// One client's update for one round, including the private user delta.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub round: u32,
    pub client_id: u32,
    pub item_deltas: RowDeltas,
    pub dense_deltas: DenseWeights<f32>,
    pub user_delta: Array1<f32>,
}

/// The part of an update that leaves the device.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerUpdate {
    pub round: u32,
    pub client_id: u32,
    pub item_deltas: RowDeltas,
    pub dense_deltas: DenseWeights<f32>,
}

impl UpdateRecord {
    pub fn into_server(self) -> ServerUpdate {
        ServerUpdate {
            round: self.round,
            client_id: self.client_id,
            item_deltas: self.item_deltas,
            dense_deltas: self.dense_deltas,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.item_deltas
            .values()
            .all(|r| r.iter().all(|v| v.is_finite()))
            && self.dense_deltas.is_finite()
            && self.user_delta.iter().all(|v| v.is_finite())
    }
}

/// Server-side aggregate of a round's updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDelta {
    pub item_rows: RowDeltas,
    pub dense: DenseWeights<f32>,
}

impl AggregatedDelta {
    pub fn apply(&self, params: &mut GlobalParameters) {
        for (&id, row) in &self.item_rows {
            for (p, d) in params
                .item_embeddings
                .row_mut(id as usize)
                .iter_mut()
                .zip(row)
            {
                *p += *d;
            }
        }
        if !self.dense.is_empty() {
            params.dense.add_scaled(&self.dense, 1.0);
        }
    }
}

/// Averages updates. Dense tensors are divided by the number of
/// participants; each item row by the number of participants that sent it.
/// Summation runs in ascending client order.
pub fn aggregate(updates: &[ServerUpdate]) -> Result<AggregatedDelta> {
    Ok(RoundSum::of(updates)?.into_delta())
}

/// Per-row sums and counts of a round's updates, before averaging.
pub(crate) struct RoundSum {
    width: usize,
    sums: Vec<f32>,
    counts: Vec<u32>,
    dense: DenseWeights<f32>,
}

impl RoundSum {
    pub(crate) fn of(updates: &[ServerUpdate]) -> Result<Self> {
        let Some(first) = updates.first() else {
            return Err(Error::Config(
                "cannot aggregate an empty set of updates".into(),
            ));
        };
        let mut order: Vec<&ServerUpdate> = updates.iter().collect();
        order.sort_by_key(|u| u.client_id);

        // Rows are summed into a dense scratch table; only touched rows are kept.
        let width = order
            .iter()
            .flat_map(|u| u.item_deltas.values())
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        let rows = order
            .iter()
            .filter_map(|u| u.item_deltas.keys().next_back())
            .max()
            .map_or(0, |&m| m as usize + 1);
        let mut sums = vec![0.0f32; rows * width];
        let mut counts = vec![0u32; rows];
        let mut dense = first.dense_deltas.zeros_like();
        for u in &order {
            for (&id, row) in &u.item_deltas {
                if row.len() != width {
                    return Err(Error::Shape(format!(
                        "item row {id} has inconsistent width"
                    )));
                }
                let i = id as usize;
                for (s, v) in sums[i * width..(i + 1) * width].iter_mut().zip(row) {
                    *s += *v;
                }
                counts[i] += 1;
            }
            if !u.dense_deltas.same_shape(&dense) {
                return Err(Error::Shape(format!(
                    "client {} sent dense deltas of a different shape",
                    u.client_id
                )));
            }
            dense.add_scaled(&u.dense_deltas, 1.0);
        }
        let n = order.len() as f32;
        for t in dense.tensors_mut() {
            t.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            width,
            sums,
            counts,
            dense,
        })
    }

    fn mean_rows(&self) -> impl Iterator<Item = (u32, impl Iterator<Item = f32> + '_)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, &c)| {
                let c = c as f32;
                (
                    i as u32,
                    self.sums[i * self.width..(i + 1) * self.width]
                        .iter()
                        .map(move |v| v / c),
                )
            })
    }

    /// Values of the averaged item rows, in row order, without materializing them.
    pub(crate) fn item_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.mean_rows().flat_map(|(_, r)| r)
    }

    pub(crate) fn dense(&self) -> &DenseWeights<f32> {
        &self.dense
    }

    pub(crate) fn into_delta(self) -> AggregatedDelta {
        let item_rows = self.mean_rows().map(|(i, r)| (i, r.collect())).collect();
        AggregatedDelta {
            item_rows,
            dense: self.dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub clients: Vec<u32>,
    pub seeds: Vec<u64>,
}

/// Which clients took part in each round and with which seeds.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub global_seed: u64,
    pub rounds: Vec<RoundTrace>,
}

impl RoundTrace {
    pub fn seed_of(&self, client: u32) -> Option<u64> {
        self.clients
            .binary_search(&client)
            .ok()
            .map(|i| self.seeds[i])
    }
}

impl SelectionTrace {
    pub fn round(&self, t: u32) -> Option<&RoundTrace> {
        let first = self.rounds.first()?.round;
        self.rounds
            .get(t.checked_sub(first)? as usize)
            .filter(|r| r.round == t)
    }

    pub fn participations(&self, client: u32) -> usize {
        self.rounds
            .iter()
            .filter(|r| r.clients.binary_search(&client).is_ok())
            .count()
    }

    pub fn first_participation(&self, client: u32) -> Option<u32> {
        self.rounds
            .iter()
            .find(|r| r.clients.binary_search(&client).is_ok())
            .map(|r| r.round)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// `floor(b% · n)`, at least one.
pub fn clients_per_round(eligible: usize, fraction_percent: f64) -> usize {
    let n = (fraction_percent / 100.0 * eligible as f64 + 1e-9).floor() as usize;
    n.clamp(1, eligible.max(1)).min(eligible)
}

/// Uniform sample without replacement from `eligible`, returned sorted.
pub fn select_clients<R: Rng + ?Sized>(
    eligible: &[u32],
    fraction_percent: f64,
    rng: &mut R,
) -> Vec<u32> {
    let k = clients_per_round(eligible.len(), fraction_percent);
    let mut picked: Vec<u32> = if k == eligible.len() {
        eligible.to_vec()
    } else {
        index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    picked.sort_unstable();
    picked
}

/// A simulated device: private data, private embedding and an update log.
#[derive(Debug)]
pub struct ClientState {
    pub id: u32,
    pub data: LocalDataset,
    pub user: PrivateParameters,
    pub malicious: bool,
    pub log: Option<DeviceLog>,
}

/// Everything a client needs to run local training in one round.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlan<'a> {
    pub train: &'a TrainConfig,
    pub sampling: &'a SamplingConfig,
    pub epochs: usize,
    /// When set, only an α fraction of the item rows is returned, chosen by
    /// the given rule (the same rule the device log uses).
    pub row_selection: Option<(SelectionMode, f64)>,
}

/// Downloads `global`, samples negatives, trains `plan.epochs` local epochs,
/// and returns `final − received` for every touched parameter. The client's
/// private embedding is replaced by its trained value before returning.
pub fn client_update(
    client: &mut ClientState,
    global: &GlobalParameters,
    plan: LocalPlan<'_>,
    round: u32,
    seed: u64,
) -> Result<UpdateRecord> {
    let data = &client.data;
    if data.positives.is_empty() {
        return Err(Error::EmptyPositives(client.id));
    }
    let mut neg_rng = rng::stream(seed, "negatives", &[]);
    let negatives = negsample::sample_negatives(
        data,
        global,
        &client.user,
        plan.sampling,
        plan.train.negative_ratio(),
        &mut neg_rng,
    )?;
    let mut model = LocalModel::gather(
        plan.train.model,
        plan.train.lightgcn_layers,
        global,
        &client.user,
        &data.positives,
        &negatives,
    )?;
    let samples = model.all_samples();
    let mut batch_rng = rng::stream(seed, "batches", &[]);
    model.train(
        &samples,
        plan.epochs,
        plan.train.batch_size,
        plan.train.learning_rate as f32,
        &mut batch_rng,
    )?;

    let e = global.embedding_size();
    let table = global
        .item_embeddings
        .as_slice()
        .expect("item table is contiguous");
    let trained = model.items.as_slice().expect("local rows are contiguous");
    let row_delta = |r: usize, id: u32| -> Vec<f32> {
        let before = &table[id as usize * e..(id as usize + 1) * e];
        trained[r * e..(r + 1) * e]
            .iter()
            .zip(before)
            .map(|(a, b)| a - b)
            .collect()
    };
    let all_rows = || -> RowDeltas {
        model
            .item_ids
            .iter()
            .enumerate()
            .map(|(r, &id)| (id, row_delta(r, id)))
            .collect()
    };
    let item_deltas: RowDeltas = match plan.row_selection {
        None => all_rows(),
        Some((SelectionMode::Random, alpha)) => devicelog::select_random(
            &all_rows(),
            alpha,
            &mut rng::stream(seed, "row-selection", &[]),
        ),
        Some((SelectionMode::Importance, alpha)) => {
            // Rank in ascending id order so ties go to the smaller id.
            let mut by_id: Vec<(u32, usize)> = model
                .item_ids
                .iter()
                .enumerate()
                .map(|(r, &id)| (id, r))
                .collect();
            by_id.sort_unstable();
            let norms = by_id
                .iter()
                .enumerate()
                .map(|(j, &(id, r))| {
                    let before = &table[id as usize * e..(id as usize + 1) * e];
                    let norm = trained[r * e..(r + 1) * e]
                        .iter()
                        .zip(before)
                        .map(|(a, b)| f64::from(a - b) * f64::from(a - b))
                        .sum::<f64>();
                    (norm, j as u32)
                })
                .collect();
            devicelog::top_by_norm(norms, alpha)
                .into_iter()
                .map(|j| {
                    let (id, r) = by_id[j as usize];
                    (id, row_delta(r, id))
                })
                .collect()
        }
    };
    let dense_deltas = match plan.train.model {
        ModelKind::Ncf => {
            let mut d = model.dense.clone();
            d.add_scaled(&global.dense, -1.0);
            d
        }
        ModelKind::LightGcn => DenseWeights::empty(),
    };
    let user_delta = &model.user - &client.user.user_embedding;
    client.user.user_embedding = model.user;

    let record = UpdateRecord {
        round,
        client_id: client.id,
        item_deltas,
        dense_deltas,
        user_delta,
    };
    if !record.is_finite() {
        return Err(Error::NonFinite(format!(
            "update of client {} in round {round}",
            client.id
        )));
    }
    Ok(record)
}

/// Configuration of one federated training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampling.validate()?;
        self.log.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Run-time options that do not change what is being trained.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for per-client update logs; no logging when `None`.
    pub log_dir: Option<PathBuf>,
    /// Clients left out entirely (for retraining without them).
    pub excluded: BTreeSet<u32>,
    /// Clients that poison their transmitted updates.
    pub malicious: BTreeSet<u32>,
    /// Run clients one at a time instead of on the thread pool.
    pub serial: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub initial: GlobalParameters,
    pub global: GlobalParameters,
    pub clients: Vec<ClientState>,
    pub trace: SelectionTrace,
    pub round_seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn user_table(&self) -> Array2<f32> {
        user_table(&self.clients)
    }
}

pub fn user_table(clients: &[ClientState]) -> Array2<f32> {
    let e = clients.first().map_or(0, |c| c.user.user_embedding.len());
    let mut out = Array2::zeros((clients.len(), e));
    for c in clients {
        out.row_mut(c.id as usize).assign(&c.user.user_embedding);
    }
    out
}

/// Initial global parameters for a seed.
pub fn initial_global(config: &TrainConfig, item_count: usize) -> GlobalParameters {
    GlobalParameters::init(
        config.model,
        item_count,
        config.embedding_size,
        &config.ffn_dims,
        &mut rng::stream(config.seed, rng::INIT, &[0]),
    )
}

/// Initial private embedding of one client.
pub fn initial_user(config: &TrainConfig, client: u32) -> PrivateParameters {
    PrivateParameters::init(
        config.embedding_size,
        &mut rng::stream(config.seed, rng::INIT, &[1, u64::from(client)]),
    )
}

pub fn build_clients(
    dataset: &SplitDataset,
    config: &TrainConfig,
    malicious: &BTreeSet<u32>,
) -> Vec<ClientState> {
    dataset
        .train
        .iter()
        .map(|d| ClientState {
            id: d.owner,
            data: d.clone(),
            user: initial_user(config, d.owner),
            malicious: malicious.contains(&d.owner),
            log: None,
        })
        .collect()
}

/// Runs each selected client's update, in ascending id order when serial.
pub(crate) fn run_clients<T, F>(
    clients: &mut [ClientState],
    selected: &[u32],
    serial: bool,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync + Send,
{
    let chosen: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect();
    if serial {
        chosen.into_iter().map(f).collect()
    } else {
        chosen.into_par_iter().map(f).collect()
    }
}

/// Hook called after every round with the new global state.
pub type RoundHook<'a> = dyn FnMut(u32, &GlobalParameters, &[ClientState]) -> Result<()> + 'a;

/// Federated training for `T` rounds.
pub fn train(
    dataset: &SplitDataset,
    config: &FederationConfig,
    options: &TrainOptions,
    hook: Option<&mut RoundHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let initial = initial_global(tc, dataset.item_count);
    let mut global = initial.clone();
    let mut clients = build_clients(dataset, tc, &options.malicious);
    if let Some(dir) = &options.log_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in clients
            .iter_mut()
            .filter(|c| !options.excluded.contains(&c.id))
        {
            let mut log =
                DeviceLog::create(devicelog::log_path(dir, c.id), c.id, tc.embedding_size)?;
            log.set_sync(config.log.sync);
            c.log = Some(log);
        }
    }
    let eligible: Vec<u32> = clients
        .iter()
        .map(|c| c.id)
        .filter(|id| !options.excluded.contains(id))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config("no clients left to train".into()));
    }

    let mut trace = SelectionTrace {
        global_seed: tc.seed,
        rounds: Vec::with_capacity(tc.global_rounds),
    };
    let mut round_seconds = Vec::with_capacity(tc.global_rounds);
    let mut hook = hook;
    let plan = LocalPlan {
        train: tc,
        sampling: &config.sampling,
        epochs: tc.local_epochs,
        row_selection: None,
    };

    for t in 1..=tc.global_rounds as u32 {
        let started = Instant::now();
        let selected = select_clients(
            &eligible,
            tc.client_fraction,
            &mut rng::stream(tc.seed, rng::SELECTION, &[u64::from(t)]),
        );
        let seeds: Vec<u64> = selected
            .iter()
            .map(|&k| rng::derive_seed(tc.seed, rng::CLIENT, &[u64::from(t), u64::from(k)]))
            .collect();

        let global_ref = &global;
        let updates = run_clients(&mut clients, &selected, options.serial, |client| {
            let seed = seeds[selected.binary_search(&client.id).unwrap()];
            let mut record = client_update(client, global_ref, plan, t, seed)?;
            if client.malicious {
                if let Some(attack) = &config.attack {
                    let mut arng =
                        rng::stream(tc.seed, rng::ATTACK, &[u64::from(t), u64::from(client.id)]);
                    adversary::poison(&mut record, attack, &mut arng);
                }
            }
            if let Some(log) = client.log.as_mut() {
                let kept = match config.log.selection_mode {
                    SelectionMode::Importance => {
                        devicelog::select_important(&record.item_deltas, config.log.keep_fraction)
                    }
                    SelectionMode::Random => devicelog::select_random(
                        &record.item_deltas,
                        config.log.keep_fraction,
                        &mut rng::stream(
                            tc.seed,
                            "log-selection",
                            &[u64::from(t), u64::from(client.id)],
                        ),
                    ),
                };
                log.append(&LogEntry {
                    round: t,
                    item_deltas: kept,
                    dense_deltas: record.dense_deltas.to_tensor_vecs(),
                    user_embedding: client.user.user_embedding.to_vec(),
                })?;
            }
            Ok(record.into_server())
        })?;

        let agg = aggregate(&updates)?;
        agg.apply(&mut global);
        trace.rounds.push(RoundTrace {
            round: t,
            clients: selected,
            seeds,
        });
        round_seconds.push(started.elapsed().as_secs_f64());
        if let Some(h) = hook.as_deref_mut() {
            h(t, &global, &clients)?;
        }
    }

    Ok(TrainOutcome {
        initial,
        global,
        clients,
        trace,
        round_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(client: u32, rows: &[(u32, [f32; 2])]) -> ServerUpdate {
        ServerUpdate {
            round: 1,
            client_id: client,
            item_deltas: rows.iter().map(|(id, r)| (*id, r.to_vec())).collect(),
            dense_deltas: DenseWeights::empty(),
        }
    }

    #[test]
    fn single_update_aggregates_to_itself() {
        let u = upd(3, &[(1, [0.5, -1.0])]);
        let agg = aggregate(std::slice::from_ref(&u)).unwrap();
        assert_eq!(agg.item_rows, u.item_deltas);
    }

    #[test]
    fn rows_average_over_contributors() {
        let agg = aggregate(&[
            upd(0, &[(7, [2.0, 0.0])]),
            upd(1, &[(7, [0.0, 2.0]), (8, [4.0, 4.0])]),
        ])
        .unwrap();
        assert_eq!(agg.item_rows[&7], vec![1.0, 1.0]);
        assert_eq!(agg.item_rows[&8], vec![4.0, 4.0]);
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn client_counts() {
        assert_eq!(clients_per_round(943, 10.0), 94);
        assert_eq!(clients_per_round(10, 100.0), 10);
        assert_eq!(clients_per_round(10, 50.0), 5);
        assert_eq!(clients_per_round(5, 1.0), 1);
    }

    #[test]
    fn full_fraction_selects_everyone_sorted() {
        let eligible = vec![4, 1, 9];
        assert_eq!(
            select_clients(&eligible, 100.0, &mut rng::from_seed(0)),
            vec![1, 4, 9]
        );
    }

    #[test]
    fn selection_is_seeded() {
        let eligible: Vec<u32> = (0..943).collect();
        let a = select_clients(&eligible, 10.0, &mut rng::from_seed(11));
        let b = select_clients(&eligible, 10.0, &mut rng::from_seed(11));
        assert_eq!(a, b);
        assert_eq!(a.len(), 94);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn row_selection_keeps_a_subset_of_the_full_update() {
        let mut tc = TrainConfig::new(ModelKind::LightGcn);
        tc.embedding_size = 4;
        tc.local_epochs = 2;
        let global = initial_global(&tc, 30);
        let sampling = SamplingConfig::default();
        let data = LocalDataset::new(0, (0..9).map(|i| i * 3).collect());
        let run = |selection| {
            let mut client = ClientState {
                id: 0,
                data: data.clone(),
                user: initial_user(&tc, 0),
                malicious: false,
                log: None,
            };
            let plan = LocalPlan {
                train: &tc,
                sampling: &sampling,
                epochs: 2,
                row_selection: selection,
            };
            client_update(&mut client, &global, plan, 1, 5)
                .unwrap()
                .item_deltas
        };
        let full = run(None);
        for mode in [SelectionMode::Importance, SelectionMode::Random] {
            let kept = run(Some((mode, 0.5)));
            assert_eq!(kept.len(), devicelog::keep_count(full.len(), 0.5));
            assert!(kept.iter().all(|(id, row)| full[id] == *row), "{mode:?}");
        }
        assert_eq!(
            run(Some((SelectionMode::Importance, 0.5))),
            devicelog::select_important(&full, 0.5)
        );
    }
}
