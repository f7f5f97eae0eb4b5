//! Run directories: train, unlearn, evaluate and report on experiments whose
//! every artifact lives on disk.
//!
//! A run directory holds
//!
//! ```text
//! manifest.json         resolved config, config hash, seed, malicious set
//! dataset.json          the train/test split
//! trace.json            per-round participants and client seeds
//! checkpoint_init.bin   V_0
//! checkpoint_final.bin  V_T
//! users_final.bin       user embedding table after training
//! metrics.csv           per-round timing (and metrics when eval_every > 0)
//! evaluation.json       one report row for the trained model
//! timing.json           wall-clock of the training run
//! logs/                 one device log per client
//! unlearn/<mode>-<λ>/   reconstructed checkpoint, users, timing, evaluation
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{self, AttackConfig};
use crate::dataset::{self, SplitDataset};
use crate::devicelog::{self, ClientStorage, DeviceLog, LogConfig, StorageInputs, StorageReport};
use crate::error::{Error, Result};
use crate::evalkit::{self, ExperimentReport, Metrics, Recommender, ReportRow};
use crate::federation::{self, ClientState, FederationConfig, SelectionTrace, TrainOptions};
use crate::model::{checkpoint, GlobalParameters, TrainConfig};
use crate::negsample::SamplingConfig;
use crate::rng;
use crate::unlearn::{self, RunArtifacts, TimingReport, UnlearnConfig, UnlearnMode};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.json";
pub const TRACE: &str = "trace.json";
pub const CHECKPOINT_INIT: &str = "checkpoint_init.bin";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.bin";
pub const USERS_FINAL: &str = "users_final.bin";
pub const METRICS: &str = "metrics.csv";
pub const EVALUATION: &str = "evaluation.json";
pub const TIMING: &str = "timing.json";
pub const LOGS: &str = "logs";
pub const UNLEARN_DIR: &str = "unlearn";
pub const UNLEARN_CHECKPOINT: &str = "checkpoint.bin";
pub const UNLEARN_USERS: &str = "users.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Movielens,
    Steam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: PathBuf,
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<SplitDataset> {
        match self.kind {
            DatasetKind::Movielens => dataset::load_movielens(&self.path, seed),
            DatasetKind::Steam => dataset::load_steam(&self.path, seed),
        }
    }
}

/// Which clients to remove: the run's malicious set, or explicit ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Targets {
    Auto(AutoTargets),
    Ids(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTargets {
    Auto,
}

impl Default for Targets {
    fn default() -> Self {
        Targets::Auto(AutoTargets::Auto)
    }
}

impl std::str::FromStr for Targets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("auto") {
            return Ok(Targets::default());
        }
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad client id {p:?} in targets")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Targets::Ids)
    }
}

fn default_mode() -> UnlearnMode {
    UnlearnMode::Fru
}
fn default_speedup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSpec {
    #[serde(default = "default_mode")]
    pub mode: UnlearnMode,
    #[serde(default = "default_speedup")]
    pub speedup_factor: f64,
    #[serde(default)]
    pub targets: Targets,
}

impl Default for UnlearnSpec {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            speedup_factor: default_speedup(),
            targets: Targets::default(),
        }
    }
}

/// Everything needed to reproduce a run. Stored resolved in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub unlearn: Option<UnlearnSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Evaluate every this many rounds during training (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub serial: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            train: self.train.clone(),
            sampling: self.sampling.clone(),
            log: self.log.clone(),
            attack: self.attack.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.path.exists() {
            return Err(Error::Config(format!(
                "dataset file {} does not exist",
                self.dataset.path.display()
            )));
        }
        self.federation().validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
}

impl From<&SplitDataset> for DatasetSummary {
    fn from(d: &SplitDataset) -> Self {
        Self {
            name: d.name.clone(),
            users: d.user_count,
            items: d.item_count,
            train_interactions: d.train_interaction_count(),
            test_interactions: d.test_interaction_count(),
        }
    }
}

/// Self-description of a run directory. Contains nothing time-dependent, so
/// identical configs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub streams: Vec<String>,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub malicious: Vec<u32>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(MANIFEST))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set, in which
/// case its previous contents are removed.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn method_label(config: &ExperimentConfig) -> &'static str {
    if config.attack.is_some() {
        "attacked"
    } else {
        "clean"
    }
}

fn recommender<'a>(
    train: &TrainConfig,
    global: &'a GlobalParameters,
    users: &'a ndarray::Array2<f32>,
    dataset: &'a SplitDataset,
) -> Recommender<'a> {
    Recommender {
        kind: train.model,
        lightgcn_layers: train.lightgcn_layers,
        global,
        users,
        dataset,
    }
}

fn report_row(
    manifest: &Manifest,
    method: &str,
    metrics: Metrics,
    seconds: Option<f64>,
) -> ReportRow {
    ReportRow {
        dataset: manifest.dataset.name.clone(),
        model: manifest.config.train.model.as_str().to_string(),
        malicious_fraction: manifest
            .config
            .attack
            .as_ref()
            .map_or(0.0, |a| a.malicious_fraction),
        method: method.to_string(),
        hit: metrics.hit,
        ndcg: metrics.ndcg,
        seconds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seconds_total: f64,
    pub seconds_per_round: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub evaluation: ReportRow,
}

/// Trains (with the attack when configured) and writes a complete run directory.
pub fn run_train(config: &ExperimentConfig, out: &Path, force: bool) -> Result<TrainSummary> {
    config.validate()?;
    let seed = config.train.seed;
    let data = config.dataset.load(seed)?;
    let malicious = match &config.attack {
        Some(a) => adversary::designate_malicious(
            data.user_count,
            a.malicious_fraction,
            &mut rng::stream(seed, rng::MALICIOUS, &[]),
        )?,
        None => BTreeSet::new(),
    };
    prepare_output(out, force)?;

    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seed,
        streams: [
            rng::SELECTION,
            rng::INIT,
            rng::CLIENT,
            rng::ATTACK,
            rng::UNLEARN,
            rng::MALICIOUS,
            rng::SPLIT,
            rng::EVAL,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        config: config.clone(),
        dataset: DatasetSummary::from(&data),
        malicious: malicious.iter().copied().collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    data.save_json(&out.join(DATASET))?;

    let fed = config.federation();
    let options = TrainOptions {
        log_dir: Some(out.join(LOGS)),
        excluded: BTreeSet::new(),
        malicious: malicious.clone(),
        serial: config.serial,
    };
    let mut curve: Vec<(u32, Metrics)> = Vec::new();
    let eval_every = config.eval_every;
    let mut hook = |t: u32, global: &GlobalParameters, clients: &[ClientState]| -> Result<()> {
        if eval_every > 0 && (t as usize).is_multiple_of(eval_every) {
            let users = federation::user_table(clients);
            let m = evalkit::evaluate(
                recommender(&config.train, global, &users, &data),
                &malicious,
                seed,
            )?;
            log::info!("round {t}: HR@10 {:.2} NDCG@10 {:.2}", m.hit, m.ndcg);
            curve.push((t, m));
        }
        Ok(())
    };
    let outcome = federation::train(&data, &fed, &options, Some(&mut hook))?;

    checkpoint::save(&outcome.initial, &out.join(CHECKPOINT_INIT))?;
    checkpoint::save(&outcome.global, &out.join(CHECKPOINT_FINAL))?;
    let users = outcome.user_table();
    checkpoint::save_users(&users, &out.join(USERS_FINAL))?;
    outcome.trace.save(&out.join(TRACE))?;
    write_metrics(
        &out.join(METRICS),
        &outcome.trace,
        &outcome.round_seconds,
        &curve,
    )?;
    let timing = RunTiming {
        seconds_total: outcome.round_seconds.iter().sum(),
        seconds_per_round: outcome.round_seconds.clone(),
    };
    write_json(&out.join(TIMING), &timing)?;

    let metrics = evalkit::evaluate(
        recommender(&config.train, &outcome.global, &users, &data),
        &malicious,
        seed,
    )?;
    let evaluation = report_row(
        &manifest,
        method_label(config),
        metrics,
        Some(timing.seconds_total),
    );
    write_json(&out.join(EVALUATION), &evaluation)?;
    Ok(TrainSummary {
        run_dir: out.to_path_buf(),
        manifest,
        evaluation,
    })
}

fn write_metrics(
    path: &Path,
    trace: &SelectionTrace,
    seconds: &[f64],
    curve: &[(u32, Metrics)],
) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        round: u32,
        participants: usize,
        seconds: f64,
        hit: Option<f64>,
        ndcg: Option<f64>,
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for (r, s) in trace.rounds.iter().zip(seconds) {
        let m = curve.iter().find(|(t, _)| *t == r.round).map(|(_, m)| m);
        w.serialize(Row {
            round: r.round,
            participants: r.clients.len(),
            seconds: *s,
            hit: m.map(|m| m.hit),
            ndcg: m.map(|m| m.ndcg),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Data and state of a finished training run.
#[derive(Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub dataset: SplitDataset,
    pub trace: SelectionTrace,
    pub initial: GlobalParameters,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        for required in [MANIFEST, DATASET, TRACE, CHECKPOINT_INIT] {
            if !dir.join(required).exists() {
                return Err(Error::Config(format!(
                    "{} is not a complete run directory: missing {required}",
                    dir.display()
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::load(dir)?,
            dataset: SplitDataset::load_json(&dir.join(DATASET))?,
            trace: SelectionTrace::load(&dir.join(TRACE))?,
            initial: checkpoint::load(&dir.join(CHECKPOINT_INIT))?,
        })
    }

    pub fn resolve_targets(&self, targets: &Targets) -> Result<BTreeSet<u32>> {
        let set: BTreeSet<u32> = match targets {
            Targets::Auto(_) => self.manifest.malicious.iter().copied().collect(),
            Targets::Ids(ids) => ids.iter().copied().collect(),
        };
        if set.is_empty() {
            return Err(Error::Config(
                "no clients to remove: the run has no malicious set and no targets were given"
                    .into(),
            ));
        }
        Ok(set)
    }
}

#[derive(Debug)]
pub struct UnlearnSummary {
    pub out_dir: PathBuf,
    pub timing: TimingReport,
    pub evaluation: ReportRow,
}

fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}").replace('.', "_")
}

/// Runs one unlearning mode on a run directory and stores the result under
/// `unlearn/<mode>-<λ>/`.
pub fn run_unlearn(
    run_dir: &Path,
    spec: &UnlearnSpec,
    serial: bool,
    force: bool,
) -> Result<UnlearnSummary> {
    let run = LoadedRun::open(run_dir)?;
    let targets = run.resolve_targets(&spec.targets)?;
    let fed = run.manifest.config.federation();
    let config = UnlearnConfig {
        mode: spec.mode,
        speedup_factor: spec.speedup_factor,
        targets: targets.clone(),
        reuse_training_seeds: false,
    };
    let out = run_dir.join(UNLEARN_DIR).join(format!(
        "{}-{}",
        spec.mode.as_str(),
        lambda_tag(spec.speedup_factor)
    ));
    prepare_output(&out, force)?;

    let log_dir = run_dir.join(LOGS);
    let artifacts = RunArtifacts {
        dataset: &run.dataset,
        config: &fed,
        initial: &run.initial,
        trace: &run.trace,
        log_dir: &log_dir,
    };
    let result = unlearn::unlearn(artifacts, &config, serial)?;

    checkpoint::save(&result.global, &out.join(UNLEARN_CHECKPOINT))?;
    let users = federation::user_table(&result.clients);
    checkpoint::save_users(&users, &out.join(UNLEARN_USERS))?;
    write_json(&out.join(TIMING), &result.timing)?;
    let metrics = evalkit::evaluate(
        recommender(&fed.train, &result.global, &users, &run.dataset),
        &targets,
        run.manifest.seed,
    )?;
    let evaluation = report_row(
        &run.manifest,
        spec.mode.as_str(),
        metrics,
        Some(result.timing.seconds_total),
    );
    write_json(&out.join(EVALUATION), &evaluation)?;
    Ok(UnlearnSummary {
        out_dir: out,
        timing: result.timing,
        evaluation,
    })
}

/// Re-evaluates the final trained model of a run.
pub fn run_evaluate(run_dir: &Path) -> Result<ReportRow> {
    let run = LoadedRun::open(run_dir)?;
    let global = checkpoint::load(&run_dir.join(CHECKPOINT_FINAL))?;
    let users = checkpoint::load_users(&run_dir.join(USERS_FINAL))?;
    let exclude: BTreeSet<u32> = run.manifest.malicious.iter().copied().collect();
    let metrics = evalkit::evaluate(
        recommender(&run.manifest.config.train, &global, &users, &run.dataset),
        &exclude,
        run.manifest.seed,
    )?;
    Ok(report_row(
        &run.manifest,
        method_label(&run.manifest.config),
        metrics,
        None,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub lambda: Option<f64>,
    pub seconds_total: f64,
}

/// Combined comparison table and timing table over several run directories.
pub fn collect_report(run_dirs: &[PathBuf]) -> Result<(ExperimentReport, Vec<TimingRow>)> {
    if run_dirs.is_empty() {
        return Err(Error::Config(
            "report needs at least one run directory".into(),
        ));
    }
    let mut report = ExperimentReport::default();
    let mut timings = Vec::new();
    let mut datasets = BTreeSet::new();
    for dir in run_dirs {
        let manifest = Manifest::load(dir)?;
        datasets.insert(manifest.dataset.name.clone());
        let row: ReportRow = read_json(&dir.join(EVALUATION))?;
        if let Ok(t) = read_json::<RunTiming>(&dir.join(TIMING)) {
            timings.push(TimingRow {
                dataset: row.dataset.clone(),
                model: row.model.clone(),
                method: row.method.clone(),
                lambda: None,
                seconds_total: t.seconds_total,
            });
        }
        report.push(row);
        let unlearn_root = dir.join(UNLEARN_DIR);
        if unlearn_root.is_dir() {
            let mut subdirs: Vec<PathBuf> = fs::read_dir(&unlearn_root)
                .map_err(|e| Error::io(&unlearn_root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(EVALUATION).exists())
                .collect();
            subdirs.sort();
            for sub in subdirs {
                let row: ReportRow = read_json(&sub.join(EVALUATION))?;
                let t: TimingReport = read_json(&sub.join(TIMING))?;
                timings.push(TimingRow {
                    dataset: row.dataset.clone(),
                    model: row.model.clone(),
                    method: row.method.clone(),
                    lambda: (t.mode != UnlearnMode::Retrain && t.mode != UnlearnMode::FedRemove)
                        .then_some(t.lambda),
                    seconds_total: t.seconds_total,
                });
                report.push(row);
            }
        }
    }
    if datasets.len() > 1 {
        log::warn!(
            "report mixes datasets: {}",
            datasets.into_iter().collect::<Vec<_>>().join(", ")
        );
    }
    Ok((report, timings))
}

pub fn write_timing_csv<W: std::io::Write>(rows: &[TimingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn storage_inputs(config: &FederationConfig, data: &SplitDataset) -> StorageInputs {
    StorageInputs {
        global_rounds: config.train.global_rounds,
        client_fraction: config.train.client_fraction,
        keep_fraction: config.log.keep_fraction,
        shrink_factor: config.sampling.shrink_factor,
        negative_ratio: config.train.negative_ratio(),
        average_positives: data.average_positive_count(),
        item_count: data.item_count,
    }
}

/// Compares each client's log against the closed-form estimate and the
/// participation-aware bound. Only clients with a log file are listed.
pub fn storage_report(
    config: &FederationConfig,
    data: &SplitDataset,
    trace: &SelectionTrace,
    log_dir: &Path,
) -> Result<StorageReport> {
    let prediction = devicelog::predict_storage(&storage_inputs(config, data));
    let per_participation =
        config.train.client_fraction / 100.0 * config.train.global_rounds as f64;
    let (alpha, beta, n) = (
        config.log.keep_fraction,
        config.sampling.shrink_factor,
        config.train.negative_ratio() as f64,
    );
    let e = config.train.embedding_size as u64;
    let mut clients = Vec::new();
    let mut dense_overhead_bytes = 0u64;
    for local in &data.train {
        let path = devicelog::log_path(log_dir, local.owner);
        if !path.exists() {
            continue;
        }
        let log = DeviceLog::open(&path, local.owner, config.train.embedding_size)?;
        let pos = local.positives.len();
        let participations = trace.participations(local.owner);
        let rows_per_round = pos
            + config
                .sampling
                .sample_size(pos, config.train.negative_ratio());
        let measured = log.stored_rows();
        dense_overhead_bytes += log
            .stored_bytes()
            .saturating_sub(measured as u64 * (4 + 4 * e));
        clients.push(ClientStorage {
            client: local.owner,
            positives: pos,
            participations,
            predicted_rows: per_participation * alpha * (1.0 + beta * n) * pos as f64,
            bound_rows: participations * devicelog::keep_count(rows_per_round, alpha),
            measured_rows: measured,
        });
    }
    Ok(StorageReport {
        prediction,
        clients,
        dense_overhead_bytes,
    })
}
