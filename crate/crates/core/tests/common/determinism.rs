//! Seeded runs reproduce bit-for-bit, and replay paths reduce to training
//! when nothing is removed. Shared by the `determinism` test target and the
//! acceptance runner.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use fru_core::dataset::RawInteraction;
use fru_core::experiment::{self, DatasetKind, DatasetSpec, ExperimentConfig, UnlearnSpec};
use fru_core::federation::{self, TrainOptions};
use fru_core::model::checkpoint;
use fru_core::unlearn::{self, Reconstruction, RunArtifacts};
use fru_core::{
    adversary, rng, AttackConfig, Error, FederationConfig, LogConfig, ModelKind, SamplingConfig,
    SamplingStrategy, SplitDataset, TrainConfig, TrainOutcome, UnlearnConfig, UnlearnMode,
};
use rand::Rng;

const USERS: u32 = 30;
const ITEMS: u32 = 40;

fn interactions() -> Vec<RawInteraction> {
    let mut r = rng::from_seed(3);
    let mut out = Vec::new();
    for u in 0..USERS {
        let n = r.random_range(5..14);
        let mut items = BTreeSet::new();
        while items.len() < n {
            items.insert(r.random_range(0..ITEMS));
        }
        for (t, i) in items.into_iter().enumerate() {
            out.push(RawInteraction {
                user_id: u,
                item_id: i,
                timestamp: Some(t as i64 * 7 + i64::from(u)),
            });
        }
    }
    out
}

fn dataset() -> SplitDataset {
    SplitDataset::from_interactions("tiny", USERS as usize, ITEMS as usize, &interactions(), 1)
        .unwrap()
}

fn fed_config(model: ModelKind, keep_fraction: f64, attack: bool) -> FederationConfig {
    let mut train = TrainConfig::new(model);
    train.embedding_size = 4;
    train.ffn_dims = vec![6, 3];
    train.local_epochs = 10;
    train.global_rounds = 6;
    train.client_fraction = 30.0;
    train.learning_rate = 0.1;
    train.seed = 21;
    FederationConfig {
        train,
        sampling: SamplingConfig {
            pool_percent: 25.0,
            shrink_factor: 0.5,
            strategy: SamplingStrategy::Mixed,
        },
        log: LogConfig {
            keep_fraction,
            sync: false,
            ..LogConfig::default()
        },
        attack: attack.then(AttackConfig::default),
    }
}

fn train(
    data: &SplitDataset,
    fed: &FederationConfig,
    logs: &Path,
) -> (TrainOutcome, BTreeSet<u32>) {
    let malicious = match &fed.attack {
        Some(a) => adversary::designate_malicious(
            data.user_count,
            a.malicious_fraction,
            &mut rng::stream(fed.train.seed, rng::MALICIOUS, &[]),
        )
        .unwrap(),
        None => BTreeSet::new(),
    };
    let options = TrainOptions {
        log_dir: Some(logs.to_path_buf()),
        excluded: BTreeSet::new(),
        malicious: malicious.clone(),
        serial: true,
    };
    (
        federation::train(data, fed, &options, None).unwrap(),
        malicious,
    )
}

fn run_unlearn(
    data: &SplitDataset,
    fed: &FederationConfig,
    outcome: &TrainOutcome,
    logs: &Path,
    config: &UnlearnConfig,
) -> Reconstruction {
    let artifacts = RunArtifacts {
        dataset: data,
        config: fed,
        initial: &outcome.initial,
        trace: &outcome.trace,
        log_dir: logs,
    };
    unlearn::unlearn(artifacts, config, true).unwrap()
}

fn checkpoint_bytes(params: &fru_core::GlobalParameters, dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    checkpoint::save(params, &path).unwrap();
    fs::read(path).unwrap()
}

pub fn training_twice_gives_identical_checkpoints() {
    let data = dataset();
    for model in [ModelKind::Ncf, ModelKind::LightGcn] {
        let fed = fed_config(model, 0.5, true);
        let dir = tempfile::tempdir().unwrap();
        let (a, _) = train(&data, &fed, &dir.path().join("a"));
        let (b, _) = train(&data, &fed, &dir.path().join("b"));
        assert_eq!(
            checkpoint_bytes(&a.global, dir.path(), "a.bin"),
            checkpoint_bytes(&b.global, dir.path(), "b.bin")
        );
        assert_eq!(a.user_table(), b.user_table());
        assert_eq!(a.trace, b.trace);
        for c in 0..USERS {
            let read =
                |d: &str| fs::read(fru_core::devicelog::log_path(&dir.path().join(d), c)).unwrap();
            assert_eq!(read("a"), read("b"), "log of client {c}");
        }
    }
}

pub fn every_unlearning_mode_is_reproducible() {
    let data = dataset();
    let fed = fed_config(ModelKind::LightGcn, 0.5, true);
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let (outcome, malicious) = train(&data, &fed, &logs);
    assert!(!malicious.is_empty());
    for mode in [
        UnlearnMode::Fru,
        UnlearnMode::FruWithoutIus,
        UnlearnMode::FedRemove,
        UnlearnMode::Retrain,
    ] {
        let config = UnlearnConfig::new(mode, malicious.clone());
        let a = run_unlearn(&data, &fed, &outcome, &logs, &config);
        let b = run_unlearn(&data, &fed, &outcome, &logs, &config);
        assert_eq!(
            checkpoint_bytes(&a.global, dir.path(), "a.bin"),
            checkpoint_bytes(&b.global, dir.path(), "b.bin"),
            "{mode:?}"
        );
        assert_eq!(
            federation::user_table(&a.clients),
            federation::user_table(&b.clients)
        );
        assert_ne!(a.global, outcome.global, "{mode:?} changed nothing");
    }
}

pub fn removed_clients_logs_are_never_read() {
    let data = dataset();
    let fed = fed_config(ModelKind::Ncf, 0.5, true);
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let (outcome, malicious) = train(&data, &fed, &logs);
    let config = UnlearnConfig::new(UnlearnMode::Fru, malicious.clone());
    let before = run_unlearn(&data, &fed, &outcome, &logs, &config);
    for &c in &malicious {
        fs::remove_file(fru_core::devicelog::log_path(&logs, c)).unwrap();
    }
    let after = run_unlearn(&data, &fed, &outcome, &logs, &config);
    assert_eq!(before.global, after.global);
    assert_eq!(
        federation::user_table(&before.clients),
        federation::user_table(&after.clients)
    );
}

pub fn exact_replay_reproduces_training() {
    let data = dataset();
    for model in [ModelKind::Ncf, ModelKind::LightGcn] {
        let fed = fed_config(model, 1.0, false);
        let dir = tempfile::tempdir().unwrap();
        let logs = dir.path().join("logs");
        let (outcome, _) = train(&data, &fed, &logs);
        let config = UnlearnConfig {
            mode: UnlearnMode::Fru,
            speedup_factor: 1.0,
            targets: BTreeSet::new(),
            reuse_training_seeds: true,
        };
        let replay = run_unlearn(&data, &fed, &outcome, &logs, &config);
        assert_eq!(replay.global, outcome.global, "{model:?}");
        assert_eq!(
            federation::user_table(&replay.clients),
            outcome.user_table()
        );
    }
}

pub fn fedremove_without_targets_restores_the_trained_model() {
    let data = dataset();
    let fed = fed_config(ModelKind::LightGcn, 1.0, false);
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let (outcome, _) = train(&data, &fed, &logs);
    let config = UnlearnConfig::new(UnlearnMode::FedRemove, BTreeSet::new());
    let replay = run_unlearn(&data, &fed, &outcome, &logs, &config);
    assert_eq!(replay.global, outcome.global);
    assert_eq!(
        federation::user_table(&replay.clients),
        outcome.user_table()
    );
}

pub fn unknown_target_is_rejected() {
    let data = dataset();
    let fed = fed_config(ModelKind::LightGcn, 0.5, false);
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let (outcome, _) = train(&data, &fed, &logs);
    let artifacts = RunArtifacts {
        dataset: &data,
        config: &fed,
        initial: &outcome.initial,
        trace: &outcome.trace,
        log_dir: &logs,
    };
    let config = UnlearnConfig::new(UnlearnMode::Fru, BTreeSet::from([USERS + 5]));
    assert!(matches!(
        unlearn::unlearn(artifacts, &config, true),
        Err(Error::UnknownClient(_))
    ));
}

fn write_movielens(path: &Path) {
    let body: String = interactions()
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t4\t{}\n",
                r.user_id + 1,
                r.item_id + 1,
                r.timestamp.unwrap()
            )
        })
        .collect();
    fs::write(path, body).unwrap();
}

fn experiment_config(data: &Path) -> ExperimentConfig {
    let fed = fed_config(ModelKind::LightGcn, 0.5, true);
    ExperimentConfig {
        dataset: DatasetSpec {
            kind: DatasetKind::Movielens,
            path: data.to_path_buf(),
        },
        train: fed.train,
        sampling: fed.sampling,
        log: fed.log,
        attack: fed.attack,
        unlearn: None,
        output: None,
        eval_every: 0,
        serial: true,
    }
}

pub fn run_directories_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("u.data");
    write_movielens(&data);
    let config = experiment_config(&data);
    let a = experiment::run_train(&config, &dir.path().join("a"), false).unwrap();
    let b = experiment::run_train(&config, &dir.path().join("b"), false).unwrap();
    assert_eq!(a.manifest, b.manifest);
    for file in [
        experiment::MANIFEST,
        experiment::DATASET,
        experiment::TRACE,
        experiment::CHECKPOINT_INIT,
        experiment::CHECKPOINT_FINAL,
        experiment::USERS_FINAL,
    ] {
        let read = |d: &str| fs::read(dir.path().join(d).join(file)).unwrap();
        assert_eq!(read("a"), read("b"), "{file}");
    }

    let spec = UnlearnSpec {
        mode: UnlearnMode::Fru,
        speedup_factor: 0.25,
        targets: "auto".parse().unwrap(),
    };
    let ua = experiment::run_unlearn(&dir.path().join("a"), &spec, true, false).unwrap();
    let ub = experiment::run_unlearn(&dir.path().join("b"), &spec, true, false).unwrap();
    assert_eq!(
        fs::read(ua.out_dir.join(experiment::UNLEARN_CHECKPOINT)).unwrap(),
        fs::read(ub.out_dir.join(experiment::UNLEARN_CHECKPOINT)).unwrap()
    );
    // A second unlearn into the same directory needs --force.
    let again = experiment::run_unlearn(&dir.path().join("a"), &spec, true, false);
    assert!(matches!(again, Err(e) if e.is_config_error()));
    experiment::run_unlearn(&dir.path().join("a"), &spec, true, true).unwrap();
}

pub fn non_empty_output_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("u.data");
    write_movielens(&data);
    let out = dir.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let config = experiment_config(&data);
    let err = experiment::run_train(&config, &out, false).unwrap_err();
    assert!(err.is_config_error());
    assert!(out.join("keep.txt").exists());
    experiment::run_train(&config, &out, true).unwrap();
    assert!(out.join(experiment::MANIFEST).exists());
}
