//! Independent reference implementations checked against the library.
//! Shared by the `oracles` test target and the acceptance runner.

use std::collections::{BTreeMap, BTreeSet};

use fru_core::devicelog::{self, DeviceLog, LogEntry};
use fru_core::evalkit::rank_and_score;
use fru_core::federation::{aggregate, RowDeltas, ServerUpdate, UpdateRecord};
use fru_core::model::{
    lightgcn_propagate, DenseLayer, DenseWeights, GlobalParameters, LocalModel, ModelKind,
    PrivateParameters,
};
use fru_core::negsample::{self, SamplingConfig, SamplingStrategy};
use fru_core::unlearn::calibrate;
use fru_core::{adversary, rng, AggregatedDelta, AttackConfig, LocalDataset};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Runs `test` on `cases` generated inputs, panicking with the shrunk
/// counterexample on failure.
fn check<S: Strategy>(cases: u32, inputs: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    if let Err(e) = TestRunner::new(config).run(&inputs, test) {
        panic!("{e}");
    }
}

fn uniform_params(
    kind: ModelKind,
    items: usize,
    e: usize,
    ffn: &[usize],
    seed: u64,
) -> (GlobalParameters<f64>, PrivateParameters<f64>) {
    let mut r = rng::from_seed(seed);
    let mut g = GlobalParameters::<f64>::init(kind, items, e, ffn, &mut r);
    g.item_embeddings
        .mapv_inplace(|_| r.random_range(-1.0..1.0));
    let user = PrivateParameters {
        user_embedding: Array1::from_shape_fn(e, |_| r.random_range(-1.0..1.0)),
    };
    (g, user)
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs());
    let err = (analytic - numeric).abs();
    assert!(
        err <= 1e-4 * scale || err <= 1e-9,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

/// Central differences over every local parameter of `model`.
fn check_gradients(model: &LocalModel<f64>) {
    let batch = model.all_samples();
    let (_, grads) = model.loss_and_grad(&batch);
    let h = 1e-6;
    let numeric = |perturb: &dyn Fn(&mut LocalModel<f64>, f64)| {
        let mut plus = model.clone();
        perturb(&mut plus, h);
        let mut minus = model.clone();
        perturb(&mut minus, -h);
        (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * h)
    };
    for i in 0..model.user.len() {
        let n = numeric(&|m, d| m.user[i] += d);
        assert_close(grads.user[i], n, &format!("user[{i}]"));
    }
    for ((r, c), &a) in grads.items.indexed_iter() {
        let n = numeric(&|m, d| m.items[[r, c]] += d);
        assert_close(a, n, &format!("item[{r},{c}]"));
    }
    let analytic_dense = grads.dense.to_tensor_vecs();
    for (t, tensor) in analytic_dense.iter().enumerate() {
        for (j, &a) in tensor.iter().enumerate() {
            let n = numeric(&|m, d| m.dense.tensors_mut()[t][j] += d);
            assert_close(a, n, &format!("dense[{t}][{j}]"));
        }
    }
}

pub fn ncf_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (g, user) = uniform_params(ModelKind::Ncf, 7, 3, &[5, 4], seed);
        let model = LocalModel::gather(ModelKind::Ncf, 0, &g, &user, &[1, 4], &[0, 3, 6]).unwrap();
        check_gradients(&model);
    }
}

pub fn lightgcn_gradients_match_finite_differences() {
    for layers in 0..4 {
        let (g, user) = uniform_params(ModelKind::LightGcn, 8, 4, &[], layers as u64);
        let model = LocalModel::gather(ModelKind::LightGcn, layers, &g, &user, &[0, 2, 5], &[1, 7])
            .unwrap();
        check_gradients(&model);
    }
}

/// Dense symmetric-normalized propagation over the user plus all items.
fn brute_force_lightgcn(
    user: &[f64],
    items: &Array2<f64>,
    positives: &[u32],
    layers: usize,
) -> Array2<f64> {
    let n = 1 + items.nrows();
    let e = user.len();
    let mut adj = Array2::<f64>::zeros((n, n));
    for &p in positives {
        adj[[0, 1 + p as usize]] = 1.0;
        adj[[1 + p as usize, 0]] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let mut norm = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if adj[[i, j]] > 0.0 {
                norm[[i, j]] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    let mut cur = Array2::<f64>::zeros((n, e));
    cur.row_mut(0).assign(&Array1::from_vec(user.to_vec()));
    for i in 0..items.nrows() {
        cur.row_mut(1 + i).assign(&items.row(i));
    }
    let mut sum = cur.clone();
    for _ in 0..layers {
        cur = norm.dot(&cur);
        sum += &cur;
    }
    sum / (layers + 1) as f64
}

pub fn lightgcn_matches_dense_propagation() {
    let inputs = (1usize..5, 1u32..16, 0usize..4, any::<u64>());
    check(200, inputs, |(item_count, mask, layers, seed)| {
        let positives: Vec<u32> = (0..item_count as u32)
            .filter(|i| mask & (1 << i) != 0)
            .collect();
        prop_assume!(!positives.is_empty());
        let (g, user) = uniform_params(ModelKind::LightGcn, item_count, 3, &[], seed);
        let local = LocalDataset::new(0, positives.clone());
        let prop = lightgcn_propagate(&local, &g, &user, layers).unwrap();
        let expected = brute_force_lightgcn(
            user.user_embedding.as_slice().unwrap(),
            &g.item_embeddings,
            &positives,
            layers,
        );
        for (a, b) in prop.user.iter().zip(expected.row(0)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        for item in 0..item_count as u32 {
            let got = match positives.iter().position(|&p| p == item) {
                Some(r) => prop.items.row(r).to_owned(),
                None => prop.outside_item(g.item_embeddings.row(item as usize), layers),
            };
            for (a, b) in got.iter().zip(expected.row(1 + item as usize)) {
                prop_assert!(
                    (a - b).abs() <= 1e-6,
                    "item {} differs: {} vs {}",
                    item,
                    a,
                    b
                );
            }
        }
        Ok(())
    });
}

fn row_deltas() -> impl Strategy<Value = RowDeltas> {
    // Values from a small grid so equal norms (ties) are common.
    prop::collection::btree_map(0u32..60, prop::collection::vec(-3i8..=3, 3), 0..25).prop_map(|m| {
        m.into_iter()
            .map(|(id, row)| (id, row.into_iter().map(|v| f32::from(v) * 0.5).collect()))
            .collect()
    })
}

pub fn select_important_matches_full_sort() {
    check(1000, (row_deltas(), 1u32..=20), |(deltas, num)| {
        let alpha = f64::from(num) / 20.0;
        let m = deltas.len();
        let keep = (num as usize * m).div_ceil(20);
        let mut ranked: Vec<(f64, u32)> = deltas
            .iter()
            .map(|(&id, row)| {
                (
                    row.iter()
                        .map(|&v| f64::from(v).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                    id,
                )
            })
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: BTreeSet<u32> = ranked[..keep].iter().map(|&(_, id)| id).collect();
        let got = devicelog::select_important(&deltas, alpha);
        prop_assert_eq!(got.keys().copied().collect::<BTreeSet<u32>>(), expected);
        for (id, row) in &got {
            prop_assert_eq!(row, &deltas[id]);
        }
        Ok(())
    });
}

pub fn ranking_metrics_match_full_sort() {
    let inputs = (
        prop::collection::vec(0u8..8, 2..120),
        any::<prop::sample::Index>(),
        0u32..1000,
    );
    check(1000, inputs, |(scores, target_pos, shift)| {
        let scored: Vec<(u32, f32)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ((i as u32 * 7 + shift) % 2000, f32::from(s) / 4.0))
            .collect();
        let target = scored[target_pos.index(scored.len())].0;
        let mut sorted = scored.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let p = sorted.iter().position(|&(i, _)| i == target).unwrap();
        let (hit, ndcg) = rank_and_score(target, &scored, 10);
        let expected = if p < 10 {
            (1.0, 1.0 / ((p + 2) as f64).log2())
        } else {
            (0.0, 0.0)
        };
        prop_assert_eq!((hit, ndcg), expected);
        Ok(())
    });
}

fn dense_weights(values: &[f32]) -> DenseWeights<f32> {
    DenseWeights {
        layers: vec![DenseLayer {
            weight: Array2::from_shape_vec((2, 2), values[..4].to_vec()).unwrap(),
            bias: Array1::from_vec(values[4..6].to_vec()),
        }],
        output: Array1::from_vec(values[6..8].to_vec()),
    }
}

fn aggregated() -> impl Strategy<Value = AggregatedDelta> {
    (
        prop::collection::btree_map(0u32..20, prop::collection::vec(-10.0f32..10.0, 4), 1..10),
        prop::collection::vec(-10.0f32..10.0, 8),
    )
        .prop_map(|(item_rows, dense)| AggregatedDelta {
            item_rows,
            dense: dense_weights(&dense),
        })
}

fn l2(values: impl Iterator<Item = f32>) -> f64 {
    values.map(|v| f64::from(v).powi(2)).sum::<f64>().sqrt()
}

/// Flattens item rows over the union of both supports, zero-filling gaps.
fn flat_items(a: &RowDeltas, support: &BTreeSet<u32>, width: usize) -> Vec<f32> {
    support
        .iter()
        .flat_map(|id| a.get(id).cloned().unwrap_or_else(|| vec![0.0; width]))
        .collect()
}

pub fn calibrate_keeps_old_norm_and_new_direction() {
    check(500, (aggregated(), aggregated()), |(old, new)| {
        prop_assume!(l2(new.item_rows.values().flatten().copied()) > 1e-3);
        prop_assume!(new
            .dense
            .tensors()
            .iter()
            .all(|t| l2(t.iter().copied()) > 1e-3));
        let out = calibrate(&old, &new).unwrap();

        let support: BTreeSet<u32> = old
            .item_rows
            .keys()
            .chain(new.item_rows.keys())
            .copied()
            .collect();
        let pairs: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = std::iter::once((
            flat_items(&old.item_rows, &support, 4),
            flat_items(&new.item_rows, &support, 4),
            flat_items(&out.item_rows, &support, 4),
        ))
        .chain(
            old.dense
                .tensors()
                .into_iter()
                .zip(new.dense.tensors())
                .zip(out.dense.tensors())
                .map(|((a, b), c)| (a.to_vec(), b.to_vec(), c.to_vec())),
        )
        .collect();
        for (a, b, c) in pairs {
            let (na, nb, nc) = (
                l2(a.iter().copied()),
                l2(b.iter().copied()),
                l2(c.iter().copied()),
            );
            prop_assert!(
                (nc - na).abs() <= 1e-6 * na.max(1e-12),
                "norm {} vs {}",
                nc,
                na
            );
            let dot: f64 = c
                .iter()
                .zip(&b)
                .map(|(x, y)| f64::from(*x) * f64::from(*y))
                .sum();
            prop_assert!(
                (dot - na * nb).abs() <= 1e-6 * (na * nb).max(1e-12),
                "dot {} vs {}",
                dot,
                na * nb
            );
        }
        Ok(())
    });
}

fn strategy() -> impl Strategy<Value = SamplingStrategy> {
    prop_oneof![
        Just(SamplingStrategy::Random),
        Just(SamplingStrategy::UserBased),
        Just(SamplingStrategy::ItemBased),
        Just(SamplingStrategy::Mixed),
    ]
}

/// The `k` nearest non-positive items to `anchor`, by full sort in f64.
fn nearest(g: &GlobalParameters, positives: &[u32], anchor: &[f64], k: usize) -> BTreeSet<u32> {
    let mut d: Vec<(f64, u32)> = (0..g.item_count() as u32)
        .filter(|i| !positives.contains(i))
        .map(|i| {
            let row = g.item_embeddings.row(i as usize);
            let dist = row
                .iter()
                .zip(anchor)
                .map(|(&a, b)| (f64::from(a) - b).powi(2))
                .sum();
            (dist, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn sampled_negatives_respect_the_pool() {
    let inputs = (
        5usize..80,
        prop::collection::vec(any::<bool>(), 80),
        strategy(),
        5.0f64..50.0,
        0.1f64..=1.0,
        1usize..5,
        any::<u64>(),
    );
    check(
        300,
        inputs,
        |(item_count, positive_mask, strategy, pool_percent, beta, ratio, seed)| {
            let positives: Vec<u32> = (0..item_count as u32)
                .filter(|&i| positive_mask[i as usize])
                .collect();
            prop_assume!(!positives.is_empty() && positives.len() < item_count);
            let mut r = rng::from_seed(seed);
            let g = GlobalParameters::<f32>::init(ModelKind::LightGcn, item_count, 6, &[], &mut r);
            let user = PrivateParameters::<f32>::init(6, &mut r);
            let local = LocalDataset::new(0, positives.clone());
            let config = SamplingConfig {
                pool_percent,
                shrink_factor: beta,
                strategy,
            };
            let got =
                negsample::sample_negatives(&local, &g, &user, &config, ratio, &mut r).unwrap();

            prop_assert!(got.windows(2).all(|w| w[0] < w[1]), "sorted and unique");
            prop_assert!(got
                .iter()
                .all(|i| (*i as usize) < item_count && !positives.contains(i)));

            let k = config.pool_size(item_count);
            let user_anchor: Vec<f64> = user.user_embedding.iter().map(|&v| f64::from(v)).collect();
            let centroid: Vec<f64> = (0..6)
                .map(|c| {
                    positives
                        .iter()
                        .map(|&p| f64::from(g.item_embeddings[[p as usize, c]]))
                        .sum::<f64>()
                        / positives.len() as f64
                })
                .collect();
            let pool: BTreeSet<u32> = match strategy {
                SamplingStrategy::Random => (0..item_count as u32)
                    .filter(|i| !positives.contains(i))
                    .collect(),
                SamplingStrategy::UserBased => nearest(&g, &positives, &user_anchor, k),
                SamplingStrategy::ItemBased => nearest(&g, &positives, &centroid, k),
                SamplingStrategy::Mixed => nearest(&g, &positives, &user_anchor, k)
                    .union(&nearest(&g, &positives, &centroid, k))
                    .copied()
                    .collect(),
            };
            prop_assert!(
                got.iter().all(|i| pool.contains(i)),
                "sample outside the pool"
            );
            let target = config.sample_size(positives.len(), ratio);
            prop_assert_eq!(got.len(), target.min(pool.len()));
            Ok(())
        },
    );
}

pub fn poisoning_matches_seeded_reevaluation() {
    let mut r = rng::from_seed(11);
    let item_deltas: RowDeltas = (0..6u32)
        .map(|id| {
            (
                id * 3,
                (0..4).map(|_| r.random_range(-1.0f32..1.0)).collect(),
            )
        })
        .collect();
    let dense = dense_weights(
        &(0..8)
            .map(|_| r.random_range(-1.0f32..1.0))
            .collect::<Vec<_>>(),
    );
    let honest = UpdateRecord {
        round: 3,
        client_id: 5,
        item_deltas,
        dense_deltas: dense,
        user_delta: Array1::from_vec(vec![0.25, -0.5, 0.75, 1.0]),
    };
    let config = AttackConfig {
        malicious_fraction: 0.1,
        gamma_range: (0.5, 2.0),
        noise_scale: 0.3,
    };
    let mut poisoned = honest.clone();
    adversary::poison(&mut poisoned, &config, &mut rng::from_seed(99));

    // Re-derive every value from the same stream: γ first, then each tensor.
    let mut r = rng::from_seed(99);
    let gamma: f64 = r.random_range(0.5..=2.0);
    let mut flip = |values: Vec<f32>| -> Vec<f32> {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        let normal = Normal::new(mean, var.sqrt()).unwrap();
        values
            .iter()
            .map(|&v| (-gamma * f64::from(v) + 0.3 * normal.sample(&mut r)) as f32)
            .collect()
    };
    let expected_items = flip(honest.item_deltas.values().flatten().copied().collect());
    let got_items: Vec<f32> = poisoned.item_deltas.values().flatten().copied().collect();
    assert_eq!(got_items, expected_items);
    for (h, p) in honest
        .dense_deltas
        .tensors()
        .into_iter()
        .zip(poisoned.dense_deltas.tensors())
    {
        assert_eq!(p.to_vec(), flip(h.to_vec()));
    }
    assert_eq!(poisoned.user_delta, honest.user_delta);
}

fn log_entry(round: u32, r: &mut impl Rng) -> LogEntry {
    let rows = r.random_range(0..6);
    LogEntry {
        round,
        item_deltas: (0..rows)
            .map(|_| {
                (
                    r.random_range(0..50u32),
                    (0..4).map(|_| r.random::<f32>()).collect(),
                )
            })
            .collect(),
        dense_deltas: vec![
            (0..3).map(|_| r.random::<f32>()).collect(),
            vec![r.random()],
        ],
        user_embedding: (0..4).map(|_| r.random::<f32>()).collect(),
    }
}

pub fn device_log_round_trips_a_hundred_entries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.frulog");
    let mut r = rng::from_seed(5);
    let entries: Vec<LogEntry> = (1..=100).map(|t| log_entry(t * 2, &mut r)).collect();
    let mut log = DeviceLog::create(&path, 3, 4).unwrap();
    log.set_sync(false);
    for e in &entries {
        log.append(e).unwrap();
    }
    let reopened = DeviceLog::open(&path, 3, 4).unwrap();
    assert_eq!(reopened.entries().unwrap(), entries);
    assert_eq!(reopened.fetch(7).unwrap(), None);
    assert_eq!(reopened.fetch(50).unwrap().as_ref(), Some(&entries[24]));
    let rows: usize = entries.iter().map(|e| e.item_deltas.len()).sum();
    assert_eq!(reopened.stored_rows(), rows);
}

pub fn torn_tail_is_truncated_and_appends_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.frulog");
    let mut r = rng::from_seed(6);
    let entries: Vec<LogEntry> = (1..=5).map(|t| log_entry(t, &mut r)).collect();
    let mut log = DeviceLog::create(&path, 1, 4).unwrap();
    for e in &entries {
        log.append(e).unwrap();
    }
    drop(log);
    let full = std::fs::metadata(&path).unwrap().len();
    // Every cut inside the last record loses exactly that record.
    let first_four = {
        let mut probe = DeviceLog::create(dir.path().join("p.frulog"), 1, 4).unwrap();
        for e in &entries[..4] {
            probe.append(e).unwrap();
        }
        std::fs::metadata(dir.path().join("p.frulog"))
            .unwrap()
            .len()
    };
    for cut in [full - 1, full - 5, first_four + 3] {
        let bytes = std::fs::read(&path).unwrap();
        let torn = dir.path().join("torn.frulog");
        std::fs::write(&torn, &bytes[..cut as usize]).unwrap();
        let mut reopened = DeviceLog::open(&torn, 1, 4).unwrap();
        assert_eq!(reopened.entries().unwrap(), entries[..4]);
        assert_eq!(std::fs::metadata(&torn).unwrap().len(), first_four);
        reopened.append(&entries[4]).unwrap();
        drop(reopened);
        assert_eq!(
            DeviceLog::open(&torn, 1, 4).unwrap().entries().unwrap(),
            entries
        );
    }

    // A flipped byte in the last record fails its checksum.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[full as usize - 6] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(
        DeviceLog::open(&path, 1, 4).unwrap().entries().unwrap(),
        entries[..4]
    );
}

pub fn aggregation_matches_dense_mean() {
    let mut r = rng::from_seed(8);
    for _ in 0..50 {
        let clients = r.random_range(1..8u32);
        let mut updates: Vec<ServerUpdate> = (0..clients)
            .map(|c| ServerUpdate {
                round: 1,
                client_id: c * 5,
                item_deltas: (0..r.random_range(0..10))
                    .map(|_| {
                        (
                            r.random_range(0..30u32),
                            (0..3).map(|_| r.random_range(-1.0f32..1.0)).collect(),
                        )
                    })
                    .collect(),
                dense_deltas: dense_weights(
                    &(0..8)
                        .map(|_| r.random_range(-1.0f32..1.0))
                        .collect::<Vec<_>>(),
                ),
            })
            .collect();
        // Input order must not matter.
        updates.reverse();
        let got = aggregate(&updates).unwrap();

        let mut ordered: Vec<&ServerUpdate> = updates.iter().collect();
        ordered.sort_by_key(|u| u.client_id);
        let mut sums: BTreeMap<u32, (Vec<f32>, u32)> = BTreeMap::new();
        for u in &ordered {
            for (id, row) in &u.item_deltas {
                let entry = sums.entry(*id).or_insert_with(|| (vec![0.0; 3], 0));
                for (s, v) in entry.0.iter_mut().zip(row) {
                    *s += v;
                }
                entry.1 += 1;
            }
        }
        let expected: RowDeltas = sums
            .into_iter()
            .map(|(id, (s, c))| (id, s.iter().map(|v| v / c as f32).collect()))
            .collect();
        assert_eq!(got.item_rows, expected);
        for (t, tensor) in got.dense.tensors().into_iter().enumerate() {
            for (j, &v) in tensor.iter().enumerate() {
                let sum = ordered
                    .iter()
                    .fold(0.0f32, |acc, u| acc + u.dense_deltas.tensors()[t][j]);
                assert_eq!(v, sum / ordered.len() as f32);
            }
        }
    }
}
