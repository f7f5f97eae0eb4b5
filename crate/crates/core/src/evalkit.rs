//! Leave-one-out style ranking evaluation (HR@K, NDCG@K) and report tables.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{
    lightgcn_propagate, lightgcn_score, ncf_scores, GlobalParameters, ModelKind, PrivateParameters,
};
use crate::rng;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_NEGATIVES: usize = 99;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingTask {
    pub user_id: u32,
    pub target_item: u32,
    /// Sampled non-interacted items followed by the target, all distinct.
    pub candidate_items: Vec<u32>,
}

/// One task per held-out positive of every listed user. Candidates are
/// drawn uniformly from items the user has not interacted with in either
/// split.
pub fn build_tasks(
    dataset: &SplitDataset,
    users: &[u32],
    negatives: usize,
    seed: u64,
) -> Vec<RankingTask> {
    let mut tasks = Vec::new();
    for &u in users {
        let train = &dataset.train[u as usize];
        let test = &dataset.test[u as usize];
        let seen: BTreeSet<u32> = train.positives.iter().chain(test.iter()).copied().collect();
        let pool: Vec<u32> = (0..dataset.item_count as u32)
            .filter(|i| !seen.contains(i))
            .collect();
        for &target in test {
            let mut r = rng::stream(seed, rng::EVAL, &[u64::from(u), u64::from(target)]);
            let n = negatives.min(pool.len());
            let mut candidate_items: Vec<u32> = index::sample(&mut r, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            candidate_items.sort_unstable();
            candidate_items.push(target);
            tasks.push(RankingTask {
                user_id: u,
                target_item: target,
                candidate_items,
            });
        }
    }
    tasks
}

/// 1-based rank of `target` among `(item, score)` pairs; equal scores are
/// ordered by ascending item id.
pub fn rank_of(target: u32, scored: &[(u32, f32)]) -> usize {
    let t_score = scored
        .iter()
        .find(|(i, _)| *i == target)
        .map(|(_, s)| *s)
        .unwrap_or(f32::NEG_INFINITY);
    1 + scored
        .iter()
        .filter(|&&(i, s)| i != target && (s > t_score || (s == t_score && i < target)))
        .count()
}

/// `(hit, ndcg)` for a 1-based rank.
pub fn hit_and_ndcg(rank: usize, k: usize) -> (f64, f64) {
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

pub fn rank_and_score(target: u32, scored: &[(u32, f32)], k: usize) -> (f64, f64) {
    hit_and_ndcg(rank_of(target, scored), k)
}

/// Read-only view of a recommender: global parameters plus one embedding
/// row per user.
#[derive(Debug, Clone, Copy)]
pub struct Recommender<'a> {
    pub kind: ModelKind,
    pub lightgcn_layers: usize,
    pub global: &'a GlobalParameters,
    pub users: &'a Array2<f32>,
    pub dataset: &'a SplitDataset,
}

impl Recommender<'_> {
    pub fn user(&self, user: u32) -> Result<PrivateParameters> {
        if user as usize >= self.users.nrows() {
            return Err(Error::IndexOutOfRange {
                kind: "user",
                index: user as usize,
                size: self.users.nrows(),
            });
        }
        Ok(PrivateParameters {
            user_embedding: self.users.row(user as usize).to_owned(),
        })
    }

    pub fn scores(&self, user: u32, items: &[u32]) -> Result<Vec<f32>> {
        let private = self.user(user)?;
        match self.kind {
            ModelKind::Ncf => ncf_scores(self.global, &private, items),
            ModelKind::LightGcn => {
                let local = &self.dataset.train[user as usize];
                let prop = lightgcn_propagate(local, self.global, &private, self.lightgcn_layers)?;
                items
                    .iter()
                    .map(|&i| {
                        let raw = self.global.item_row(i)?;
                        let v = match prop.item_ids.binary_search(&i) {
                            Ok(r) => prop.items.row(r).to_owned(),
                            Err(_) => prop.outside_item(raw, self.lightgcn_layers),
                        };
                        Ok(lightgcn_score(prop.user.view(), v.view()))
                    })
                    .collect()
            }
        }
    }

    /// Top-`k` non-interacted items for `user`, best first.
    pub fn recommend(&self, user: u32, k: usize) -> Result<Vec<(u32, f32)>> {
        let local = &self.dataset.train[user as usize];
        let items: Vec<u32> = local.candidate_negatives(self.dataset.item_count).collect();
        let scores = self.scores(user, &items)?;
        let mut scored: Vec<(u32, f32)> = items.into_iter().zip(scores).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// HR@K in percent.
    pub hit: f64,
    /// NDCG@K in percent.
    pub ndcg: f64,
    pub tasks: usize,
}

/// Mean HR/NDCG over the tasks, in percent. Tasks are scored in parallel
/// and summed in task order.
pub fn evaluate_tasks(model: Recommender<'_>, tasks: &[RankingTask], k: usize) -> Result<Metrics> {
    let per_task: Vec<(f64, f64)> = tasks
        .par_iter()
        .map(|task| {
            let scores = model.scores(task.user_id, &task.candidate_items)?;
            let scored: Vec<(u32, f32)> =
                task.candidate_items.iter().copied().zip(scores).collect();
            Ok(rank_and_score(task.target_item, &scored, k))
        })
        .collect::<Result<_>>()?;
    if per_task.is_empty() {
        return Ok(Metrics {
            hit: 0.0,
            ndcg: 0.0,
            tasks: 0,
        });
    }
    let n = per_task.len() as f64;
    let (h, g) = per_task
        .iter()
        .fold((0.0, 0.0), |(h, g), (a, b)| (h + a, g + b));
    Ok(Metrics {
        hit: 100.0 * h / n,
        ndcg: 100.0 * g / n,
        tasks: per_task.len(),
    })
}

/// Evaluates every user with held-out items except those in `exclude`.
pub fn evaluate(model: Recommender<'_>, exclude: &BTreeSet<u32>, seed: u64) -> Result<Metrics> {
    let users: Vec<u32> = model
        .dataset
        .evaluable_users()
        .filter(|u| !exclude.contains(u))
        .collect();
    if users.is_empty() {
        return Err(Error::Config(
            "no users with held-out items to evaluate".into(),
        ));
    }
    let tasks = build_tasks(model.dataset, &users, DEFAULT_NEGATIVES, seed);
    evaluate_tasks(model, &tasks, DEFAULT_K)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub malicious_fraction: f64,
    pub method: String,
    pub hit: f64,
    pub ndcg: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
