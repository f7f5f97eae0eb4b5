//! Loading, binarizing and splitting interaction data.
//!
//! Every observed (user, item) pair becomes one positive interaction. Each
//! user's interactions are split 80/20 into train and test: the most recent
//! 20% by timestamp when timestamps exist, a seeded uniform 20% otherwise.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    pub label: u8,
}

/// One client's private training data. Positives are sorted and distinct;
/// candidate negatives are the implicit complement within the item set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub owner: u32,
    pub positives: Vec<u32>,
}

impl LocalDataset {
    pub fn new(owner: u32, mut positives: Vec<u32>) -> Self {
        positives.sort_unstable();
        positives.dedup();
        Self { owner, positives }
    }

    pub fn is_positive(&self, item: u32) -> bool {
        self.positives.binary_search(&item).is_ok()
    }

    pub fn candidate_negatives(&self, item_count: usize) -> impl Iterator<Item = u32> + '_ {
        let mut next = self.positives.iter().copied().peekable();
        (0..item_count as u32).filter(move |&i| {
            while next.next_if(|&p| p < i).is_some() {}
            next.next_if_eq(&i).is_none()
        })
    }

    pub fn negative_count(&self, item_count: usize) -> usize {
        item_count - self.positives.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub name: String,
    pub user_count: usize,
    pub item_count: usize,
    pub train: Vec<LocalDataset>,
    /// Held-out positives per user, sorted. Empty for users excluded from evaluation.
    pub test: Vec<Vec<u32>>,
}

/// A deduplicated interaction with its optional timestamp, before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_id: u32,
    pub item_id: u32,
    pub timestamp: Option<i64>,
}

fn test_size(n: usize) -> usize {
    // round(0.2 n), half up
    (2 * n + 5) / 10
}

impl SplitDataset {
    /// Splits deduplicated interactions per user. Ids must already be dense.
    pub fn from_interactions(
        name: impl Into<String>,
        user_count: usize,
        item_count: usize,
        interactions: &[RawInteraction],
        seed: u64,
    ) -> Result<Self> {
        let mut per_user: Vec<Vec<RawInteraction>> = vec![Vec::new(); user_count];
        for it in interactions {
            let u = it.user_id as usize;
            if u >= user_count {
                return Err(Error::IndexOutOfRange {
                    kind: "user",
                    index: u,
                    size: user_count,
                });
            }
            if it.item_id as usize >= item_count {
                return Err(Error::IndexOutOfRange {
                    kind: "item",
                    index: it.item_id as usize,
                    size: item_count,
                });
            }
            per_user[u].push(*it);
        }

        let mut train = Vec::with_capacity(user_count);
        let mut test = Vec::with_capacity(user_count);
        for (u, mut rows) in per_user.into_iter().enumerate() {
            let n = rows.len();
            let mut n_test = test_size(n);
            if n_test == n {
                // keep every client trainable
                n_test = 0;
            }
            let temporal = rows.iter().all(|r| r.timestamp.is_some());
            if temporal {
                rows.sort_by_key(|r| (r.timestamp, r.item_id));
            } else {
                rows.sort_by_key(|r| r.item_id);
                rows.shuffle(&mut rng::stream(seed, rng::SPLIT, &[u as u64]));
            }
            let split_at = n - n_test;
            let tr: Vec<u32> = rows[..split_at].iter().map(|r| r.item_id).collect();
            let mut te: Vec<u32> = rows[split_at..].iter().map(|r| r.item_id).collect();
            te.sort_unstable();
            train.push(LocalDataset::new(u as u32, tr));
            test.push(te);
        }

        Ok(Self {
            name: name.into(),
            user_count,
            item_count,
            train,
            test,
        })
    }

    pub fn train_interaction_count(&self) -> usize {
        self.train.iter().map(|d| d.positives.len()).sum()
    }

    pub fn test_interaction_count(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }

    pub fn interaction_count(&self) -> usize {
        self.train_interaction_count() + self.test_interaction_count()
    }

    /// Mean number of train positives per user.
    pub fn average_positive_count(&self) -> f64 {
        if self.user_count == 0 {
            return 0.0;
        }
        self.train_interaction_count() as f64 / self.user_count as f64
    }

    /// Users with at least one held-out positive.
    pub fn evaluable_users(&self) -> impl Iterator<Item = u32> + '_ {
        self.test
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_empty())
            .map(|(u, _)| u as u32)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Loads a MovieLens `u.data` style file: tab-separated user, item, rating, timestamp.
pub fn load_movielens(path: &Path, seed: u64) -> Result<SplitDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut rows: Vec<(u64, u64, i64)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let user = fields[0]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("bad user id {:?}: {e}", fields[0])))?;
        let item = fields[1]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("bad item id {:?}: {e}", fields[1])))?;
        fields[2]
            .parse::<f64>()
            .map_err(|e| parse_err(format!("bad rating {:?}: {e}", fields[2])))?;
        let ts = fields[3]
            .parse::<i64>()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[3])))?;
        rows.push((user, item, ts));
    }

    let users: BTreeMap<u64, u32> = dense_sorted(rows.iter().map(|r| r.0));
    let items: BTreeMap<u64, u32> = dense_sorted(rows.iter().map(|r| r.1));

    // Keep the earliest observation of a repeated pair.
    let mut seen: HashMap<(u32, u32), usize> = HashMap::new();
    let mut interactions: Vec<RawInteraction> = Vec::with_capacity(rows.len());
    for (u, i, ts) in rows {
        let key = (users[&u], items[&i]);
        match seen.get(&key) {
            Some(&pos) => {
                let prev = &mut interactions[pos];
                if Some(ts) < prev.timestamp {
                    prev.timestamp = Some(ts);
                }
            }
            None => {
                seen.insert(key, interactions.len());
                interactions.push(RawInteraction {
                    user_id: key.0,
                    item_id: key.1,
                    timestamp: Some(ts),
                });
            }
        }
    }

    SplitDataset::from_interactions("movielens", users.len(), items.len(), &interactions, seed)
}

fn dense_sorted(ids: impl Iterator<Item = u64>) -> BTreeMap<u64, u32> {
    let mut map: BTreeMap<u64, u32> = ids.map(|i| (i, 0)).collect();
    for (idx, v) in map.values_mut().enumerate() {
        *v = idx as u32;
    }
    map
}

/// Loads a Steam-200k style CSV: user-id, game-title, behavior, value[, ...].
/// Both `purchase` and `play` rows count as one interaction per (user, game).
pub fn load_steam(path: &Path, seed: u64) -> Result<SplitDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));

    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut interactions = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let line_no = idx + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: line_no,
            message,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() < 4 {
            return Err(parse_err(format!(
                "expected at least 4 fields, found {}",
                record.len()
            )));
        }
        let user = record[0].trim();
        if user.is_empty() {
            return Err(parse_err("empty user id".into()));
        }
        let title = record[1].trim();
        match record[2].trim() {
            "purchase" | "play" => {}
            other => return Err(parse_err(format!("unknown behavior {other:?}"))),
        }
        let next_user = users.len() as u32;
        let u = *users.entry(user.to_string()).or_insert(next_user);
        let next_item = items.len() as u32;
        let i = *items.entry(title.to_string()).or_insert(next_item);
        if seen.insert((u, i)) {
            interactions.push(RawInteraction {
                user_id: u,
                item_id: i,
                timestamp: None,
            });
        }
    }

    SplitDataset::from_interactions("steam", users.len(), items.len(), &interactions, seed)
}
