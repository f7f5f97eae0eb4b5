//! Negative sampling: uniform, user-side, item-side and the user-item mixed
//! semi-hard sampler.
//!
//! The mixed sampler builds two pools of non-interacted items, the `R%·|V|`
//! nearest to the user embedding and the `R%·|V|` nearest to the centroid of
//! the user's positive items, then draws `round(N·β)` items uniformly from
//! their union. Distances are Euclidean (compared squared); ties go to the smaller item id.

use ndarray::{Array1, ArrayView1};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LocalDataset;
use crate::error::{Error, Result};
use crate::model::{GlobalParameters, PrivateParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    UserBased,
    ItemBased,
    Mixed,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "random" => Ok(Self::Random),
            "user_based" | "user" => Ok(Self::UserBased),
            "item_based" | "item" => Ok(Self::ItemBased),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!(
                "unknown sampling strategy {other:?}"
            ))),
        }
    }
}

fn default_pool_percent() -> f64 {
    10.0
}
fn default_shrink_factor() -> f64 {
    0.5
}
fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::Mixed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Size of each pool as a percentage of the item count (R).
    #[serde(default = "default_pool_percent")]
    pub pool_percent: f64,
    /// Fraction of the base negative count actually drawn (β).
    #[serde(default = "default_shrink_factor")]
    pub shrink_factor: f64,
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pool_percent: default_pool_percent(),
            shrink_factor: default_shrink_factor(),
            strategy: default_strategy(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pool_percent > 0.0 && self.pool_percent <= 50.0) {
            return Err(Error::Config("pool_percent must be in (0, 50]".into()));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return Err(Error::Config("shrink_factor must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// `round(N·β)` with `N = negative_ratio · |positives|`, at least 1.
    pub fn sample_size(&self, positive_count: usize, negative_ratio: usize) -> usize {
        let base = (negative_ratio * positive_count).max(1) as f64;
        ((base * self.shrink_factor).round() as usize).max(1)
    }

    pub fn pool_size(&self, item_count: usize) -> usize {
        ((self.pool_percent / 100.0 * item_count as f64).round() as usize).max(1)
    }
}

/// Element-wise mean of the embeddings of the client's positive items.
pub fn item_centroid(local: &LocalDataset, global: &GlobalParameters) -> Result<Array1<f32>> {
    if local.positives.is_empty() {
        return Err(Error::EmptyPositives(local.owner));
    }
    let e = global.embedding_size();
    let table = global
        .item_embeddings
        .as_slice()
        .expect("item table is contiguous");
    let mut sum = vec![0.0f64; e];
    for &item in &local.positives {
        let i = item as usize;
        if i >= global.item_count() {
            return Err(Error::IndexOutOfRange {
                kind: "item",
                index: i,
                size: global.item_count(),
            });
        }
        for (s, v) in sum.iter_mut().zip(&table[i * e..(i + 1) * e]) {
            *s += f64::from(*v);
        }
    }
    let n = local.positives.len() as f64;
    Ok(sum.iter().map(|s| (s / n) as f32).collect())
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes so the loop vectorizes.
    let mut lanes = [0.0f32; 8];
    let (xa, ya) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (xa.remainder(), ya.remainder());
    for (x, y) in xa.zip(ya) {
        for l in 0..8 {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut sum = lanes.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        sum += (x - y) * (x - y);
    }
    sum
}

/// Same as [`squared_distance`] for a width known at compile time, which
/// lets the whole row unroll into vector code.
#[inline]
fn squared_distance_n<const N: usize>(a: &[f32; N], b: &[f32; N]) -> f32 {
    let mut lanes = [0.0f32; 4];
    for c in 0..N / 4 {
        for l in 0..4 {
            let d = a[c * 4 + l] - b[c * 4 + l];
            lanes[l] += d * d;
        }
    }
    (lanes[0] + lanes[2]) + (lanes[1] + lanes[3])
}

fn distances_n<const N: usize>(table: &[f32], ids: &[u32], anchors: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let (rows, _) = table.as_chunks::<N>();
    let anchors: Vec<&[f32; N]> = anchors
        .iter()
        .map(|a| a.as_slice().try_into().expect("anchor width"))
        .collect();
    match anchors.as_slice() {
        // Both anchors in one pass so each row is loaded once.
        [a, b] => {
            let (da, db) = ids
                .iter()
                .map(|&i| {
                    let row = &rows[i as usize];
                    (squared_distance_n(a, row), squared_distance_n(b, row))
                })
                .unzip();
            vec![da, db]
        }
        _ => anchors
            .iter()
            .map(|a| {
                ids.iter()
                    .map(|&i| squared_distance_n(a, &rows[i as usize]))
                    .collect()
            })
            .collect(),
    }
}

/// Squared Euclidean distance from each anchor to every candidate negative.
/// Squared distances order items exactly as distances do.
fn candidate_distances(
    local: &LocalDataset,
    global: &GlobalParameters,
    anchors: &[ArrayView1<f32>],
) -> (Vec<u32>, Vec<Vec<f32>>) {
    let e = global.embedding_size();
    let table = global
        .item_embeddings
        .as_slice()
        .expect("item table is contiguous");
    let ids: Vec<u32> = local.candidate_negatives(global.item_count()).collect();
    let anchors: Vec<Vec<f32>> = anchors.iter().map(|a| a.to_vec()).collect();
    let dists = match e {
        8 => distances_n::<8>(table, &ids, &anchors),
        16 => distances_n::<16>(table, &ids, &anchors),
        32 => distances_n::<32>(table, &ids, &anchors),
        64 => distances_n::<64>(table, &ids, &anchors),
        _ => anchors
            .iter()
            .map(|a| {
                ids.iter()
                    .map(|&i| squared_distance(a, &table[i as usize * e..(i as usize + 1) * e]))
                    .collect()
            })
            .collect(),
    };
    (ids, dists)
}

/// Ids of the `k` smallest distances (ties to the smaller id), sorted by id.
fn k_smallest(ids: &[u32], dists: &[f32], k: usize) -> Vec<u32> {
    let k = k.min(ids.len());
    if k == 0 {
        return Vec::new();
    }
    // Squared distances are non-negative, so their bit patterns sort like the
    // values; packing the id underneath makes each key unique.
    let mut keys: Vec<u64> = dists
        .iter()
        .zip(ids)
        .map(|(d, &id)| (u64::from(d.to_bits()) << 32) | u64::from(id))
        .collect();
    if k < keys.len() {
        keys.select_nth_unstable(k - 1);
    }
    let mut pool: Vec<u32> = keys[..k].iter().map(|&key| key as u32).collect();
    pool.sort_unstable();
    pool
}

/// The `pool_size` non-interacted items nearest to `anchor`, sorted by id.
pub fn nearest_pool(
    local: &LocalDataset,
    global: &GlobalParameters,
    anchor: ArrayView1<f32>,
    pool_size: usize,
) -> Vec<u32> {
    let (ids, dists) = candidate_distances(local, global, &[anchor]);
    k_smallest(&ids, &dists[0], pool_size)
}

fn sorted_union(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// The candidate pool for `strategy`, sorted by id.
pub fn candidate_pool(
    local: &LocalDataset,
    global: &GlobalParameters,
    user: &PrivateParameters,
    config: &SamplingConfig,
) -> Result<Vec<u32>> {
    let pool_size = config.pool_size(global.item_count());
    let pool = match config.strategy {
        SamplingStrategy::Random => local.candidate_negatives(global.item_count()).collect(),
        SamplingStrategy::UserBased => {
            nearest_pool(local, global, user.user_embedding.view(), pool_size)
        }
        SamplingStrategy::ItemBased => {
            let centroid = item_centroid(local, global)?;
            nearest_pool(local, global, centroid.view(), pool_size)
        }
        SamplingStrategy::Mixed => {
            let centroid = item_centroid(local, global)?;
            let (ids, dists) = candidate_distances(
                local,
                global,
                &[user.user_embedding.view(), centroid.view()],
            );
            sorted_union(
                &k_smallest(&ids, &dists[0], pool_size),
                &k_smallest(&ids, &dists[1], pool_size),
            )
        }
    };
    Ok(pool)
}

/// Draws the client's negatives for one round. The result is sorted and
/// never contains a positive.
pub fn sample_negatives<R: Rng + ?Sized>(
    local: &LocalDataset,
    global: &GlobalParameters,
    user: &PrivateParameters,
    config: &SamplingConfig,
    negative_ratio: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let target = config.sample_size(local.positives.len(), negative_ratio);
    let pool = candidate_pool(local, global, user, config)?;
    if pool.len() <= target {
        if pool.len() < target {
            log::warn!(
                "client {}: candidate pool has {} items, fewer than the {} negatives requested",
                local.owner,
                pool.len(),
                target
            );
        }
        return Ok(pool);
    }
    let mut picked: Vec<u32> = index::sample(rng, pool.len(), target)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
