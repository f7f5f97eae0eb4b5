//! Synthetic fixtures shared by the benchmarks.

use fru_core::dataset::{LocalDataset, SplitDataset};
use fru_core::rng;
use rand::Rng;

/// A random implicit-feedback dataset with `per_user` training positives per
/// user and no held-out items.
pub fn synthetic_dataset(users: usize, items: usize, per_user: usize, seed: u64) -> SplitDataset {
    let mut r = rng::from_seed(seed);
    let train = (0..users as u32)
        .map(|u| {
            let positives = (0..per_user)
                .map(|_| r.random_range(0..items as u32))
                .collect();
            LocalDataset::new(u, positives)
        })
        .collect();
    SplitDataset {
        name: "synthetic".into(),
        user_count: users,
        item_count: items,
        train,
        test: vec![Vec::new(); users],
    }
}
