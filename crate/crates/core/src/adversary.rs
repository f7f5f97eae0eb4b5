//! Gradient-flipping poisoning: a malicious client transmits `−γ·M + μ`
//! instead of its honest update `M`, with one `γ ~ U(lo, hi)` per round and
//! `μ` drawn element-wise from a normal distribution matching the mean and
//! standard deviation of each honest tensor.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::UpdateRecord;

fn default_fraction() -> f64 {
    0.1
}
fn default_gamma_range() -> (f64, f64) {
    (0.5, 1.5)
}
fn default_noise_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default = "default_fraction")]
    pub malicious_fraction: f64,
    #[serde(default = "default_gamma_range")]
    pub gamma_range: (f64, f64),
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            malicious_fraction: default_fraction(),
            gamma_range: default_gamma_range(),
            noise_scale: default_noise_scale(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(
                "gamma_range must be positive and ordered".into(),
            ));
        }
        if !(self.malicious_fraction > 0.0 && self.malicious_fraction < 1.0) {
            return Err(Error::Config("malicious_fraction must be in (0, 1)".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(
                "noise_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Population mean and standard deviation.
pub(crate) fn moments(values: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for v in values.clone() {
        n += 1;
        sum += f64::from(v);
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn flip_tensor<'a, R: Rng + ?Sized>(
    values: impl Iterator<Item = &'a mut f32>,
    mean: f64,
    std: f64,
    gamma: f64,
    noise_scale: f64,
    rng: &mut R,
) {
    let normal = Normal::new(mean, std).expect("finite moments");
    for v in values {
        let mu = noise_scale * normal.sample(rng);
        *v = (-gamma * f64::from(*v) + mu) as f32;
    }
}

/// Rewrites the transmitted parts of `update` in place; `user_delta` stays honest.
///
/// Draw order: γ, then the item-row tensor (rows by ascending id, row-major),
/// then each dense tensor in canonical order.
pub fn poison<R: Rng + ?Sized>(update: &mut UpdateRecord, config: &AttackConfig, rng: &mut R) {
    let (lo, hi) = config.gamma_range;
    let gamma = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };

    let (mean, std) = moments(update.item_deltas.values().flat_map(|r| r.iter().copied()));
    flip_tensor(
        update.item_deltas.values_mut().flat_map(|r| r.iter_mut()),
        mean,
        std,
        gamma,
        config.noise_scale,
        rng,
    );
    if !update.dense_deltas.is_empty() {
        for t in update.dense_deltas.tensors_mut() {
            let (mean, std) = moments(t.iter().copied());
            flip_tensor(t.iter_mut(), mean, std, gamma, config.noise_scale, rng);
        }
    }
}

/// Chooses `floor(fraction · user_count)` attackers uniformly, once per experiment.
pub fn designate_malicious<R: Rng + ?Sized>(
    user_count: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<BTreeSet<u32>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "malicious fraction {fraction} must be in (0, 1)"
        )));
    }
    let count = (fraction * user_count as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "malicious fraction {fraction} selects no client out of {user_count}"
        )));
    }
    if count >= user_count {
        return Err(Error::Config(
            "malicious fraction leaves no honest clients".into(),
        ));
    }
    Ok(index::sample(rng, user_count, count)
        .into_iter()
        .map(|i| i as u32)
        .collect())
}
