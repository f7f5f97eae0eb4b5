//! A client's working copy of the model and its exact analytic gradients.

use ndarray::{s, Array1, Array2, NdFloat};
use rand::seq::SliceRandom;
use rand::Rng;

use super::lightgcn::propagate_rows;
use super::loss::{local_loss, sigmoid};
use super::ncf;
use super::params::{DenseWeights, GlobalParameters, ModelKind, PrivateParameters};
use super::TrainConfig;
use crate::dataset::LocalDataset;
use crate::error::{Error, Result};

/// One training example: a local row index and its label.
pub type Sample = (usize, bool);

/// The rows of the item table a client touches, plus copies of its user
/// embedding and the dense weights. Rows `0..positive_count` are the
/// client's positives, the rest its sampled negatives.
#[derive(Debug, Clone)]
pub struct LocalModel<F = f32> {
    pub kind: ModelKind,
    pub layers: usize,
    pub user: Array1<F>,
    pub item_ids: Vec<u32>,
    pub items: Array2<F>,
    pub positive_count: usize,
    pub dense: DenseWeights<F>,
}

#[derive(Debug, Clone)]
pub struct Gradients<F = f32> {
    pub user: Array1<F>,
    pub items: Array2<F>,
    pub dense: DenseWeights<F>,
}

impl<F: NdFloat> Gradients<F> {
    pub fn is_finite(&self) -> bool {
        self.user.iter().all(|v| v.is_finite())
            && self.items.iter().all(|v| v.is_finite())
            && self.dense.is_finite()
    }
}

impl<F: NdFloat> LocalModel<F> {
    /// Copies the rows for `positives` then `negatives` out of the global table.
    pub fn gather(
        kind: ModelKind,
        layers: usize,
        global: &GlobalParameters<F>,
        user: &PrivateParameters<F>,
        positives: &[u32],
        negatives: &[u32],
    ) -> Result<Self> {
        let e = global.embedding_size();
        if user.user_embedding.len() != e {
            return Err(Error::Shape(format!(
                "user embedding has length {}, expected {e}",
                user.user_embedding.len()
            )));
        }
        let item_ids: Vec<u32> = positives.iter().chain(negatives).copied().collect();
        let mut items = Array2::zeros((item_ids.len(), e));
        for (r, &id) in item_ids.iter().enumerate() {
            items.row_mut(r).assign(&global.item_row(id)?);
        }
        let dense = match kind {
            ModelKind::Ncf => global.dense.clone(),
            ModelKind::LightGcn => DenseWeights::empty(),
        };
        Ok(Self {
            kind,
            layers,
            user: user.user_embedding.clone(),
            item_ids,
            items,
            positive_count: positives.len(),
            dense,
        })
    }

    /// Every local row as a sample: positives labelled 1, negatives 0.
    pub fn all_samples(&self) -> Vec<Sample> {
        (0..self.item_ids.len())
            .map(|r| (r, r < self.positive_count))
            .collect()
    }

    pub fn scores(&self, batch: &[Sample]) -> Vec<F> {
        match self.kind {
            ModelKind::Ncf => {
                let fwd = ncf::forward(&self.dense, self.ncf_input(batch));
                fwd.logits.iter().map(|&z| sigmoid(z)).collect()
            }
            ModelKind::LightGcn => {
                let (u, items) = propagate_rows(
                    self.user.view(),
                    self.items.view(),
                    self.positive_count,
                    self.layers,
                );
                batch
                    .iter()
                    .map(|&(r, _)| sigmoid(u.dot(&items.row(r))))
                    .collect()
            }
        }
    }

    pub fn loss(&self, batch: &[Sample]) -> F {
        let labels: Vec<bool> = batch.iter().map(|s| s.1).collect();
        local_loss(&self.scores(batch), &labels)
    }

    fn ncf_input(&self, batch: &[Sample]) -> Array2<F> {
        let e = self.user.len();
        let mut x = Array2::zeros((batch.len(), 2 * e));
        for (b, &(r, _)) in batch.iter().enumerate() {
            x.slice_mut(s![b, ..e]).assign(&self.user);
            x.slice_mut(s![b, e..]).assign(&self.items.row(r));
        }
        x
    }

    /// Mean BCE over `batch` and its gradient w.r.t. every local parameter.
    pub fn loss_and_grad(&self, batch: &[Sample]) -> (F, Gradients<F>) {
        let e = self.user.len();
        let n = F::from(batch.len().max(1)).unwrap();
        let mut grads = Gradients {
            user: Array1::zeros(e),
            items: Array2::zeros(self.items.raw_dim()),
            dense: self.dense.zeros_like(),
        };
        let labels: Vec<bool> = batch.iter().map(|s| s.1).collect();
        let label_value = |y: bool| if y { F::one() } else { F::zero() };

        match self.kind {
            ModelKind::Ncf => {
                let fwd = ncf::forward(&self.dense, self.ncf_input(batch));
                let probs: Vec<F> = fwd.logits.iter().map(|&z| sigmoid(z)).collect();
                let dlogits = Array1::from_iter(
                    probs
                        .iter()
                        .zip(&labels)
                        .map(|(&p, &y)| (p - label_value(y)) / n),
                );
                let dx = ncf::backward(&self.dense, &fwd, &dlogits, &mut grads.dense);
                for (b, &(r, _)) in batch.iter().enumerate() {
                    let row = dx.row(b);
                    grads.user += &row.slice(s![..e]);
                    let mut g = grads.items.row_mut(r);
                    g += &row.slice(s![e..]);
                }
                (local_loss(&probs, &labels), grads)
            }
            ModelKind::LightGcn => {
                let (u, items) = propagate_rows(
                    self.user.view(),
                    self.items.view(),
                    self.positive_count,
                    self.layers,
                );
                let mut probs = Vec::with_capacity(batch.len());
                let mut g_user = Array1::zeros(e);
                let mut g_items = Array2::zeros(self.items.raw_dim());
                for &(r, y) in batch {
                    let v = items.row(r);
                    let p = sigmoid(u.dot(&v));
                    probs.push(p);
                    let d = (p - label_value(y)) / n;
                    g_user.scaled_add(d, &v);
                    g_items.row_mut(r).scaled_add(d, &u);
                }
                let (gu, gi) = propagate_rows(
                    g_user.view(),
                    g_items.view(),
                    self.positive_count,
                    self.layers,
                );
                grads.user = gu;
                grads.items = gi;
                (local_loss(&probs, &labels), grads)
            }
        }
    }

    pub fn apply(&mut self, grads: &Gradients<F>, learning_rate: F) {
        self.user.scaled_add(-learning_rate, &grads.user);
        self.items.scaled_add(-learning_rate, &grads.items);
        self.dense.add_scaled(&grads.dense, -learning_rate);
    }

    /// One SGD step on `batch`. Returns the batch loss before the step.
    pub fn step(&mut self, batch: &[Sample], learning_rate: F) -> Result<F> {
        let (loss, grads) = self.loss_and_grad(batch);
        if !grads.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of a {}-sample batch",
                batch.len()
            )));
        }
        self.apply(&grads, learning_rate);
        Ok(loss)
    }

    /// `epochs` passes over `samples` in shuffled mini-batches.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        samples: &[Sample],
        epochs: usize,
        batch_size: usize,
        learning_rate: F,
        rng: &mut R,
    ) -> Result<()> {
        let mut order = samples.to_vec();
        for _ in 0..epochs {
            order.shuffle(rng);
            for batch in order.chunks(batch_size.max(1)) {
                self.step(batch, learning_rate)?;
            }
        }
        Ok(())
    }
}

/// One gradient step on `batch` (item id, label) against copies of the
/// received parameters. Rows not in the batch (or, for LightGCN, not in the
/// client's graph) come back bitwise unchanged.
pub fn local_train_step<F: NdFloat>(
    global: &GlobalParameters<F>,
    user: &PrivateParameters<F>,
    local: &LocalDataset,
    batch: &[(u32, bool)],
    config: &TrainConfig,
) -> Result<(GlobalParameters<F>, PrivateParameters<F>)> {
    let mut negatives: Vec<u32> = batch
        .iter()
        .map(|b| b.0)
        .filter(|i| !local.is_positive(*i))
        .collect();
    negatives.sort_unstable();
    negatives.dedup();
    let mut model = LocalModel::gather(
        config.model,
        config.lightgcn_layers,
        global,
        user,
        &local.positives,
        &negatives,
    )?;
    let samples: Vec<Sample> = batch
        .iter()
        .map(|&(item, y)| {
            let row = model
                .item_ids
                .iter()
                .position(|&id| id == item)
                .expect("gathered row");
            (row, y)
        })
        .collect();
    model.step(&samples, F::from(config.learning_rate).unwrap())?;

    let mut updated = global.clone();
    for (r, &id) in model.item_ids.iter().enumerate() {
        updated
            .item_embeddings
            .row_mut(id as usize)
            .assign(&model.items.row(r));
    }
    if config.model == ModelKind::Ncf {
        updated.dense = model.dense;
    }
    Ok((
        updated,
        PrivateParameters {
            user_embedding: model.user,
        },
    ))
}
