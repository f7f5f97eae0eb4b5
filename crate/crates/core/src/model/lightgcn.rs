//! LightGCN propagation over a client's local bipartite graph.
//!
//! The local graph holds one user and its positive items. The user's degree
//! is the number of positives and each item's degree is 1, so every edge has
//! weight `1/√(|N_u|·1)`. Items outside the graph (sampled negatives, ranking
//! candidates) receive nothing from propagation after layer 0. The final
//! representation averages layers `0..=l`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat};

use super::loss::sigmoid;
use super::params::{GlobalParameters, PrivateParameters};
use crate::dataset::LocalDataset;
use crate::error::{Error, Result};

/// Layer-averaged propagation on raw rows. The first `positive_count` rows of
/// `items` are the user's graph neighbours; the rest are isolated nodes.
///
/// The propagation matrix is symmetric, so applying this function to
/// gradients w.r.t. the outputs yields gradients w.r.t. the inputs.
pub(crate) fn propagate_rows<F: NdFloat>(
    user: ArrayView1<F>,
    items: ArrayView2<F>,
    positive_count: usize,
    layers: usize,
) -> (Array1<F>, Array2<F>) {
    let mut sum_user = user.to_owned();
    let mut sum_items = items.to_owned();
    if layers == 0 || positive_count == 0 {
        return (sum_user, sum_items);
    }
    let norm = F::one() / F::from(positive_count).unwrap().sqrt();
    let mut cur_user = user.to_owned();
    let mut cur_pos = items.slice(ndarray::s![..positive_count, ..]).to_owned();
    for _ in 0..layers {
        let next_user = cur_pos.sum_axis(Axis(0)) * norm;
        let next_item = &cur_user * norm;
        sum_user += &next_user;
        for mut row in sum_items
            .slice_mut(ndarray::s![..positive_count, ..])
            .rows_mut()
        {
            row += &next_item;
        }
        for mut row in cur_pos.rows_mut() {
            row.assign(&next_item);
        }
        cur_user = next_user;
    }
    let scale = F::one() / F::from(layers + 1).unwrap();
    sum_user.mapv_inplace(|v| v * scale);
    sum_items.mapv_inplace(|v| v * scale);
    (sum_user, sum_items)
}

/// Final user vector and per-positive item vectors after propagation.
#[derive(Debug, Clone)]
pub struct Propagated<F> {
    pub user: Array1<F>,
    pub item_ids: Vec<u32>,
    pub items: Array2<F>,
}

impl<F: NdFloat> Propagated<F> {
    /// Final vector of an item that is not in the local graph.
    pub fn outside_item(&self, raw: ArrayView1<F>, layers: usize) -> Array1<F> {
        raw.mapv(|v| v / F::from(layers + 1).unwrap())
    }
}

pub fn lightgcn_propagate<F: NdFloat>(
    local: &LocalDataset,
    global: &GlobalParameters<F>,
    user: &PrivateParameters<F>,
    layers: usize,
) -> Result<Propagated<F>> {
    if local.positives.is_empty() {
        return Err(Error::EmptyPositives(local.owner));
    }
    let e = global.embedding_size();
    let mut rows = Array2::zeros((local.positives.len(), e));
    for (r, &item) in local.positives.iter().enumerate() {
        rows.row_mut(r).assign(&global.item_row(item)?);
    }
    let (u, items) = propagate_rows(
        user.user_embedding.view(),
        rows.view(),
        local.positives.len(),
        layers,
    );
    Ok(Propagated {
        user: u,
        item_ids: local.positives.clone(),
        items,
    })
}

pub fn lightgcn_score<F: NdFloat>(user_vector: ArrayView1<F>, item_vector: ArrayView1<F>) -> F {
    sigmoid(user_vector.dot(&item_vector))
}
