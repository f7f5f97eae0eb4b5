//! Neural collaborative filtering: `σ(hᵀ FFN([u, v]))` with ReLU hidden layers.

use ndarray::{s, Array1, Array2, ArrayView1, NdFloat};

use super::loss::sigmoid;
use super::params::{DenseWeights, GlobalParameters, PrivateParameters};
use crate::error::Result;

/// Activations kept from a forward pass: `acts[0]` is the input, `pre[i]` the
/// pre-activation of layer `i`, `acts[i + 1]` its ReLU output.
pub(crate) struct Forward<F> {
    pub acts: Vec<Array2<F>>,
    pub pre: Vec<Array2<F>>,
    pub logits: Array1<F>,
}

pub(crate) fn forward<F: NdFloat>(dense: &DenseWeights<F>, input: Array2<F>) -> Forward<F> {
    let mut acts = Vec::with_capacity(dense.layers.len() + 1);
    let mut pre = Vec::with_capacity(dense.layers.len());
    acts.push(input);
    for layer in &dense.layers {
        let z = acts.last().unwrap().dot(&layer.weight) + &layer.bias;
        let a = z.mapv(|v| if v > F::zero() { v } else { F::zero() });
        pre.push(z);
        acts.push(a);
    }
    let logits = acts.last().unwrap().dot(&dense.output);
    Forward { acts, pre, logits }
}

/// Back-propagates `dlogits` and returns the gradient w.r.t. the input rows.
pub(crate) fn backward<F: NdFloat>(
    dense: &DenseWeights<F>,
    fwd: &Forward<F>,
    dlogits: &Array1<F>,
    grad: &mut DenseWeights<F>,
) -> Array2<F> {
    let last = fwd.acts.last().unwrap();
    grad.output.assign(&last.t().dot(dlogits));
    let mut d_act = dlogits
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&dense.output.view().insert_axis(ndarray::Axis(0)));
    for i in (0..dense.layers.len()).rev() {
        let mut dz = d_act;
        ndarray::Zip::from(&mut dz)
            .and(&fwd.pre[i])
            .for_each(|d, &z| {
                if z <= F::zero() {
                    *d = F::zero();
                }
            });
        grad.layers[i].weight.assign(&fwd.acts[i].t().dot(&dz));
        grad.layers[i].bias.assign(&dz.sum_axis(ndarray::Axis(0)));
        d_act = dz.dot(&dense.layers[i].weight.t());
    }
    d_act
}

pub(crate) fn concat_input<F: NdFloat>(user: ArrayView1<F>, item: ArrayView1<F>) -> Array1<F> {
    let e = user.len();
    let mut x = Array1::zeros(e + item.len());
    x.slice_mut(s![..e]).assign(&user);
    x.slice_mut(s![e..]).assign(&item);
    x
}

/// Predicted interaction probability for one (user, item) pair.
pub fn ncf_score<F: NdFloat>(
    global: &GlobalParameters<F>,
    user: &PrivateParameters<F>,
    item: u32,
) -> Result<F> {
    let v = global.item_row(item)?;
    let x = concat_input(user.user_embedding.view(), v);
    let input = x.insert_axis(ndarray::Axis(0));
    let fwd = forward(&global.dense, input);
    Ok(sigmoid(fwd.logits[0]))
}

/// Scores many items for one user in a single batched pass.
pub fn ncf_scores<F: NdFloat>(
    global: &GlobalParameters<F>,
    user: &PrivateParameters<F>,
    items: &[u32],
) -> Result<Vec<F>> {
    let e = user.user_embedding.len();
    let mut input = Array2::zeros((items.len(), 2 * e));
    for (r, &item) in items.iter().enumerate() {
        let v = global.item_row(item)?;
        input.slice_mut(s![r, ..e]).assign(&user.user_embedding);
        input.slice_mut(s![r, e..]).assign(&v);
    }
    let fwd = forward(&global.dense, input);
    Ok(fwd.logits.iter().map(|&z| sigmoid(z)).collect())
}
