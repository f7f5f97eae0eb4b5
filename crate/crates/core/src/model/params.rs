use ndarray::{Array1, Array2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ncf,
    #[serde(alias = "lightgcn")]
    LightGcn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Ncf => "ncf",
            ModelKind::LightGcn => "lightgcn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncf" => Ok(ModelKind::Ncf),
            "lightgcn" => Ok(ModelKind::LightGcn),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

/// One fully connected layer, `out = in · weight + bias`, weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F = f32> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// The dense part of the shared model: FFN layers plus the output vector `h`.
/// Both are empty for LightGCN.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights<F = f32> {
    pub layers: Vec<DenseLayer<F>>,
    pub output: Array1<F>,
}

impl<F: NdFloat> DenseWeights<F> {
    pub fn empty() -> Self {
        Self {
            layers: Vec::new(),
            output: Array1::zeros(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() && self.output.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            output: Array1::zeros(self.output.raw_dim()),
        }
    }

    /// Tensors in canonical order: W1, b1, W2, b2, ..., h.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 1);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out.push(self.output.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 1);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 2 + 1
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
            && self.output.dim() == other.output.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Tensors as owned vectors; empty when there are no dense weights.
    pub fn to_tensor_vecs(&self) -> Vec<Vec<F>> {
        if self.is_empty() {
            return Vec::new();
        }
        self.tensors().into_iter().map(<[F]>::to_vec).collect()
    }

    /// Rebuilds weights shaped like `template` from canonical-order tensors.
    pub fn from_tensors(template: &Self, tensors: &[Vec<F>]) -> Result<Self> {
        let mut out = template.zeros_like();
        if template.is_empty() {
            if tensors.iter().any(|t| !t.is_empty()) {
                return Err(Error::Shape(
                    "dense tensors given for a model without dense weights".into(),
                ));
            }
            return Ok(out);
        }
        if tensors.len() != out.tensor_count() {
            return Err(Error::Shape(format!(
                "expected {} dense tensors, got {}",
                out.tensor_count(),
                tensors.len()
            )));
        }
        for (i, (dst, src)) in out.tensors_mut().into_iter().zip(tensors).enumerate() {
            if dst.len() != src.len() {
                return Err(Error::Shape(format!(
                    "dense tensor {i} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(out)
    }

    /// Layer widths from input to last hidden layer, e.g. `[2e, 128, 256, 128, 64]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            dims.push(first.weight.nrows());
        }
        for l in &self.layers {
            dims.push(l.weight.ncols());
        }
        dims
    }

    pub fn cast<G: NdFloat>(&self) -> DenseWeights<G> {
        DenseWeights {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: cast2(&l.weight),
                    bias: cast1(&l.bias),
                })
                .collect(),
            output: cast1(&self.output),
        }
    }
}

pub(crate) fn cast1<F: NdFloat, G: NdFloat>(a: &Array1<F>) -> Array1<G> {
    a.mapv(|v| G::from(v).expect("float cast"))
}

pub(crate) fn cast2<F: NdFloat, G: NdFloat>(a: &Array2<F>) -> Array2<G> {
    a.mapv(|v| G::from(v).expect("float cast"))
}

/// Parameters shared through the server: the item embedding table and the dense weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParameters<F = f32> {
    pub item_embeddings: Array2<F>,
    pub dense: DenseWeights<F>,
}

/// A client's private parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateParameters<F = f32> {
    pub user_embedding: Array1<F>,
}

fn gaussian<F: NdFloat, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| F::from(normal.sample(rng)).unwrap())
        .collect()
}

impl<F: NdFloat> GlobalParameters<F> {
    /// Seeded initialization. Embeddings ~ N(0, 0.01²); dense weights ~ U(±1/√fan_in), zero biases.
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        item_count: usize,
        embedding_size: usize,
        ffn_dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let item_embeddings = Array2::from_shape_vec(
            (item_count, embedding_size),
            gaussian(item_count * embedding_size, EMBEDDING_INIT_STD, rng),
        )
        .expect("shape");
        let dense = match kind {
            ModelKind::LightGcn => DenseWeights::empty(),
            ModelKind::Ncf => {
                let mut layers = Vec::with_capacity(ffn_dims.len());
                let mut fan_in = 2 * embedding_size;
                for &width in ffn_dims {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("bounds");
                    let weight = Array2::from_shape_fn((fan_in, width), |_| {
                        F::from(dist.sample(rng)).unwrap()
                    });
                    layers.push(DenseLayer {
                        weight,
                        bias: Array1::zeros(width),
                    });
                    fan_in = width;
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("bounds");
                let output = Array1::from_shape_fn(fan_in, |_| F::from(dist.sample(rng)).unwrap());
                DenseWeights { layers, output }
            }
        };
        Self {
            item_embeddings,
            dense,
        }
    }

    pub fn item_count(&self) -> usize {
        self.item_embeddings.nrows()
    }

    pub fn embedding_size(&self) -> usize {
        self.item_embeddings.ncols()
    }

    pub fn kind(&self) -> ModelKind {
        if self.dense.is_empty() {
            ModelKind::LightGcn
        } else {
            ModelKind::Ncf
        }
    }

    pub fn item_row(&self, item: u32) -> Result<ndarray::ArrayView1<'_, F>> {
        let idx = item as usize;
        if idx >= self.item_count() {
            return Err(Error::IndexOutOfRange {
                kind: "item",
                index: idx,
                size: self.item_count(),
            });
        }
        Ok(self.item_embeddings.row(idx))
    }

    /// Checks the layer chain and finiteness of every entry.
    pub fn validate(&self) -> Result<()> {
        let e = self.embedding_size();
        if !self.dense.is_empty() {
            let mut width = 2 * e;
            for (i, l) in self.dense.layers.iter().enumerate() {
                if l.weight.nrows() != width || l.bias.len() != l.weight.ncols() {
                    return Err(Error::Shape(format!(
                        "layer {i} does not chain from width {width}"
                    )));
                }
                width = l.weight.ncols();
            }
            if self.dense.output.len() != width {
                return Err(Error::Shape(format!(
                    "output vector has length {} but last layer width is {width}",
                    self.dense.output.len()
                )));
            }
        }
        if !self.item_embeddings.iter().all(|v| v.is_finite()) || !self.dense.is_finite() {
            return Err(Error::NonFinite("global parameters".into()));
        }
        Ok(())
    }

    pub fn cast<G: NdFloat>(&self) -> GlobalParameters<G> {
        GlobalParameters {
            item_embeddings: cast2(&self.item_embeddings),
            dense: self.dense.cast(),
        }
    }
}

impl<F: NdFloat> PrivateParameters<F> {
    pub fn init<R: Rng + ?Sized>(embedding_size: usize, rng: &mut R) -> Self {
        Self {
            user_embedding: Array1::from_vec(gaussian(embedding_size, EMBEDDING_INIT_STD, rng)),
        }
    }

    pub fn zeros(embedding_size: usize) -> Self {
        Self {
            user_embedding: Array1::zeros(embedding_size),
        }
    }
}
