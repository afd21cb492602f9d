//! Shallow parameterized maps from source/target objects into a shared
//! embedding space: identity on features, linear on L2-normalized features,
//! or embedding-table lookup on categorical ids. Gradients are hand-derived
//! per mapping kind; the model is at most one layer deep so there is no
//! general autodiff here.

use serde::{Deserialize, Serialize};

use crate::math::{l2_normalize, softmax};
use crate::rng::substream;
use crate::{Error, Result};
use rand::Rng;

/// Which parametric family realizes a mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// Pass features through unchanged. Requires `in_dim == out_dim`.
    Identity,
    /// `W x` with `W: out_dim x in_dim`; inputs are L2-normalized first.
    Linear,
    /// Table-row lookup; `in_dim` is the vocabulary size.
    Embedding,
}

/// Shape contract of one mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingSpec {
    pub kind: MappingKind,
    /// Feature dimension for identity/linear, vocabulary size for embedding.
    pub in_dim: usize,
    /// Embedding dimension `d`.
    pub out_dim: usize,
}

impl MappingSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: MappingKind::Identity,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: MappingKind::Linear,
            in_dim,
            out_dim,
        }
    }

    pub fn embedding(vocab: usize, out_dim: usize) -> Self {
        Self {
            kind: MappingKind::Embedding,
            in_dim: vocab,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "mapping dimensions must be positive".into(),
            ));
        }
        if self.kind == MappingKind::Identity && self.in_dim != self.out_dim {
            return Err(Error::InvalidConfig(format!(
                "identity mapping requires in_dim == out_dim, got {} vs {}",
                self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }

    /// Rows x cols of the parameter block backing this mapping.
    fn param_shape(&self) -> (usize, usize) {
        match self.kind {
            MappingKind::Identity => (0, 0),
            MappingKind::Linear => (self.out_dim, self.in_dim),
            MappingKind::Embedding => (self.in_dim, self.out_dim),
        }
    }
}

/// One source or target object: dense features or a categorical id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRef {
    Features(Vec<f64>),
    Id(usize),
}

impl ObjectRef {
    pub fn features(v: Vec<f64>) -> Self {
        ObjectRef::Features(v)
    }

    pub fn id(i: usize) -> Self {
        ObjectRef::Id(i)
    }
}

/// Dense row-major matrix. Parameter blocks and gradient blocks share this
/// representation so they stay shape-congruent by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// `row_i += scale * v`.
    pub fn add_row(&mut self, i: usize, v: &[f64], scale: f64) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        if i >= self.rows {
            return Err(Error::IdOutOfVocab {
                id: i,
                vocab: self.rows,
            });
        }
        let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
        for (r, x) in row.iter_mut().zip(v) {
            *r += scale * x;
        }
        Ok(())
    }

    /// Rank-one update `self += scale * u v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: u.len() * v.len(),
            });
        }
        for (i, ui) in u.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += scale * ui * vj;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }
}

/// All learnable state: the parameter blocks behind the source map `f` and
/// the target map `g`. The weighting map shares these (it is either `f`
/// itself or the pair-match probabilities), so there is no third block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub f_spec: MappingSpec,
    pub g_spec: MappingSpec,
    pub f: Matrix,
    pub g: Matrix,
}

impl ModelParams {
    /// Embedding dimension shared by both maps.
    pub fn dim(&self) -> usize {
        self.f_spec.out_dim
    }

    /// Vocabulary size of the target map, if it is an embedding.
    pub fn target_vocab(&self) -> Option<usize> {
        (self.g_spec.kind == MappingKind::Embedding).then_some(self.g_spec.in_dim)
    }

    pub fn forward_f(&self, x: &ObjectRef) -> Result<Vec<f64>> {
        forward_map(&self.f_spec, &self.f, x)
    }

    pub fn forward_g(&self, y: &ObjectRef) -> Result<Vec<f64>> {
        forward_map(&self.g_spec, &self.g, y)
    }

    /// Features consumed by the group weighting: either the source embedding
    /// itself, or the pair-match distribution over the full target
    /// vocabulary.
    pub fn forward_h(&self, x: &ObjectRef, mode: WeightFeatures) -> Result<Vec<f64>> {
        match mode {
            WeightFeatures::Embed => self.forward_f(x),
            WeightFeatures::Prob => {
                let vocab = self.target_vocab().ok_or(Error::KindMismatch(
                    "probabilistic weighting features need an enumerable target vocabulary",
                ))?;
                let e = self.forward_f(x)?;
                let mut logits = Vec::with_capacity(vocab);
                for y in 0..vocab {
                    logits.push(crate::math::dot(&e, self.g.row(y))?);
                }
                Ok(softmax(&logits).into_vec())
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.f.data.len() + self.g.data.len()
    }

    /// Flat views used by the optimizer and finite-difference checks:
    /// `f` block first, then `g`.
    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.f.data.len() {
            self.f.data[i]
        } else {
            self.g.data[i - self.f.data.len()]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        if i < self.f.data.len() {
            self.f.data[i] = v;
        } else {
            let n = self.f.data.len();
            self.g.data[i - n] = v;
        }
    }

    /// Human-readable coordinate for diagnostics: block, row, col.
    pub fn coord_name(&self, i: usize) -> String {
        if i < self.f.data.len() {
            format!("f[{},{}]", i / self.f.cols.max(1), i % self.f.cols.max(1))
        } else {
            let j = i - self.f.data.len();
            format!("g[{},{}]", j / self.g.cols.max(1), j % self.g.cols.max(1))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.f.data.iter().chain(&self.g.data).all(|x| x.is_finite())
    }
}

/// Which features the group weighting consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFeatures {
    /// The source embedding `f(x)`.
    Embed,
    /// The pair-match distribution over the full target vocabulary.
    Prob,
}

fn forward_map(spec: &MappingSpec, block: &Matrix, x: &ObjectRef) -> Result<Vec<f64>> {
    match (spec.kind, x) {
        (MappingKind::Identity, ObjectRef::Features(v)) => {
            if v.len() != spec.in_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.in_dim,
                    got: v.len(),
                });
            }
            Ok(v.clone())
        }
        (MappingKind::Linear, ObjectRef::Features(v)) => {
            let mut vn = v.clone();
            l2_normalize(&mut vn);
            block.matvec(&vn)
        }
        (MappingKind::Embedding, ObjectRef::Id(i)) => {
            if *i >= spec.in_dim {
                return Err(Error::IdOutOfVocab {
                    id: *i,
                    vocab: spec.in_dim,
                });
            }
            Ok(block.row(*i).to_vec())
        }
        (MappingKind::Identity | MappingKind::Linear, ObjectRef::Id(_)) => {
            Err(Error::KindMismatch("feature map applied to a categorical id"))
        }
        (MappingKind::Embedding, ObjectRef::Features(_)) => {
            Err(Error::KindMismatch("embedding lookup applied to features"))
        }
    }
}

/// Accumulate `dL/dparams` for one mapping, given `dL/d(output)`.
pub fn accumulate_map_grad(
    grad: &mut Matrix,
    spec: &MappingSpec,
    x: &ObjectRef,
    upstream: &[f64],
) -> Result<()> {
    match (spec.kind, x) {
        (MappingKind::Identity, ObjectRef::Features(_)) => Ok(()),
        (MappingKind::Linear, ObjectRef::Features(v)) => {
            let mut vn = v.clone();
            l2_normalize(&mut vn);
            grad.add_outer(upstream, &vn, 1.0)
        }
        (MappingKind::Embedding, ObjectRef::Id(i)) => grad.add_row(*i, upstream, 1.0),
        _ => Err(Error::KindMismatch("gradient for mismatched object kind")),
    }
}

/// Zero-initialized gradients, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub f: Matrix,
    pub g: Matrix,
}

impl GradBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            f: Matrix::zeros(params.f.rows(), params.f.cols()),
            g: Matrix::zeros(params.g.rows(), params.g.cols()),
        }
    }

    pub fn zero(&mut self) {
        self.f.fill_zero();
        self.g.fill_zero();
    }

    pub fn scale(&mut self, s: f64) {
        self.f.scale(s);
        self.g.scale(s);
    }

    pub fn add_assign(&mut self, other: &GradBuffer) -> Result<()> {
        self.f.add_assign(&other.f)?;
        self.g.add_assign(&other.g)
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.f.data().len() {
            self.f.data()[i]
        } else {
            self.g.data()[i - self.f.data().len()]
        }
    }

    pub fn num_params(&self) -> usize {
        self.f.data().len() + self.g.data().len()
    }
}

/// Draw fresh parameters, uniform in `[-1/sqrt(d), +1/sqrt(d)]`, so initial
/// logits stay O(1). Deterministic per seed.
pub fn init_params(f_spec: MappingSpec, g_spec: MappingSpec, seed: u64) -> Result<ModelParams> {
    f_spec.validate()?;
    g_spec.validate()?;
    if f_spec.out_dim != g_spec.out_dim {
        return Err(Error::InvalidConfig(format!(
            "f and g must share the embedding dimension, got {} vs {}",
            f_spec.out_dim, g_spec.out_dim
        )));
    }
    let d = f_spec.out_dim as f64;
    let bound = 1.0 / d.sqrt();
    let mut rng = substream(seed, "init");
    let mut draw = |spec: &MappingSpec| {
        let (rows, cols) = spec.param_shape();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    };
    let f = draw(&f_spec);
    let g = draw(&g_spec);
    Ok(ModelParams {
        f_spec,
        g_spec,
        f,
        g,
    })
}
