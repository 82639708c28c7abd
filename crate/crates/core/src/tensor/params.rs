use std::collections::HashMap;

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};
use crate::rng;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
}

/// Named, ordered collection of parameter matrices.
///
/// Insertion order is the serialization order. Initial values depend only on
/// the store seed and the parameter name, so two models sharing a parameter
/// name start from identical values even if their other parameters differ.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(ParamId(id))
    }

    /// Uniform in `±bound`, seeded by `(seed, name)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        seed: u64,
    ) -> Result<ParamId> {
        let name = name.into();
        let mut r = rng::rng(rng::derive_str(seed, &name));
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { r.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            grads: self
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set_flat",
                detail: format!("{} values for {} parameters", flat.len(), self.num_scalars()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.data().len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Adds a fan-in initialised linear layer (`weight` is `c_out x c_in`).
    pub fn add_linear(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        seed: u64,
    ) -> Result<LinearParams> {
        let bound = if c_in > 0 { (1.0 / c_in as f64).sqrt() } else { 0.0 };
        let weight = self.insert_uniform(format!("{prefix}.weight"), c_out, c_in, bound, seed)?;
        let bias = self.insert_uniform(format!("{prefix}.bias"), 1, c_out, bound, seed)?;
        Ok(LinearParams {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    /// Chain of linear layers `c_in -> widths[0] -> ... -> widths[last]`.
    pub fn add_mlp(
        &mut self,
        prefix: &str,
        c_in: usize,
        widths: &[usize],
        final_relu: bool,
        seed: u64,
    ) -> Result<MlpParams> {
        if widths.is_empty() {
            return Err(Error::InvalidArgument(format!("{prefix}: empty mlp widths")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.add_linear(&format!("{prefix}.{i}"), c, w, seed)?);
            c = w;
        }
        Ok(MlpParams { layers, final_relu })
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub(crate) grads: Vec<Matrix>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}

/// `out = x W^T + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl LinearParams {
    pub fn num_scalars(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }
}

/// Linear layers with ReLU between them; ReLU after the last one only if
/// `final_relu`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
    pub final_relu: bool,
}

impl MlpParams {
    pub fn c_in(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn c_out(&self) -> usize {
        self.layers[self.layers.len() - 1].c_out
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(LinearParams::num_scalars).sum()
    }
}
