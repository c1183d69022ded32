//! Named learnable tensors.

use std::ops::Index;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::hex_digest;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Position of a tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// All learnable weights of a model, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        let (idx, _) = self.entries.insert_full(name, tensor.requiring_grad());
        ParamId(idx)
    }

    /// Inserts a tensor sampled from U(−scale, scale).
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape, data).expect("positive extents"))
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![value; n]).expect("positive extents"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if t.numel() != data.len() {
            return Err(Error::Dimension {
                op: "set",
                left: t.shape().to_vec(),
                right: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Records every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.entries.values().map(|t| tape.leaf(t)).collect())
    }

    /// Like [`ModelParams::bind`] but with gradients disabled.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.entries
                .values()
                .map(|t| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    tape.leaf(&t)
                })
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into each tensor's gradient buffer.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, &v) in self.entries.values_mut().zip(&bound.0) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

/// Tape handles of every parameter, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ModelParams, name: &str, d_in: usize, d_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: params.uniform(&format!("{name}.w"), vec![d_in, d_out], scale, rng),
            bias: params.filled(&format!("{name}.b"), vec![d_out], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound[self.weight])?;
        tape.add_row(xw, bound[self.bias])
    }
}
