use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamKey, Tape, Tensor, Var};

/// Named parameter tensors owned by one model component.
///
/// `group` tags every [`ParamKey`] the store hands out, so gradients from a
/// tape that mixes several stores can be routed back to the right owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    group: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    /// Same parameters under a different group id.
    pub fn regrouped(&self, group: u32) -> Self {
        Self {
            group,
            ..self.clone()
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> usize {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group,
            index: index as u32,
        }
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Every tensor as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        (0..self.len()).map(|i| self.leaf(tape, i, track)).collect()
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts tensor `index` on the tape, as a parameter when `track` is set
    /// and as a constant otherwise (frozen).
    pub fn leaf(&self, tape: &mut Tape, index: usize, track: bool) -> Var {
        let value = self.tensors[index].clone();
        if track {
            tape.param(self.key(index), value)
        } else {
            tape.constant(value)
        }
    }

    /// Hex SHA-256 over the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
