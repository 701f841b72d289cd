//! Flat parameter vectors and the named layout that maps them onto tensors.

use std::ops::Range;

use numkit::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Ordered, flat serialization of one model's trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn l2_distance(&self, other: &ParamVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(FedError::Dimension(format!(
                "parameter vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Exact equality of every bit, including signed zeros.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, ordered list of parameter tensors packed into one flat vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

/// Index of an entry within a [`ParamLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            shape,
            offset: self.total,
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            match e.init {
                Init::Zeros => out.extend(std::iter::repeat_n(0.0, e.len())),
                Init::Scaled { fan_in, gain } => {
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    out.extend((0..e.len()).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
                }
            }
        }
        ParamVector(out)
    }

    /// Places every parameter on the tape; entries whose index is in
    /// `trainable` become gradient leaves, the rest constants.
    pub fn bind(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<BoundParams> {
        if params.len() != self.total {
            return Err(FedError::Dimension(format!(
                "layout holds {} parameters, vector has {}",
                self.total,
                params.len()
            )));
        }
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let t = Tensor::new(e.shape.clone(), params.0[e.range()].to_vec())?;
                Ok(tape.leaf(t, trainable(ParamId(i)))?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    /// Gathers gradients of bound parameters into a flat vector (zeros for
    /// constants and unreached entries).
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> ParamVector {
        let mut out = vec![0.0; self.total];
        for (e, &v) in self.entries.iter().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                out[e.range()].copy_from_slice(g);
            }
        }
        ParamVector(out)
    }
}

/// Tape handles for every entry of a layout, in layout order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
