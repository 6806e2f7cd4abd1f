use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, Result, Tape, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "circuitcl-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.dim());
        Self { value, grad }
    }
}

/// Named learnable tensors. Names are unique; iteration is in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Tape handles for every parameter of a store bound into one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Merges another binding; names must not collide.
    pub fn extend(&mut self, other: Bound) {
        for (k, v) in other.vars {
            let prev = self.vars.insert(k.clone(), v);
            assert!(prev.is_none(), "parameter `{k}` bound twice");
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Param::new(value));
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    /// Glorot-uniform weight matrix.
    pub fn insert_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros((rows, cols)));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Moves every parameter of `other` into `self` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (k, p) in other.params {
            self.insert(format!("{prefix}{k}"), p.value);
        }
    }

    /// Parameters whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter_map(|(k, p)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), p.clone())))
            .collect();
        ParamStore { params }
    }

    /// Binds every parameter onto `tape`. Trainable bindings are gradient
    /// leaves; frozen ones are constants and never receive gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of the bound leaves into `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, var) in &bound.vars {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(*var)) {
                p.grad += g;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            header,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let (r, c) = p.value.dim();
                    (k.clone(), TensorRecord { shape: [r, c], data: p.value.iter().copied().collect() })
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for (k, rec) in &ckpt.params {
            let [r, c] = rec.shape;
            let value = Matrix::from_shape_vec((r, c), rec.data.clone())
                .map_err(|e| TensorError::Checkpoint(format!("{k}: {e}")))?;
            store.insert(k.clone(), value);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Versioned JSON map of parameter name to shape and row-major values,
/// plus a free-form header describing the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub header: serde_json::Value,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}
