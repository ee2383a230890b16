//! Named parameter storage, the Adam optimizer, and the text checkpoint
//! format.
//!
//! Checkpoint format (`ckpt/1`): a header line, then for each tensor a line
//! `name <id> shape <d0> <d1>` followed by one line of values printed with
//! 17 significant digits (lossless for f64). Tensors appear in insertion
//! order, which is fixed by model construction, so identical training runs
//! write byte-identical checkpoints.

use super::{DiffError, Tensor};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        assert!(
            !name.contains(char::is_whitespace),
            "parameter names must not contain whitespace: {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Serialize to the `ckpt/1` text format.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from("ckpt/1\n");
        for (name, t) in self.iter() {
            let _ = writeln!(out, "name {} shape {} {}", name, t.rows, t.cols);
            let mut first = true;
            for v in &t.values {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v:.16e}");
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DiffError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn from_checkpoint_string(text: &str) -> Result<Self, DiffError> {
        let mut lines = text.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(DiffError::Checkpoint("empty file".into()));
        };
        if header.trim_end() != "ckpt/1" {
            return Err(DiffError::Checkpoint(format!(
                "bad header {header:?}, expected ckpt/1"
            )));
        }
        let mut store = ParamStore::new();
        while let Some((lno, meta)) = lines.next() {
            if meta.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = meta.split_whitespace().collect();
            if toks.len() != 5 || toks[0] != "name" || toks[2] != "shape" {
                return Err(DiffError::Checkpoint(format!(
                    "line {}: malformed tensor header",
                    lno + 1
                )));
            }
            let name = toks[1];
            let rows: usize = toks[3].parse().map_err(|_| {
                DiffError::Checkpoint(format!("line {}: bad rows", lno + 1))
            })?;
            let cols: usize = toks[4].parse().map_err(|_| {
                DiffError::Checkpoint(format!("line {}: bad cols", lno + 1))
            })?;
            let Some((vlno, vline)) = lines.next() else {
                return Err(DiffError::Checkpoint(format!(
                    "missing values for tensor {name}"
                )));
            };
            let values: Vec<f64> = vline
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    DiffError::Checkpoint(format!("line {}: bad value", vlno + 1))
                })?;
            if values.len() != rows * cols {
                return Err(DiffError::Checkpoint(format!(
                    "tensor {name}: expected {} values, found {}",
                    rows * cols,
                    values.len()
                )));
            }
            if store.index.contains_key(name) {
                return Err(DiffError::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.insert(name, Tensor::new(rows, cols, values));
        }
        Ok(store)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, DiffError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_string(&text)
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// One update step. `grads` must align with the store's insertion order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.tensor_mut(i);
            debug_assert_eq!(grad.len(), p.len());
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.values[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(2, 3, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 1e300, -0.0]));
        store.insert("b", Tensor::scalar(std::f64::consts::PI));
        let text = store.to_checkpoint_string();
        let loaded = ParamStore::from_checkpoint_string(&text).unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_header_and_counts() {
        assert!(ParamStore::from_checkpoint_string("ckpt/2\n").is_err());
        let bad = "ckpt/1\nname t shape 2 2\n1.0 2.0 3.0\n";
        assert!(ParamStore::from_checkpoint_string(bad).is_err());
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(1, 2, vec![0.5, -0.5]));
        let before = store.get("w").unwrap().clone();
        let mut adam = Adam::new(0.0, &store);
        adam.step(&mut store, &[vec![1.0, -2.0]]);
        assert_eq!(store.get("w").unwrap(), &before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(w) = w^2 from w = 1.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(0.05, &store);
        for _ in 0..500 {
            let w = store.get("w").unwrap().values[0];
            adam.step(&mut store, &[vec![2.0 * w]]);
        }
        let w = store.get("w").unwrap().values[0];
        assert!(w.abs() < 1e-3, "w = {w}");
    }
}
