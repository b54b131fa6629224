//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint format. Parameters are keyed by module path.

use super::tensor::Tensor;
use crate::{Error, Result};
use std::collections::HashMap;

/// Accounting bucket a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamCategory {
    Experts,
    Routers,
    Heads,
    Frozen,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Vec<f32>,
    trainable: bool,
    category: ParamCategory,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f32>,
        trainable: bool,
        category: ParamCategory,
    ) -> usize {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "parameter {name}: shape/value mismatch"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let n = value.len();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            shape,
            value,
            grad: vec![0.0; n],
            trainable,
            category,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.entries[pid].name
    }

    pub fn shape(&self, pid: usize) -> &[usize] {
        &self.entries[pid].shape
    }

    pub fn value(&self, pid: usize) -> &[f32] {
        &self.entries[pid].value
    }

    pub fn value_mut(&mut self, pid: usize) -> &mut [f32] {
        &mut self.entries[pid].value
    }

    pub fn grad(&self, pid: usize) -> &[f32] {
        &self.entries[pid].grad
    }

    pub fn is_trainable(&self, pid: usize) -> bool {
        self.entries[pid].trainable
    }

    pub fn set_trainable(&mut self, pid: usize, trainable: bool) {
        self.entries[pid].trainable = trainable;
    }

    pub fn category(&self, pid: usize) -> ParamCategory {
        self.entries[pid].category
    }

    pub fn tensor(&self, pid: usize) -> Tensor {
        let e = &self.entries[pid];
        Tensor {
            shape: e.shape.clone(),
            data: e.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn acc_grad(&mut self, pid: usize, g: &[f32]) {
        let e = &mut self.entries[pid];
        debug_assert_eq!(e.grad.len(), g.len());
        for (d, s) in e.grad.iter_mut().zip(g) {
            *d += *s;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        0..self.entries.len()
    }

    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    /// (trainable, frozen) element counts.
    pub fn param_counts(&self) -> (usize, usize) {
        let mut t = 0;
        let mut f = 0;
        for e in &self.entries {
            if e.trainable {
                t += e.value.len();
            } else {
                f += e.value.len();
            }
        }
        (t, f)
    }

    /// Element counts per category, in (experts, routers, heads, frozen) order.
    pub fn counts_by_category(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for e in &self.entries {
            match e.category {
                ParamCategory::Experts => c.0 += e.value.len(),
                ParamCategory::Routers => c.1 += e.value.len(),
                ParamCategory::Heads => c.2 += e.value.len(),
                ParamCategory::Frozen => c.3 += e.value.len(),
            }
        }
        c
    }

    /// Overwrite a parameter value by name (checkpoint restore).
    pub fn restore(&mut self, name: &str, shape: &[usize], value: Vec<f32>) -> Result<()> {
        let pid = self
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if self.entries[pid].shape != shape {
            return Err(Error::Invalid(format!(
                "parameter {name}: shape mismatch {:?} vs {:?}",
                self.entries[pid].shape, shape
            )));
        }
        self.entries[pid].value = value;
        Ok(())
    }
}
