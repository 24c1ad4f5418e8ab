use std::collections::HashMap;

use crate::error::{CatError, Result};
use crate::numerics::Tensor;

/// Handle of a registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered registry of every trainable tensor in a model.
///
/// Sharing a parameter between two call sites means handing out the same
/// [`ParamId`] twice; the buffer itself is never duplicated.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CatError::contract(format!("parameter {name:?} registered twice")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total element count over every registered tensor.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Add `grads` into each parameter's `grad` buffer.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let t = &mut self.tensors[id.0];
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.clone()),
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrite values from `(name, tensor)` pairs; every registered name must be present.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| CatError::data(format!("checkpoint is missing {name:?}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(CatError::dim("load_values", self.tensors[i].shape(), src.shape()));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| {
                let mut c = t.clone();
                c.grad = None;
                c
            }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.register("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn prefix_counts() {
        let mut s = ParamStore::new();
        s.register("cat.x", Tensor::zeros(&[2, 3])).unwrap();
        s.register("cat.y", Tensor::zeros(&[4])).unwrap();
        s.register("head.z", Tensor::zeros(&[5])).unwrap();
        assert_eq!(s.num_elements(), 15);
        assert_eq!(s.num_elements_with_prefix("cat."), 10);
    }
}
