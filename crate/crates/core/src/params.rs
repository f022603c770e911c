//! Ordered named-tensor collections.

use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Insertion-ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamStore { tensors }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Checks names and shapes against a contract, in contract order.
    pub fn audit(&self, contract: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in contract {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.len() != contract.len() {
            let known: std::collections::HashSet<&str> =
                contract.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = self.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::Format(format!(
                "unexpected tensors: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Inserts parameters into a graph on first use and remembers their handles.
pub struct Binder<'p> {
    store: &'p ParamStore,
    trainable: bool,
    vars: IndexMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: IndexMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn var<T: Real>(&mut self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = if self.trainable {
            graph.param_tensor(t)
        } else {
            graph.constant_tensor(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` to an existing node instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients after `backward` for every parameter in the store, as `f32`
    /// tensors. Parameters the loss did not reach get zeros.
    pub fn grads<T: Real>(&self, graph: &Graph<T>) -> ParamStore {
        self.store
            .iter()
            .map(|(k, t)| {
                let g = match self.vars.get(k) {
                    Some(&v) => graph.record(v).grad,
                    None => Tensor::zeros(t.shape().to_vec()),
                };
                (k.to_string(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract() -> Vec<(String, Vec<usize>)> {
        vec![("a".into(), vec![2]), ("b".into(), vec![1, 3])]
    }

    #[test]
    fn audit_reports_missing_mismatch_and_extra() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros([2]));
        assert!(matches!(p.audit(&contract()), Err(Error::MissingTensor(n)) if n == "b"));
        p.insert("b", Tensor::zeros([3]));
        let msg = p.audit(&contract()).unwrap_err().to_string();
        assert!(msg.contains("`b`") && msg.contains("[3]") && msg.contains("[1, 3]"));
        p.insert("b", Tensor::zeros([1, 3]));
        p.audit(&contract()).unwrap();
        p.insert("c", Tensor::zeros([1]));
        assert!(p.audit(&contract()).unwrap_err().to_string().contains("c"));
    }

    #[test]
    fn prefix_round_trip() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros([1]));
        let q = p.with_prefix("vit/");
        assert!(q.contains("vit/x"));
        assert_eq!(q.strip_prefix("vit/"), p);
    }
}
