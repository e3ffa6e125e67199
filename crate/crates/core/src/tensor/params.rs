use std::collections::BTreeMap;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics if `name` is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with its registered shape.
    pub fn load_from(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = entries
                .get(name)
                .ok_or_else(|| TensorError::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_from",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            self.values[i] = entries[name].clone();
        }
        Ok(())
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Binding {
        Binding(
            self.values
                .iter()
                .map(|t| graph.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }
}

/// Parameter leaves of one [`ParamStore`] placed on a graph.
#[derive(Debug, Clone)]
pub struct Binding(Vec<Var>);

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients in store order; parameters the loss does not reach get zeros.
    pub fn gradients(&self, graph: &Graph, store: &ParamStore) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .zip(&store.values)
            .map(|(&v, t)| {
                graph
                    .grad_slice(v)
                    .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
            })
            .collect()
    }
}
