//! Named parameter arena shared by a model and its optimizer, plus the
//! forward `Session` that binds parameters into a graph and collects
//! their gradients back out.

use std::collections::HashMap;

use crate::graph::{Arr, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
}

#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradients produced by one backward pass.
pub struct GradStore {
    grads: Vec<Option<Arr>>,
}

impl GradStore {
    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn l2_norm(&self, id: ParamId) -> f64 {
        self.get(id)
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

/// One forward (and optional backward) pass over a graph bound to a
/// parameter set. When built with `inference`, parameter leaves carry no
/// gradient and the backward machinery is skipped entirely.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: Vec<(ParamId, Var)>,
    train: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Session { graph: Graph::new(), params, bound: Vec::new(), train: true }
    }

    pub fn inference(params: &'p ParamSet) -> Self {
        Session { graph: Graph::new(), params, bound: Vec::new(), train: false }
    }

    /// Binds a parameter as a graph leaf. Binding the same parameter more
    /// than once is allowed; gradients accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.graph.leaf(self.params.value(id).clone(), self.train);
        self.bound.push((id, v));
        v
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Arr) -> Var {
        self.graph.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Arr {
        self.graph.value(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.graph.scalar(v)
    }

    /// Runs the reverse pass and gathers parameter gradients.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert!(self.train, "backward on an inference session");
        let node_grads = self.graph.backward(loss);
        let mut grads: Vec<Option<Arr>> = (0..self.params.len()).map(|_| None).collect();
        for (pid, var) in &self.bound {
            if let Some(g) = &node_grads[var.0] {
                match &mut grads[pid.0] {
                    Some(a) => *a += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        GradStore { grads }
    }
}
