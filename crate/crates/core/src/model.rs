//! Mutable optimization state: operation order plus per-operation template choice.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{shape_of, Catalog, Features, Shape, TemplateKind};
use crate::ir::{dependency_graph, DepGraph, FunctionSpec, Operator};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("no template for operation {op} ({shape:?})")]
    NoTemplate { op: usize, shape: Shape },
    #[error("mutation record is stale: another mutation or revert intervened")]
    StaleRecord,
    #[error("invalid model state: {0}")]
    InvalidState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateId {
    pub operator: Operator,
    pub variant: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationKind {
    Reorder,
    Template,
    /// The model admits no change (single operation with a single template, or none at all).
    None,
}

impl MutationKind {
    pub fn name(self) -> &'static str {
        match self {
            MutationKind::Reorder => "reorder",
            MutationKind::Template => "template",
            MutationKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Operation `op` moved from order position `from` to `to`.
    Reorder {
        op: usize,
        from: usize,
        to: usize,
    },
    Template {
        op: usize,
        old: TemplateId,
        new: TemplateId,
    },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutationRecord {
    pub mutation: Mutation,
    stamp: u64,
}

impl MutationRecord {
    pub fn kind(&self) -> MutationKind {
        match self.mutation {
            Mutation::Reorder { .. } => MutationKind::Reorder,
            Mutation::Template { .. } => MutationKind::Template,
            Mutation::None => MutationKind::None,
        }
    }
}

/// Serializable snapshot of a model: enough to re-emit a candidate deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelState {
    pub order: Vec<usize>,
    pub variants: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: Arc<FunctionSpec>,
    features: Features,
    dep: DepGraph,
    shapes: Vec<Shape>,
    kinds: Vec<Vec<TemplateKind>>,
    order: Vec<usize>,
    position: Vec<usize>,
    templates: Vec<TemplateId>,
    /// Operations with at least two template variants.
    switchable: Vec<usize>,
    reorder_probability: f64,
    pending: Option<u64>,
    stamp: u64,
}

/// Deterministic topological order of `dep`, smallest index first among ready nodes.
pub fn init_schedule(dep: &DepGraph) -> Vec<usize> {
    let n = dep.len();
    let mut indegree: Vec<usize> = dep.preds.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &j in &dep.succs[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(Reverse(j));
            }
        }
    }
    debug_assert_eq!(order.len(), n, "dependency graph has a cycle");
    order
}

/// Default (variant 0) template for every operation.
pub fn init_templates(
    spec: &FunctionSpec,
    catalog: &Catalog,
) -> Result<Vec<TemplateId>, ModelError> {
    let uses = spec.use_counts();
    (0..spec.body.len())
        .map(|i| {
            let shape = shape_of(spec, i, &uses);
            if catalog.variants(shape).is_empty() {
                Err(ModelError::NoTemplate { op: i, shape })
            } else {
                Ok(TemplateId {
                    operator: spec.body[i].operator,
                    variant: 0,
                })
            }
        })
        .collect()
}

impl Model {
    pub fn new(spec: Arc<FunctionSpec>, catalog: &Catalog) -> Result<Model, ModelError> {
        let dep = dependency_graph(&spec);
        let uses = spec.use_counts();
        let shapes: Vec<Shape> = (0..spec.body.len())
            .map(|i| shape_of(&spec, i, &uses))
            .collect();
        let kinds: Vec<Vec<TemplateKind>> = shapes.iter().map(|&s| catalog.variants(s)).collect();
        let templates = init_templates(&spec, catalog)?;
        let order = init_schedule(&dep);
        let mut position = vec![0; order.len()];
        for (p, &i) in order.iter().enumerate() {
            position[i] = p;
        }
        let switchable = (0..kinds.len()).filter(|&i| kinds[i].len() >= 2).collect();
        Ok(Model {
            spec,
            features: catalog.features,
            dep,
            shapes,
            kinds,
            order,
            position,
            templates,
            switchable,
            reorder_probability: 0.5,
            pending: None,
            stamp: 0,
        })
    }

    /// Rebuilds a model from a saved state, validating order and variant indices.
    pub fn from_state(
        spec: Arc<FunctionSpec>,
        catalog: &Catalog,
        state: &ModelState,
    ) -> Result<Model, ModelError> {
        let mut m = Model::new(spec, catalog)?;
        if !m.dep.is_topological(&state.order) {
            return Err(ModelError::InvalidState(
                "order is not a topological order of the body".into(),
            ));
        }
        if state.variants.len() != m.templates.len() {
            return Err(ModelError::InvalidState(format!(
                "{} template variants for {} operations",
                state.variants.len(),
                m.templates.len()
            )));
        }
        for (i, &v) in state.variants.iter().enumerate() {
            if v as usize >= m.kinds[i].len() {
                return Err(ModelError::InvalidState(format!(
                    "variant {v} out of range for operation {i}"
                )));
            }
            m.templates[i].variant = v;
        }
        m.order = state.order.clone();
        for (p, &i) in m.order.iter().enumerate() {
            m.position[i] = p;
        }
        Ok(m)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            order: self.order.clone(),
            variants: self.templates.iter().map(|t| t.variant).collect(),
        }
    }

    pub fn set_reorder_probability(&mut self, p: f64) {
        self.reorder_probability = p.clamp(0.0, 1.0);
    }

    /// CPU features the template lists were built for.
    pub fn features(&self) -> Features {
        self.features
    }

    pub fn spec(&self) -> &FunctionSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> &Arc<FunctionSpec> {
        &self.spec
    }

    pub fn dep(&self) -> &DepGraph {
        &self.dep
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn templates(&self) -> &[TemplateId] {
        &self.templates
    }

    pub fn shape(&self, op: usize) -> Shape {
        self.shapes[op]
    }

    pub fn variants(&self, op: usize) -> &[TemplateKind] {
        &self.kinds[op]
    }

    pub fn template_kind(&self, op: usize) -> TemplateKind {
        self.kinds[op][self.templates[op].variant as usize]
    }

    /// Inclusive range of order positions `op` can move to while staying topological.
    pub fn legal_window(&self, op: usize) -> (usize, usize) {
        let lo = self.dep.preds[op]
            .iter()
            .map(|&p| self.position[p] + 1)
            .max()
            .unwrap_or(0);
        let hi = self.dep.succs[op]
            .iter()
            .map(|&s| self.position[s] - 1)
            .min()
            .unwrap_or(self.order.len() - 1);
        (lo, hi)
    }

    fn move_op(&mut self, from: usize, to: usize) {
        let op = self.order.remove(from);
        self.order.insert(to, op);
        for p in from.min(to)..=from.max(to) {
            self.position[self.order[p]] = p;
        }
    }

    fn try_reorder<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Mutation> {
        let n = self.order.len();
        if n < 2 {
            return None;
        }
        for _ in 0..32 {
            let op = rng.random_range(0..n);
            let (lo, hi) = self.legal_window(op);
            if hi > lo {
                let from = self.position[op];
                // uniform over the window, excluding the current position
                let mut to = rng.random_range(lo..hi);
                if to >= from {
                    to += 1;
                }
                self.move_op(from, to);
                return Some(Mutation::Reorder { op, from, to });
            }
        }
        None
    }

    fn try_template<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Mutation> {
        if self.switchable.is_empty() {
            return None;
        }
        let op = self.switchable[rng.random_range(0..self.switchable.len())];
        let count = self.kinds[op].len() as u8;
        let old = self.templates[op];
        let mut v = rng.random_range(0..count - 1);
        if v >= old.variant {
            v += 1;
        }
        let new = TemplateId {
            operator: old.operator,
            variant: v,
        };
        self.templates[op] = new;
        Some(Mutation::Template { op, old, new })
    }

    /// Applies exactly one random change and returns the record needed to undo it.
    pub fn mutate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> MutationRecord {
        let reorder_first = rng.random_bool(self.reorder_probability);
        let mutation = if reorder_first {
            self.try_reorder(rng).or_else(|| self.try_template(rng))
        } else {
            self.try_template(rng).or_else(|| self.try_reorder(rng))
        };
        let mutation = mutation
            .or_else(|| self.scan_reorder(rng))
            .unwrap_or(Mutation::None);
        self.stamp += 1;
        self.pending = Some(self.stamp);
        MutationRecord {
            mutation,
            stamp: self.stamp,
        }
    }

    /// Exhaustive fallback when random sampling found no movable operation.
    fn scan_reorder<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Mutation> {
        let movable: Vec<usize> = (0..self.order.len())
            .filter(|&op| {
                let (lo, hi) = self.legal_window(op);
                hi > lo
            })
            .collect();
        if movable.is_empty() {
            return None;
        }
        let op = movable[rng.random_range(0..movable.len())];
        let (lo, hi) = self.legal_window(op);
        let from = self.position[op];
        let mut to = rng.random_range(lo..hi);
        if to >= from {
            to += 1;
        }
        self.move_op(from, to);
        Some(Mutation::Reorder { op, from, to })
    }

    /// Undoes the immediately preceding mutation.
    pub fn revert(&mut self, record: &MutationRecord) -> Result<(), ModelError> {
        if self.pending != Some(record.stamp) {
            return Err(ModelError::StaleRecord);
        }
        match record.mutation {
            Mutation::Reorder { from, to, .. } => self.move_op(to, from),
            Mutation::Template { op, old, .. } => self.templates[op] = old,
            Mutation::None => {}
        }
        self.pending = None;
        Ok(())
    }

    /// Marks the last mutation as kept; its record can no longer be reverted.
    pub fn commit(&mut self, record: &MutationRecord) {
        if self.pending == Some(record.stamp) {
            self.pending = None;
        }
    }

    /// Counts current variants per template kind name, for status output.
    pub fn describe_templates(&self) -> String {
        let mut names: Vec<String> = (0..self.templates.len())
            .map(|i| {
                format!(
                    "{}:{}",
                    self.spec.body[i].operator,
                    self.template_kind(i).name()
                )
            })
            .collect();
        names.sort();
        names.dedup();
        names.join(" ")
    }
}
