//! Named trainable-flagged parameters and the plain gradient-descent step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::GradMap;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    /// Stable dotted path, e.g. `blocks.3.mlp_l.w1`.
    pub id: String,
    pub value: Tensor,
    /// Frozen parameters (`false`) are never written by an optimizer step.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter { id: id.into(), value, trainable }
    }

    pub fn trainable(id: impl Into<String>, value: Tensor) -> Self {
        Self::new(id, value, true)
    }

    pub fn frozen(id: impl Into<String>, value: Tensor) -> Self {
        Self::new(id, value, false)
    }
}

/// Ordered parameter store; iteration order is the sorted id order, which
/// fixes the update and serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.entries.contains_key(&p.id) {
            return Err(Error::invalid("params", format!("duplicate parameter id {:?}", p.id)));
        }
        self.entries.insert(p.id.clone(), p);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.entries.get(id).ok_or_else(|| Error::UnknownParameter(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.entries.get_mut(id).ok_or_else(|| Error::UnknownParameter(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Flip the trainable flag on every parameter whose id starts with
    /// `prefix`; returns how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.entries.values_mut() {
            if p.id.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Bitwise snapshot used by freeze audits.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.value.clone())).collect()
    }

    /// Ids whose value differs bitwise from `snapshot`.
    pub fn changed_since(&self, snapshot: &BTreeMap<String, Tensor>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(id, p)| snapshot.get(*id).map(|t| !t.bit_eq(&p.value)).unwrap_or(true))
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// One plain gradient-descent step: `value -= lr * grad` for trainable
/// parameters that have a gradient. Frozen parameters are skipped entirely,
/// so their bits cannot change.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradMap, lr: f64) -> usize {
    let mut updated = 0;
    for p in params.entries.values_mut() {
        if !p.trainable {
            continue;
        }
        if let Some(g) = grads.get(&p.id) {
            debug_assert_eq!(g.shape(), p.value.shape());
            for (slot, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                *slot -= lr * gv;
            }
            updated += 1;
        }
    }
    updated
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn duplicate_ids_rejected() {
        let mut set = ParameterSet::new();
        set.insert(Parameter::trainable("a", Tensor::scalar(1.0))).unwrap();
        assert!(set.insert(Parameter::trainable("a", Tensor::scalar(2.0))).is_err());
    }

    #[test]
    fn frozen_parameters_are_bit_identical_after_steps() {
        let mut set = ParameterSet::new();
        set.insert(Parameter::frozen("w.frozen", Tensor::scalar(0.1 + 0.2))).unwrap();
        set.insert(Parameter::trainable("w.live", Tensor::scalar(1.0))).unwrap();
        let before = set.snapshot();

        for _ in 0..10 {
            let mut tape = Tape::new();
            let frozen = tape.param(set.get("w.frozen").unwrap());
            let live = tape.param(set.get("w.live").unwrap());
            let s = tape.add(frozen, live).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            // the frozen param has a nonzero gradient but must never move
            assert!(grads["w.frozen"].item() != 0.0);
            sgd_step(&mut set, &grads, 0.01);
        }

        let changed = set.changed_since(&before);
        assert_eq!(changed, vec!["w.live".to_string()]);
    }

    #[test]
    fn set_trainable_prefix_flips_groups() {
        let mut set = ParameterSet::new();
        set.insert(Parameter::frozen("lm.a", Tensor::scalar(0.0))).unwrap();
        set.insert(Parameter::frozen("lm.b", Tensor::scalar(0.0))).unwrap();
        set.insert(Parameter::frozen("vit.a", Tensor::scalar(0.0))).unwrap();
        assert_eq!(set.set_trainable_prefix("lm.", true), 2);
        assert!(set.get("lm.a").unwrap().trainable);
        assert!(!set.get("vit.a").unwrap().trainable);
    }
}
