use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Slot<S> {
    pub value: Tensor<S>,
    /// `None` until a backward pass has populated it since the last clear.
    pub grad: Option<Tensor<S>>,
}

/// Named learnable parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    slots: BTreeMap<String, Slot<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::Consistency(format!("duplicate parameter name {name:?}")));
        }
        self.slots.insert(name.to_string(), Slot { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Consistency(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::Consistency(format!("no parameter named {name:?}")))
    }

    pub fn slot(&self, name: &str) -> Option<&Slot<S>> {
        self.slots.get(name)
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut Slot<S>> {
        self.slots.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Slot<S>)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Slot<S>)> {
        self.slots.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Adds gradients keyed by parameter name into the accumulators.
    pub fn accumulate(&mut self, grads: BTreeMap<String, Tensor<S>>) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get_mut(&name)
                .ok_or_else(|| Error::Consistency(format!("gradient for unknown slot {name:?}")))?;
            if g.shape() != slot.value.shape() {
                return Err(Error::Consistency(format!(
                    "gradient {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    slot.value.shape()
                )));
            }
            match &mut slot.grad {
                Some(acc) => acc.add_assign(&g)?,
                none => *none = Some(g),
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = None;
        }
    }

    /// Name and L2 norm of the largest gradient, for diagnostics.
    pub fn largest_grad(&self) -> Option<(&str, f64)> {
        self.slots
            .iter()
            .filter_map(|(k, s)| s.grad.as_ref().map(|g| (k.as_str(), g.norm())))
            .fold(None, |best, (k, n)| match best {
                Some((_, b)) if !(n > b) && !n.is_nan() => best,
                _ => Some((k, n)),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = ParamStore::<f64>::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(p.numel(), 3);
    }

    #[test]
    fn accumulate_checks_shapes() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::full(&[2], 1.0));
        p.accumulate(g.clone()).unwrap();
        p.accumulate(g).unwrap();
        assert_eq!(p.grad("w").unwrap().data(), &[2.0, 2.0]);
        let mut bad = BTreeMap::new();
        bad.insert("w".to_string(), Tensor::full(&[3], 1.0));
        assert!(p.accumulate(bad).is_err());
    }
}
