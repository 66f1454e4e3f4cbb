//! Named parameter storage and matching gradient buffers.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Trainable values receive gradients; buffers (batch-norm running
/// statistics) are updated outside the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Insertion order is stable and
/// defines serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter {} has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            ));
        }
        cur.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One gradient buffer per parameter, shaped like the parameter.
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::from_parts(e.value.shape().to_vec(), vec![T::zero(); e.value.numel()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        match self.grads.get_mut(id.0) {
            Some(buf) => buf.add_assign(g),
            None => Err(Error::State(format!("no gradient buffer for parameter {}", id.0))),
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Euclidean norm over all buffers.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::Conv2dGeometry;
    use crate::tensor::tape::Tape;

    #[test]
    fn grad_buffers_match_param_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[4, 2, 3, 3]).unwrap(), ParamKind::Trainable).unwrap();
        s.add("b", Tensor::zeros(&[4]).unwrap(), ParamKind::Trainable).unwrap();
        let g = GradStore::zeros_like(&s);
        for (id, e) in s.iter() {
            assert_eq!(g.get(id).shape(), e.value.shape());
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::scalar(1.0), ParamKind::Trainable).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0), ParamKind::Trainable).is_err());
    }

    #[test]
    fn replaying_backward_doubles_gradients() {
        let mut s = ParamStore::<f64>::new();
        let wid = s
            .add("w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1 - 0.4).unwrap(), ParamKind::Trainable)
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin()).unwrap());
        let w = tape.param(wid, s.get(wid).clone());
        let y = tape.conv2d(x, w, None, Conv2dGeometry::same((3, 3), (1, 1), 1)).unwrap();
        let loss = tape.sum(y);
        let mut once = GradStore::zeros_like(&s);
        tape.backward(loss).unwrap().accumulate_into(&mut once).unwrap();
        let mut twice = GradStore::zeros_like(&s);
        for _ in 0..2 {
            tape.backward(loss).unwrap().accumulate_into(&mut twice).unwrap();
        }
        let doubled = once.get(wid).scale(2.0);
        assert_eq!(twice.get(wid), &doubled);
    }
}
