use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors. Slots are never reused, so a removed parameter
/// leaves every other [`ParamId`] valid.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    slots: Vec<Option<Param<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.slots.push(Some(Param {
            name: name.into(),
            value,
            grad: None,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        matches!(self.slots.get(id.0), Some(Some(_)))
    }

    pub fn get(&self, id: ParamId) -> Result<&Param<T>> {
        self.slots
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Contract(format!("no parameter in slot {}", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Param<T>> {
        self.slots
            .get_mut(id.0)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Contract(format!("no parameter in slot {}", id.0)))
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor<T>> {
        Ok(&self.get(id)?.value)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<T>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.iter().map(|(id, _)| id).collect()
    }

    /// Total scalar count over live parameters.
    pub fn num_elements(&self) -> usize {
        self.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Resets every gradient to an all-zero buffer.
    pub fn zero_grad(&mut self) {
        for (_, p) in self.iter_mut() {
            match p.grad.as_mut() {
                Some(g) => g.data_mut().fill(T::zero()),
                None => p.grad = Some(p.value.map(|_| T::zero())),
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let p = self.get_mut(id)?;
        match p.grad.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.data_mut().iter_mut().zip(g) {
                    *b = *b + v;
                }
            }
            None => p.grad = Some(p.value.with_shape_of(g.to_vec())),
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> T {
        self.iter()
            .filter_map(|(_, p)| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let s = max_norm / norm;
            for (_, p) in self.iter_mut() {
                if let Some(g) = p.grad.as_mut() {
                    for v in g.data_mut() {
                        *v = *v * s;
                    }
                }
            }
        }
        norm
    }

    /// Same slots and names in another precision; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| {
                    s.as_ref().map(|p| Param {
                        name: p.name.clone(),
                        value: p.value.cast(),
                        grad: None,
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remove_keeps_other_ids() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::zeros(&[2]).unwrap());
        let b = s.add("b", Tensor::zeros(&[3]).unwrap());
        assert_eq!(s.num_elements(), 5);
        s.remove(a);
        assert!(s.get(a).is_err());
        assert_eq!(s.get(b).unwrap().name, "b");
        assert_eq!(s.num_elements(), 3);
        assert_eq!(s.find("b"), Some(b));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2]).unwrap());
        s.accumulate_grad(a, &[3.0, 4.0]).unwrap();
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
