use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Handle into a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
}

/// Every trainable tensor of a model, with its gradient buffer and optimizer
/// moments, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    pub step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Validation(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a weight matrix drawn from U(±sqrt(6 / (fan_in + fan_out))).
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        let (fan_out, fan_in) = match shape {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::invalid(format!(
                    "unsupported parameter shape {shape:?}"
                )))
            }
        };
        self.register_uniform_fans(name, shape, fan_in, fan_out, rng)
    }

    /// Same as [`register_uniform`](Self::register_uniform) with explicit
    /// fans, for tensors stored in a compressed form (e.g. a diagonal).
    pub fn register_uniform_fans<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Overwrites a parameter's value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: entry.name.clone(),
                expected: entry.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale ×` each parameter gradient from a backward pass into the
    /// gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let buf = self.entries[id.0].grad.data_mut();
            for (b, x) in buf.iter_mut().zip(g) {
                *b += scale * x;
            }
        }
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.l2_norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that `other` has exactly the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        for e in &self.entries {
            let Some(o) = other.id(&e.name).map(|id| other.entry(id)) else {
                return Err(Error::Validation(format!("missing parameter `{}`", e.name)));
            };
            if o.value.shape() != e.value.shape() {
                return Err(Error::ParamShape {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: o.value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.entries.iter().find(|o| self.id(&o.name).is_none()) {
            return Err(Error::Validation(format!(
                "unexpected parameter `{}`",
                extra.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.register_zeros("w", &[2]).unwrap();
        assert!(s.register_zeros("w", &[3]).is_err());
    }

    #[test]
    fn uniform_init_respects_limit() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = s.register_uniform("w", &[4, 8], &mut rng).unwrap();
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= limit));
        assert!(s.value(id).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn set_rejects_wrong_shape() {
        let mut s = ParameterStore::new();
        let id = s.register_zeros("bias", &[3]).unwrap();
        let err = s.set(id, Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn compatibility_names_the_parameter() {
        let mut a = ParameterStore::new();
        a.register_zeros("x", &[2, 2]).unwrap();
        let mut b = ParameterStore::new();
        b.register_zeros("x", &[2, 3]).unwrap();
        let err = a.check_compatible(&b).unwrap_err();
        assert!(matches!(err, Error::ParamShape { ref name, .. } if name == "x"));
    }
}
