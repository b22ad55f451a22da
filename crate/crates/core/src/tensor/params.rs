//! Named parameter store with Adam state.
//!
//! Parameters are keyed by dotted names and iterated in sorted order, so
//! binding, updates and checkpoints are deterministic regardless of
//! insertion order.

use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Real, Tensor, TensorError, VarId};

struct Entry<T> {
    tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

pub struct ParamStore<T: Real> {
    entries: BTreeMap<String, Entry<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor<T>) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::InvalidArg(format!(
                "duplicate parameter name `{}`",
                name
            )));
        }
        tensor.requires_grad = true;
        let n = tensor.numel();
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    /// Inserts every parameter into the graph as a leaf. With
    /// `trainable = false` the graph treats them as constants.
    pub fn bind(
        &self,
        g: &mut Graph<T>,
        trainable: bool,
    ) -> Result<BTreeMap<String, VarId>, TensorError> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.entries {
            let id = g.leaf(&e.tensor, trainable)?;
            out.insert(name.clone(), id);
        }
        Ok(out)
    }

    /// Allocates zeroed gradient buffers for every parameter.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            let n = e.tensor.numel();
            match &mut e.tensor.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                None => e.tensor.grad = Some(vec![T::zero(); n]),
            }
        }
    }

    /// Adds the graph gradients produced by `backward` into the parameter
    /// gradient buffers. Gradients must be finite.
    pub fn absorb_grads(
        &mut self,
        g: &Graph<T>,
        binding: &BTreeMap<String, VarId>,
    ) -> Result<(), TensorError> {
        for (name, id) in binding {
            if let Some(grad) = g.grad(*id) {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "gradient" });
                }
                let e = self
                    .entries
                    .get_mut(name)
                    .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
                e.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// One Adam step with bias correction over every parameter.
    /// Every parameter must carry a gradient buffer (see `zero_grads`).
    pub fn adam_step(
        &mut self,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<(), TensorError> {
        for (name, e) in &self.entries {
            if e.tensor.grad.is_none() {
                return Err(TensorError::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(eps);
        let c1 = T::one() - T::from_f64(beta1).powi(t);
        let c2 = T::one() - T::from_f64(beta2).powi(t);
        for e in self.entries.values_mut() {
            let grad = e.tensor.grad.take().expect("checked above");
            let data = e.tensor.data_mut();
            for (i, &g) in grad.iter().enumerate() {
                e.m[i] = b1 * e.m[i] + (T::one() - b1) * g;
                e.v[i] = b2 * e.v[i] + (T::one() - b2) * g * g;
                let mhat = e.m[i] / c1;
                let vhat = e.v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            e.tensor.grad = Some(grad);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.tensor.cast::<U>()).expect("unique names");
        }
        out
    }
}

/// Uniform init in [-bound, bound]; draws in f64 so f32 and f64 stores
/// built from the same seed hold the same values.
pub fn init_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = super::numel(shape);
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("sized above")
}

/// Kaiming-style bound sqrt(1/fan_in) for conv and linear kernels.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
