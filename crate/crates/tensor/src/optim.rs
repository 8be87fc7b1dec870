//! Named parameter storage and the AdamW update.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

/// First/second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// Parameters keyed by name, iterated in sorted name order, plus their
/// optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
    state: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            state: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t.param());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.state.get(name)
    }

    pub fn set_state(&mut self, name: &str, st: AdamState<T>) -> Result<()> {
        let p = self.get(name)?;
        if st.m.len() != p.len() || st.v.len() != p.len() {
            return Err(TensorError::Shape {
                op: "set_state",
                lhs: p.dims().to_vec(),
                rhs: vec![st.m.len(), st.v.len()],
            });
        }
        self.state.insert(name.to_string(), st);
        Ok(())
    }

    pub fn has_state(&self) -> bool {
        !self.state.is_empty()
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect()
        };
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            state: self
                .state
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        AdamState {
                            m: conv(&s.m),
                            v: conv(&s.v),
                            step: s.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Euclidean norm of all gradients taken together.
    pub fn global_grad_norm(&self) -> Result<T> {
        let mut sq = T::zero();
        for (name, t) in &self.params {
            let g = t.grad().ok_or_else(|| TensorError::MissingGrad(name.clone()))?;
            for &x in g {
                sq += x * x;
            }
        }
        Ok(sq.sqrt())
    }
}

/// AdamW hyper-parameters. `clip_norm` bounds the global gradient norm
/// before the update; `None` disables clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl AdamW {
    /// One bias-corrected AdamW update of every parameter in `store`, using
    /// the gradients stored on the tensors.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<StepStats> {
        let norm = store.global_grad_norm()?.to_f64().unwrap();
        let clip_scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let decay = T::lit(self.lr * self.weight_decay);
        let scale = T::lit(clip_scale);
        let ParamStore { params, state } = store;
        for (name, p) in params.iter_mut() {
            let g: Vec<T> = p
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(name.clone()))?
                .iter()
                .map(|&x| x * scale)
                .collect();
            let st = state.entry(name.clone()).or_insert_with(|| AdamState {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let data = p.data_mut();
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (one - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (one - b2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] = data[i] - decay * data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale,
        })
    }
}
