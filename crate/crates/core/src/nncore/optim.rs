use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the Adadelta step; 1.0 is the plain rule.
    #[serde(default = "one")]
    pub lr: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        // First step ≈ sqrt(eps / (1 − rho)) per parameter, in the gradient's sign.
        Self {
            rho: 0.95,
            eps: 1e-8,
            lr: 1.0,
        }
    }
}

impl AdadeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(NnError::InvalidArgument(format!(
                "rho must be in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.eps > 0.0) {
            return Err(NnError::InvalidArgument(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Running averages kept per parameter: E[g²] and E[Δx²].
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState<T> {
    pub acc_grad: Vec<T>,
    pub acc_update: Vec<T>,
}

/// Named parameters plus their optimizer state, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    state: BTreeMap<String, AdadeltaState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            state: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::InvalidArgument(format!(
                "duplicate parameter {name:?}"
            )));
        }
        let n = value.len();
        self.state.insert(
            name.clone(),
            AdadeltaState {
                acc_grad: vec![T::zero(); n],
                acc_update: vec![T::zero(); n],
            },
        );
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn state(&self, name: &str) -> Result<&AdadeltaState<T>> {
        self.state
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    /// Replaces the optimizer state of `name`; lengths must match.
    pub fn set_state(&mut self, name: &str, state: AdadeltaState<T>) -> Result<()> {
        let n = self.get(name)?.len();
        if state.acc_grad.len() != n || state.acc_update.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer state for {name:?}"
            )));
        }
        self.state.insert(name.to_string(), state);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
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

    pub fn reset_state(&mut self) {
        for s in self.state.values_mut() {
            s.acc_grad.fill(T::zero());
            s.acc_update.fill(T::zero());
        }
    }

    /// Converts parameters (and state) to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            state: self
                .state
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        AdadeltaState {
                            acc_grad: conv(&s.acc_grad),
                            acc_update: conv(&s.acc_update),
                        },
                    )
                })
                .collect(),
        }
    }

    /// One Adadelta update:
    ///
    /// ```text
    /// E[g²]  ← ρ E[g²] + (1−ρ) g²
    /// Δx     ← −sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g
    /// E[Δx²] ← ρ E[Δx²] + (1−ρ) Δx²
    /// x      ← x + lr · Δx
    /// ```
    ///
    /// Parameters without an entry in `grads` are left untouched.
    pub fn adadelta_step(
        &mut self,
        grads: &BTreeMap<String, Tensor<T>>,
        cfg: &AdadeltaConfig,
    ) -> Result<()> {
        cfg.validate()?;
        for (name, g) in grads {
            let p = self.get(name)?;
            if p.shape != g.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient for {name:?} has shape {:?}, parameter {:?}",
                    g.shape, p.shape
                )));
            }
        }
        let rho = T::from_f64_lossy(cfg.rho);
        let one_minus = T::one() - rho;
        let eps = T::from_f64_lossy(cfg.eps);
        let lr = T::from_f64_lossy(cfg.lr);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked");
            let s = self
                .state
                .get_mut(name)
                .expect("state exists for every parameter");
            for i in 0..g.data.len() {
                let gi = g.data[i];
                s.acc_grad[i] = rho * s.acc_grad[i] + one_minus * gi * gi;
                let dx = -((s.acc_update[i] + eps).sqrt() / (s.acc_grad[i] + eps).sqrt()) * gi;
                s.acc_update[i] = rho * s.acc_update[i] + one_minus * dx * dx;
                p.data[i] += lr * dx;
            }
        }
        Ok(())
    }
}
