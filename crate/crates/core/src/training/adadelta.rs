use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Decayed means of squared gradients and squared updates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    pub eg2: Vec<f64>,
    pub edx2: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize) -> Self {
        AdadeltaState {
            eg2: vec![0.0; len],
            edx2: vec![0.0; len],
        }
    }
}

/// One Adadelta update. `lambda` scales the applied step only; the
/// accumulators always see the full update, so `lambda = 0` freezes the
/// parameter while its statistics keep evolving.
pub fn adadelta_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdadeltaState,
    cfg: AdadeltaConfig,
    lambda: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.eg2.len() != param.len() {
        return Err(Error::Shape {
            node: "adadelta".into(),
            message: format!(
                "parameter has {} entries, gradient {}, state {}",
                param.len(),
                grad.len(),
                state.eg2.len()
            ),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient {} at entry {i}", grad[i])));
    }
    let AdadeltaConfig { rho, epsilon } = cfg;
    for (((x, &g), eg2), edx2) in param
        .iter_mut()
        .zip(grad)
        .zip(state.eg2.iter_mut())
        .zip(state.edx2.iter_mut())
    {
        *eg2 = rho * *eg2 + (1.0 - rho) * g * g;
        let dx = -((*edx2 + epsilon).sqrt() / (*eg2 + epsilon).sqrt()) * g;
        *edx2 = rho * *edx2 + (1.0 - rho) * dx * dx;
        if lambda != 0.0 {
            *x += lambda * dx;
        }
    }
    Ok(())
}

/// Adadelta over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adadelta {
    cfg: AdadeltaConfig,
    states: Vec<Option<AdadeltaState>>,
}

impl Adadelta {
    pub fn new(cfg: AdadeltaConfig) -> Self {
        Adadelta { cfg, states: Vec::new() }
    }

    pub fn config(&self) -> AdadeltaConfig {
        self.cfg
    }

    pub fn state(&self, id: ParamId) -> Option<&AdadeltaState> {
        self.states.get(id.0).and_then(Option::as_ref)
    }

    /// Apply one step using the gradients currently held by the store.
    /// Nothing is updated if any gradient is non-finite.
    pub fn step<S: ParamStore + ?Sized>(&mut self, store: &mut S) -> Result<()> {
        let ids: Vec<ParamId> = store
            .param_ids()
            .into_iter()
            .filter(|id| store.param(*id).trainable)
            .collect();
        for id in &ids {
            let p = store.param(*id);
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in '{}' at entry {i}",
                    p.name
                )));
            }
        }
        if self.states.len() < store.num_params() {
            self.states.resize(store.num_params(), None);
        }
        for id in ids {
            let p = store.param_mut(id);
            let state = self.states[id.0].get_or_insert_with(|| AdadeltaState::new(p.value.len()));
            let lambda = p.relative_lr;
            let (value, grad) = (&mut p.value, &p.grad);
            adadelta_step(value.data_mut(), grad.data(), state, self.cfg, lambda)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_eg2_only() {
        let mut x = [1.5, -2.0];
        let mut st = AdadeltaState {
            eg2: vec![0.4, 0.2],
            edx2: vec![0.1, 0.3],
        };
        adadelta_step(&mut x, &[0.0, 0.0], &mut st, AdadeltaConfig::default(), 1.0).unwrap();
        assert_eq!(x, [1.5, -2.0]);
        assert_eq!(st.eg2, vec![0.95 * 0.4, 0.95 * 0.2]);
        assert_eq!(st.edx2, vec![0.95 * 0.1, 0.95 * 0.3]);
    }

    #[test]
    fn first_step_scalar() {
        let mut x = [0.0];
        let mut st = AdadeltaState::new(1);
        adadelta_step(&mut x, &[1.0], &mut st, AdadeltaConfig::default(), 1.0).unwrap();
        assert!((st.eg2[0] - 0.05).abs() < 1e-15);
        let dx = -(1e-6f64.sqrt()) / (0.05f64 + 1e-6).sqrt();
        assert!((dx + 0.004472).abs() < 1e-6);
        assert!((x[0] - dx).abs() < 1e-15);
        assert!((st.edx2[0] - 0.05 * dx * dx).abs() < 1e-18);
    }

    #[test]
    fn lambda_zero_freezes_but_accumulates() {
        let mut x = [0.25, -0.75];
        let before = x;
        let mut st = AdadeltaState::new(2);
        adadelta_step(&mut x, &[0.3, -1.2], &mut st, AdadeltaConfig::default(), 0.0).unwrap();
        assert_eq!(x.map(f64::to_bits), before.map(f64::to_bits));
        assert!(st.eg2.iter().all(|v| *v > 0.0));
        assert!(st.edx2.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut x = [0.0];
        let mut st = AdadeltaState::new(1);
        let err = adadelta_step(&mut x, &[f64::NAN], &mut st, AdadeltaConfig::default(), 1.0);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(st, AdadeltaState::new(1));
    }
}
