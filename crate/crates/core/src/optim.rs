//! Parameter update rules: Adam, plain SGD and critic weight clipping.
//!
//! Gradients are read from the `grad` slot of each trainable tensor in a
//! [`ParamStore`]; a missing gradient counts as zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Weight-clipping constant for the Wasserstein critic.
pub const WGAN_CLIP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerKind::Adam {
                beta1, beta2, eps, ..
            } => OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
            OptimizerKind::Sgd { .. } => OptimizerKind::Sgd { lr },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "Adam",
            OptimizerKind::Sgd { .. } => "SGD",
        }
    }
}

/// Moment buffers and step count for one subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Clamp applied to every trainable entry after each step.
    pub clip: Option<f64>,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, clip: Option<f64>) -> Self {
        OptimizerState {
            kind,
            clip,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies the configured rule, then the clip if any.
    pub fn apply(&mut self, params: &mut ParamStore) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam { .. } => adam_step(self, params)?,
            OptimizerKind::Sgd { .. } => sgd_step(self, params)?,
        }
        if let Some(c) = self.clip {
            clip_params(params, c)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Gradients of every trainable parameter, zeros where none was recorded.
/// Fails on the first non-finite entry, naming its parameter.
fn checked_grads(params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| match p.tensor.grad() {
            Some(g) if g.iter().all(|v| v.is_finite()) => Ok(g.to_vec()),
            Some(_) => Err(Error::NonFinite(format!("gradient of {}", p.name))),
            None => Ok(vec![0.0; p.tensor.numel()]),
        })
        .collect()
}

pub fn adam_step(state: &mut OptimizerState, params: &mut ParamStore) -> Result<()> {
    let OptimizerKind::Adam {
        lr,
        beta1,
        beta2,
        eps,
    } = state.kind
    else {
        return Err(Error::invalid("adam_step called with a non-Adam state"));
    };
    let grads = checked_grads(params)?;
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != grads.len() {
        return Err(Error::invalid(
            "optimizer state does not match the parameter list",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, p) in params.trainable_mut().enumerate() {
        let (m, v, g) = (&mut state.first[k], &mut state.second[k], &grads[k]);
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(state: &mut OptimizerState, params: &mut ParamStore) -> Result<()> {
    let OptimizerKind::Sgd { lr } = state.kind else {
        return Err(Error::invalid("sgd_step called with a non-SGD state"));
    };
    let grads = checked_grads(params)?;
    state.step += 1;
    for (p, g) in params.trainable_mut().zip(&grads) {
        for (w, d) in p.tensor.data_mut().iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Clamps every trainable entry into `[-c, c]`.
pub fn clip_params(params: &mut ParamStore, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!(
            "clip constant must be positive, got {c}"
        )));
    }
    for p in params.trainable_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = w.clamp(-c, c));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        let i = s.push("w".into(), Tensor::from_vec(values.to_vec()), true);
        s.get_mut(i).tensor.set_grad(Some(grads.to_vec()));
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        s.get_mut(0).tensor.set_grad(Some(g.to_vec()));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut s = store(&[0.3, -0.7], &[0.0, 0.0]);
        let mut st = OptimizerState::new(OptimizerKind::adam(), None);
        st.apply(&mut s).unwrap();
        assert_eq!(s.flatten(), vec![0.3, -0.7]);

        set_grad(&mut s, &[1.0, -2.0]);
        st.apply(&mut s).unwrap();
        let m_before = st.first_moments()[0].clone();
        set_grad(&mut s, &[0.0, 0.0]);
        st.apply(&mut s).unwrap();
        for (a, b) in st.first_moments()[0].iter().zip(&m_before) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn adam_two_steps_match_hand_values() {
        let kind = OptimizerKind::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut s = store(&[0.0], &[1.0]);
        let mut st = OptimizerState::new(kind, None);
        st.apply(&mut s).unwrap();
        // m = 0.1, v = 0.001; corrected ratio 1 / (1 + 1e-8)
        let first = -0.1 / (1.0 + 1e-8);
        assert!((s.flatten()[0] - first).abs() < 1e-15);
        set_grad(&mut s, &[1.0]);
        st.apply(&mut s).unwrap();
        let (m, v) = (0.9 * 0.1 + 0.1, 0.999 * 0.001 + 0.001);
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let second = first - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((s.flatten()[0] - second).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_step_bounded_for_bounded_gradients() {
        let kind = OptimizerKind::adam();
        let mut s = store(&[0.0; 4], &[0.0; 4]);
        let mut st = OptimizerState::new(kind, None);
        let bound = kind.lr() / (1.0 - 0.5) * (1.0 + 1e-6);
        let grads = [
            [1.0, -3.0, 0.5, 1e-3],
            [-2.0, 0.1, 5.0, 0.0],
            [4.0, 4.0, -4.0, 1.0],
        ];
        for g in grads.iter().cycle().take(30) {
            let before = s.flatten();
            set_grad(&mut s, g);
            st.apply(&mut s).unwrap();
            for (a, b) in s.flatten().iter().zip(&before) {
                assert!((a - b).abs() <= bound);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = store(&[0.1, 0.2], &[0.0, 0.0]);
            let mut st = OptimizerState::new(OptimizerKind::adam(), None);
            for k in 0..10 {
                set_grad(&mut s, &[(k as f64).sin(), (k as f64).cos()]);
                st.apply(&mut s).unwrap();
            }
            s.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_matches_hand_iteration() {
        let mut s = store(&[1.0], &[2.0]);
        let mut st = OptimizerState::new(OptimizerKind::sgd(0.5), None);
        st.apply(&mut s).unwrap();
        assert_eq!(s.flatten(), vec![0.0]);

        let mut s = store(&[1.0], &[0.0]);
        let mut st = OptimizerState::new(OptimizerKind::sgd(0.1), None);
        // gradient of p^2 is 2p, so each step multiplies p by 0.8
        let mut expect = 1.0;
        for _ in 0..3 {
            let p = s.flatten()[0];
            set_grad(&mut s, &[2.0 * p]);
            st.apply(&mut s).unwrap();
            expect *= 0.8;
        }
        assert!((s.flatten()[0] - expect).abs() < 1e-15);

        let mut s = store(&[1.0, -4.0], &[3.0, 3.0]);
        OptimizerState::new(OptimizerKind::sgd(0.0), None)
            .apply(&mut s)
            .unwrap();
        assert_eq!(s.flatten(), vec![1.0, -4.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[1.0], &[f64::NAN]);
        let mut st = OptimizerState::new(OptimizerKind::adam(), None);
        let err = st.apply(&mut s).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(s.flatten(), vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_clamps_and_is_idempotent() {
        let mut s = store(&[0.5, -0.5, 0.005, -0.01], &[0.0; 4]);
        clip_params(&mut s, WGAN_CLIP).unwrap();
        assert_eq!(s.flatten(), vec![0.01, -0.01, 0.005, -0.01]);
        let once = s.flatten();
        clip_params(&mut s, WGAN_CLIP).unwrap();
        assert_eq!(s.flatten(), once);
        assert!(clip_params(&mut s, 0.0).is_err());
    }

    #[test]
    fn clipping_skips_running_statistics() {
        let mut s = ParamStore::default();
        s.push("stat".into(), Tensor::from_vec(vec![3.0]), false);
        clip_params(&mut s, 0.01).unwrap();
        assert_eq!(s.flatten(), vec![3.0]);
    }

    #[test]
    fn state_round_trips_exactly() {
        let mut s = store(&[0.1, 0.2, 0.3], &[0.0; 3]);
        let mut st = OptimizerState::new(OptimizerKind::adam(), Some(0.5));
        for k in 0..5 {
            set_grad(
                &mut s,
                &[1.0 / 3.0 * k as f64, std::f64::consts::PI, -1e-300],
            );
            st.apply(&mut s).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.json");
        st.save(&path).unwrap();
        let back = OptimizerState::load(&path).unwrap();
        assert_eq!(back, st);
        for (a, b) in back.second_moments()[0].iter().zip(&st.second_moments()[0]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
