use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    #[default]
    Adamax,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::AdamW => 2e-4,
            OptimizerKind::Adamax => 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Hyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Moment buffers for one optimizer run. `second` holds `v` for AdamW and the
/// infinity norm `u` for Adamax.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: Hyper, shapes: &[usize]) -> Result<Self> {
        hyper.validate()?;
        Ok(OptimizerState {
            kind,
            hyper,
            t: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_params(kind: OptimizerKind, hyper: Hyper, params: &ModelParams) -> Result<Self> {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(kind, hyper, &shapes)
    }

    pub fn step_params(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let g = grads.tensors();
        self.step(&mut params.tensors_mut(), &g)
    }

    /// One update over parallel lists of parameter and gradient tensors.
    /// Parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::Dimension {
                    expected: self.first[i].len(),
                    got: g.len(),
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let Hyper {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay: wd,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, s) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                let m_hat = m[j] / bc1;
                match self.kind {
                    OptimizerKind::AdamW => {
                        s[j] = beta2 * s[j] + (1.0 - beta2) * gj * gj;
                        let v_hat = s[j] / bc2;
                        let old = p[j];
                        p[j] = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * old;
                    }
                    OptimizerKind::Adamax => {
                        s[j] = (beta2 * s[j]).max(gj.abs());
                        p[j] -= lr * m_hat / (s[j] + eps);
                        p[j] *= 1.0 - lr * wd;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(kind: OptimizerKind, hyper: Hyper, p0: f64, g: f64) -> f64 {
        let mut st = OptimizerState::new(kind, hyper, &[1]).unwrap();
        let mut p = [p0];
        st.step(&mut [&mut p[..]], &[&[g]]).unwrap();
        p[0]
    }

    #[test]
    fn adamax_first_step() {
        let h = Hyper::new(0.002, 0.0);
        let p = one_step(OptimizerKind::Adamax, h, 1.0, 1.0);
        // m = 0.1, m̂ = 1, u = 1
        let expected = 1.0 - 0.002 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() <= 1e-12);
        assert!(((1.0 - p) - 0.002).abs() <= 0.002 * 1e-8 + 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        for kind in [OptimizerKind::Adamax, OptimizerKind::AdamW] {
            let mut st = OptimizerState::new(kind, Hyper::new(0.01, 0.0), &[3]).unwrap();
            let mut p = [0.3, -2.0, 7.5];
            for _ in 0..10 {
                st.step(&mut [&mut p[..]], &[&[0.0; 3]]).unwrap();
            }
            assert_eq!(p, [0.3, -2.0, 7.5]);
        }
    }

    #[test]
    fn adamax_decay_only() {
        let p = one_step(OptimizerKind::Adamax, Hyper::new(0.002, 0.01), 1.0, 0.0);
        assert!((p - (1.0 - 2e-5)).abs() <= 1e-12);
    }

    #[test]
    fn adamw_first_step() {
        let p = one_step(OptimizerKind::AdamW, Hyper::new(0.001, 0.0), 0.0, 1.0);
        assert!((p + 0.001 / (1.0 + 1e-8)).abs() <= 1e-12);
    }

    #[test]
    fn identical_coordinates_stay_identical() {
        let mut st = OptimizerState::new(OptimizerKind::AdamW, Hyper::new(0.01, 0.1), &[2]).unwrap();
        let mut p = [0.7, 0.7];
        for k in 0..20 {
            let g = (k as f64).sin();
            st.step(&mut [&mut p[..]], &[&[g, g]]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn adamax_step_is_bounded() {
        let h = Hyper::new(0.01, 0.0);
        let mut st = OptimizerState::new(OptimizerKind::Adamax, h, &[1]).unwrap();
        let mut p = [0.0];
        for k in 1..50 {
            let before = p[0];
            let g = if k % 3 == 0 { -5.0 } else { 0.2 * k as f64 };
            st.step(&mut [&mut p[..]], &[&[g]]).unwrap();
            let bound = h.lr / (1.0 - h.beta1.powi(k));
            assert!((p[0] - before).abs() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut st = OptimizerState::new(OptimizerKind::Adamax, Hyper::new(0.01, 0.0), &[2]).unwrap();
        let mut p = [1.0, 2.0];
        assert!(st.step(&mut [&mut p[..]], &[&[0.1, f64::INFINITY]]).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.t, 0);
    }
}
