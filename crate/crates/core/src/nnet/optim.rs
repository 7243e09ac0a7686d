use serde::{Deserialize, Serialize};

use super::tensor::{Param, Scalar, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate, per-parameter moment buffers, and the step counter.
///
/// Buffers are allocated on the first step and matched to parameters by
/// position; later steps must pass the same parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self, NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self, NnError> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn sgd(lr: f64) -> Result<Self, NnError> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Applies one update to every parameter, then bumps the step counter.
    /// Nothing is modified when any gradient is missing or non-finite.
    pub fn update(&mut self, params: &mut [&mut Param<T>]) -> Result<(), NnError> {
        for p in params.iter() {
            let g = p
                .value
                .grad()
                .ok_or_else(|| NnError::MissingGradient(p.name.clone()))?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NanGradient {
                    param: p.name.clone(),
                    index: i,
                });
            }
        }
        if let OptimizerKind::Adam { .. } = self.kind {
            self.ensure_moments(params)?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::from_f64(self.lr);
                for p in params.iter_mut() {
                    let g = p.value.grad().expect("checked").to_vec();
                    for (w, gv) in p.value.data_mut().iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = p.value.grad().expect("checked").to_vec();
                    let m = self.first_moment[i].data_mut();
                    let v = self.second_moment[i].data_mut();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let gj = g[j].to_f64();
                        let mj = beta1 * m[j].to_f64() + (1.0 - beta1) * gj;
                        let vj = beta2 * v[j].to_f64() + (1.0 - beta2) * gj * gj;
                        m[j] = T::from_f64(mj);
                        v[j] = T::from_f64(vj);
                        let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                        *w = T::from_f64(w.to_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_moments(&mut self, params: &[&mut Param<T>]) -> Result<(), NnError> {
        if self.first_moment.is_empty() {
            self.first_moment = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (m, p) in self.first_moment.iter().zip(params) {
            if m.shape() != p.value.shape() {
                return Err(NnError::Shape(format!(
                    "moment buffer {:?} does not match parameter {} {:?}",
                    m.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

impl OptimizerState<f32> {
    /// Checkpoint records: `optim.meta` = [kind, lr, beta1, beta2, eps],
    /// `optim.step` = step counter as two raw u32 words, and the moment
    /// buffers as `optim.m.<i>` / `optim.v.<i>`.
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        let (kind, b1, b2, eps) = match self.kind {
            OptimizerKind::Sgd => (0.0, 0.0, 0.0, 0.0),
            OptimizerKind::Adam { beta1, beta2, eps } => (1.0, beta1, beta2, eps),
        };
        let meta = [kind, self.lr, b1, b2, eps].map(|v| v as f32).to_vec();
        let mut out = vec![
            ("optim.meta".to_string(), Tensor::vector(meta)),
            (
                "optim.step".to_string(),
                Tensor::vector(vec![
                    f32::from_bits(self.step as u32),
                    f32::from_bits((self.step >> 32) as u32),
                ]),
            ),
        ];
        for (i, (m, v)) in self.first_moment.iter().zip(&self.second_moment).enumerate() {
            out.push((format!("optim.m.{i}"), m.clone()));
            out.push((format!("optim.v.{i}"), v.clone()));
        }
        out
    }

    /// Inverse of [`to_records`](Self::to_records); `None` when the
    /// checkpoint carries no optimizer state.
    pub fn from_records(records: &[(String, Tensor<f32>)]) -> Result<Option<Self>, NnError> {
        let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let (Some(meta), Some(step)) = (find("optim.meta"), find("optim.step")) else {
            return Ok(None);
        };
        if meta.len() != 5 || step.len() != 2 {
            return Err(NnError::Checkpoint("malformed optimizer records".into()));
        }
        let m: Vec<f64> = meta.data().iter().map(|&v| v as f64).collect();
        let kind = if m[0] == 0.0 {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Adam {
                beta1: m[2],
                beta2: m[3],
                eps: m[4],
            }
        };
        let mut state = OptimizerState::new(kind, m[1])?;
        state.step = step.data()[0].to_bits() as u64 | ((step.data()[1].to_bits() as u64) << 32);
        let mut i = 0;
        while let (Some(mt), Some(vt)) = (find(&format!("optim.m.{i}")), find(&format!("optim.v.{i}"))) {
            state.first_moment.push(mt.clone());
            state.second_moment.push(vt.clone());
            i += 1;
        }
        Ok(Some(state))
    }
}

pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut OptimizerState<T>) -> Result<(), NnError> {
    debug_assert!(matches!(state.kind, OptimizerKind::Sgd));
    state.update(params)
}

pub fn adam_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut OptimizerState<T>) -> Result<(), NnError> {
    debug_assert!(matches!(state.kind, OptimizerKind::Adam { .. }));
    state.update(params)
}
