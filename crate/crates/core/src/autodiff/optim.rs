use super::{ParamSet, TensorError};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with `params`; every entry
    /// must be present.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>]) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "{} gradients and {} moment slots for {} parameters",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            });
        }
        if let Some(i) = grads.iter().position(Option::is_none) {
            return Err(TensorError::MissingGrad(params.names()[i].clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].as_deref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *p -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}
