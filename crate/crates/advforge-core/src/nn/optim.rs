use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Gradients, Model};

/// Serializable optimizer choice; becomes an [`Optimizer`] at train time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam { lr: 1e-4 }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerSpec::Sgd { lr } | OptimizerSpec::Adam { lr } => *lr,
        };
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        Ok(())
    }

    pub fn build(&self, model: &Model) -> Optimizer {
        match self {
            OptimizerSpec::Sgd { lr } => Optimizer::Sgd { lr: *lr },
            OptimizerSpec::Adam { lr } => Optimizer::Adam(Adam::new(*lr, model)),
        }
    }
}

pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    /// Applies one update step in place. Gradients must be aligned with
    /// the model's parameter order.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                for (p, g) in model.params_mut().iter_mut().zip(&grads.tensors) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam(a) => a.step(model, grads),
        }
    }
}

/// Adam with bias correction; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, model: &Model) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            v: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..m.len() {
                let gv = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{LayerSpec, ModelConfig};
    use crate::tensor::Tensor;

    fn one_param_model() -> Model {
        let cfg = ModelConfig {
            input_shape: [1, 1, 1],
            num_classes: 2,
            layers: vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
        };
        Model::new(cfg, 0).unwrap()
    }

    fn grad_of(model: &Model, val: f64) -> Gradients {
        Gradients {
            tensors: model
                .params()
                .iter()
                .map(|p| Tensor::full(p.shape(), val))
                .collect(),
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = one_param_model();
        let before = m.params()[0].data()[0];
        let g = grad_of(&m, 2.0);
        let mut opt = OptimizerSpec::Sgd { lr: 0.5 }.build(&m);
        opt.step(&mut m, &g);
        assert_eq!(m.params()[0].data()[0], before - 1.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With bias correction, the first Adam step is lr * g/(|g| + eps·…)
        // ≈ lr in magnitude for any nonzero gradient.
        let mut m = one_param_model();
        let before: Vec<f64> = m.params()[0].data().to_vec();
        let g = grad_of(&m, 0.123);
        let mut opt = OptimizerSpec::Adam { lr: 1e-4 }.build(&m);
        opt.step(&mut m, &g);
        for (b, a) in before.iter().zip(m.params()[0].data()) {
            let step = b - a;
            assert!((step - 1e-4).abs() < 1e-8, "step was {step}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_alone() {
        let mut m = one_param_model();
        let before: Vec<f64> = m.params()[0].data().to_vec();
        let g = grad_of(&m, 0.0);
        let mut opt = OptimizerSpec::Adam { lr: 1e-4 }.build(&m);
        opt.step(&mut m, &g);
        opt.step(&mut m, &g);
        assert_eq!(before, m.params()[0].data());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = OptimizerSpec::Adam { lr: 1e-4 };
        let j = serde_json::to_string(&spec).unwrap();
        assert_eq!(j, r#"{"type":"adam","lr":0.0001}"#);
        let back: OptimizerSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(OptimizerSpec::Sgd { lr: 0.0 }.validate().is_err());
        assert!(OptimizerSpec::Adam { lr: -1.0 }.validate().is_err());
        assert!(OptimizerSpec::Adam { lr: f64::NAN }.validate().is_err());
    }
}
