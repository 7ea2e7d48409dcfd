use crate::autodiff::Tensor;
use crate::classifier::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}` (sgd | adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// Plain gradient descent, or Adam with the usual moment constants.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One descent step with learning rate `lr`; `grads` follow the model's array order.
    pub fn apply(&mut self, model: &mut ModelParams<f32>, grads: &[Tensor<f32>], lr: f64) {
        let lr = lr as f32;
        self.step += 1;
        if self.moments.is_empty() && self.kind == OptimizerKind::Adam {
            self.moments = grads.iter().map(|g| (vec![0.0; g.numel()], vec![0.0; g.numel()])).collect();
        }
        let bias1 = 1.0 - BETA1.powi(self.step);
        let bias2 = 1.0 - BETA2.powi(self.step);
        for (i, ((_, w), g)) in model.arrays_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = &mut self.moments[i];
                    for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}
