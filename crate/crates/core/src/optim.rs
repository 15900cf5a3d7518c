//! First-order optimizers over a module's trainable tensors.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::Module;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Plain gradient descent or Adam with bias correction. Moment buffers are
/// allocated on the first step, one per trainable tensor in visit order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// Updates every trainable tensor of `module`; `grads` holds one entry
    /// per trainable tensor in visit order, `None` meaning zero.
    pub fn apply(&mut self, module: &mut dyn Module, grads: &[Option<Tensor>]) -> Result<()> {
        let mut sizes = Vec::new();
        module.visit(&mut |_, t| {
            if t.requires_grad {
                sizes.push(t.numel());
            }
        });
        if sizes.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} trainable tensors",
                grads.len(),
                sizes.len()
            )));
        }
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let mut k = 0;
        module.visit_mut(&mut |_, t| {
            if !t.requires_grad {
                return;
            }
            if let Some(g) = &grads[k] {
                let p = t.data_mut();
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (p, d) in p.iter_mut().zip(g.data()) {
                            *p -= self.lr * d;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = (&mut self.m[k], &mut self.v[k]);
                        for (j, (p, &d)) in p.iter_mut().zip(g.data()).enumerate() {
                            m[j] = b1 * m[j] + (1.0 - b1) * d;
                            v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                            *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                        }
                    }
                }
            } else if self.kind == OptimizerKind::Adam {
                // decay the moments as if the gradient were zero
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
                for (j, p) in t.data_mut().iter_mut().enumerate() {
                    *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                }
            }
            k += 1;
        });
        Ok(())
    }
}
