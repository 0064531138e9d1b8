use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Step learning-rate schedule: the rate starts at `initial_lr` and is
/// divided by `drop_factor` every `drop_every` iterations.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub initial_lr: f64,
    pub drop_factor: f64,
    pub drop_every: u64,
}

impl Schedule {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.drop_every == 0 {
            return self.initial_lr;
        }
        let drops = (iteration / self.drop_every) as i32;
        self.initial_lr / self.drop_factor.powi(drops)
    }
}

/// SGD with momentum and weight decay over a fixed parameter group layout.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    buffers: Vec<Vec<Tensor>>,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iteration: u64,
}

impl OptimizerState {
    pub fn new(
        template: &[Vec<Tensor>],
        schedule: Schedule,
        momentum: f64,
        weight_decay: f64,
    ) -> OptimizerState {
        assert!(schedule.initial_lr >= 0.0, "learning rate must not be negative");
        let buffers = template
            .iter()
            .map(|group| group.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        OptimizerState {
            buffers,
            schedule,
            momentum,
            weight_decay,
            iteration: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.iteration)
    }

    /// One update: `v ← μv − lr(g + wd·w); w ← w + v`, then the iteration
    /// counter advances. Rejects non-finite gradients.
    pub fn step(&mut self, params: &mut [Vec<Tensor>], grads: &[Vec<Tensor>]) -> Result<()> {
        assert_eq!(params.len(), self.buffers.len());
        assert_eq!(grads.len(), self.buffers.len());
        for group in grads {
            for g in group {
                if !g.all_finite() {
                    return Err(Error::TrainingDiverged {
                        iteration: self.iteration,
                        detail: "non-finite gradient".into(),
                    });
                }
            }
        }
        let lr = self.lr();
        let mu = self.momentum;
        let wd = self.weight_decay;
        for (gi, group) in params.iter_mut().enumerate() {
            for (ti, w) in group.iter_mut().enumerate() {
                let v = self.buffers[gi][ti].data_mut();
                let g = grads[gi][ti].data();
                let wv = w.data_mut();
                for j in 0..v.len() {
                    v[j] = mu * v[j] - lr * (g[j] + wd * wv[j]);
                    wv[j] += v[j];
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Vec<Tensor>> {
        vec![vec![Tensor::from_vec(&[1], vec![v]).unwrap()]]
    }

    #[test]
    fn plain_gradient_step() {
        let mut params = scalar(1.0);
        let grads = scalar(0.5);
        let sched = Schedule {
            initial_lr: 1.0,
            drop_factor: 10.0,
            drop_every: 100,
        };
        let mut opt = OptimizerState::new(&params, sched, 0.0, 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params[0][0].data()[0], 0.5);
        assert_eq!(opt.iteration, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = scalar(3.0);
        let grads = scalar(0.0);
        let sched = Schedule {
            initial_lr: 0.1,
            drop_factor: 10.0,
            drop_every: 100,
        };
        let mut opt = OptimizerState::new(&params, sched, 0.9, 0.0);
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0][0].data()[0], 3.0);
    }

    #[test]
    fn schedule_drops() {
        let sched = Schedule {
            initial_lr: 0.01,
            drop_factor: 10.0,
            drop_every: 100,
        };
        assert!((sched.lr_at(250) - 0.0001).abs() < 1e-15);
        assert!((sched.lr_at(0) - 0.01).abs() < 1e-15);
        assert!((sched.lr_at(99) - 0.01).abs() < 1e-15);
        assert!((sched.lr_at(100) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = scalar(1.0);
        let grads = scalar(f64::NAN);
        let sched = Schedule {
            initial_lr: 0.1,
            drop_factor: 10.0,
            drop_every: 100,
        };
        let mut opt = OptimizerState::new(&params, sched, 0.9, 0.0);
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }));
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = scalar(0.0);
        let grads = scalar(1.0);
        let sched = Schedule {
            initial_lr: 1.0,
            drop_factor: 10.0,
            drop_every: 1000,
        };
        let mut opt = OptimizerState::new(&params, sched, 0.5, 0.0);
        opt.step(&mut params, &grads).unwrap(); // v = -1, w = -1
        opt.step(&mut params, &grads).unwrap(); // v = -1.5, w = -2.5
        assert!((params[0][0].data()[0] + 2.5).abs() < 1e-15);
    }
}
