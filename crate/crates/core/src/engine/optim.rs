use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum, optional L2 weight decay and optional
/// global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients whose joint L2 norm exceeds this are scaled down to it.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place: `v ← μv + g + λw`, `w ← w − lr·v`.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let wf = w.as_f64();
                *vi = self.momentum * *vi + scale * gi.as_f64() + self.weight_decay * wf;
                *w = T::from_f64_lossy(wf - self.lr * *vi);
            }
        }
        Ok(())
    }
}

/// Stateless single step `w ← w − lr·g` with momentum buffers supplied by the
/// caller.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut opt = Sgd::new(lr, momentum, 0.0);
    opt.velocity = std::mem::take(velocity);
    let res = opt.step(params, grads);
    *velocity = opt.velocity;
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Graph;

    #[test]
    fn quadratic_single_step_lands_on_minimum() {
        // loss = (w − 3)² / 2 at w = 0, lr = 1 → w = 3
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut g = Graph::new();
        let w = g.leaf(params[0].clone(), true);
        let d = g.add_scalar(w, -3.0);
        let sq = g.square(d);
        let loss = g.scale(sq, 0.5);
        let loss = g.sum(loss);
        g.backward(loss).unwrap();
        let grads = vec![g.grad_or_zeros(w)];
        let mut vel = Vec::new();
        sgd_step(&mut params, &grads, &mut vel, 1.0, 0.0).unwrap();
        assert_eq!(params[0].data()[0], 3.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut params = vec![Tensor::<f32>::vector(&[1.0, -2.0])];
        let grads = vec![Tensor::<f32>::vector(&[5.0, 5.0])];
        let mut opt = Sgd::new(0.0, 0.9, 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let grads = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Sgd::new(0.1, 0.5, 0.0);
        opt.step(&mut params, &grads).unwrap();
        opt.step(&mut params, &grads).unwrap();
        // v1 = 1, v2 = 1.5 → w = −0.1 − 0.15
        assert!((params[0].data()[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_the_joint_norm() {
        // grads (3, 4) have norm 5; clipped to 1 → step (0.6, 0.8)
        let mut params = vec![Tensor::<f64>::scalar(0.0), Tensor::<f64>::scalar(0.0)];
        let grads = vec![Tensor::<f64>::scalar(3.0), Tensor::<f64>::scalar(4.0)];
        let mut opt = Sgd::new(1.0, 0.0, 0.0);
        opt.clip_norm = Some(1.0);
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] + 0.6).abs() < 1e-12);
        assert!((params[1].data()[0] + 0.8).abs() < 1e-12);
        opt.clip_norm = Some(10.0);
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] + 3.6).abs() < 1e-12);
    }
}
