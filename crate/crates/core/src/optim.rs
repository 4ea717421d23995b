//! Named parameters and the Adam optimizer.

use crate::tensor::Tensor;

/// A named model parameter.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value }
    }
}

/// Adam state for one parameter list. Moment buffers are indexed in step
/// with the parameter list they were created for.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One update over all parameters given per-parameter gradients.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.value.shape(), g.shape(), "adam: shape mismatch for {}", p.name);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // with bias correction the first Adam update is lr * g/|g| for any
        // nonzero gradient (epsilon aside)
        let mut params = vec![Param::new("w", Tensor::vector(vec![1.0, -2.0]))];
        let mut opt = Adam::new(&params, 0.1, 0.9, 0.999, 1e-12);
        opt.step(&mut params, &[Tensor::vector(vec![0.5, -3.0])]);
        let w = params[0].value.data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut params = vec![Param::new("x", Tensor::vector(vec![5.0, -3.0]))];
        let mut opt = Adam::new(&params, 0.2, 0.9, 0.999, 1e-8);
        for _ in 0..400 {
            let g = Tensor::vector(params[0].value.data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut params, &[g]);
        }
        assert!(params[0].value.data().iter().all(|x| x.abs() < 1e-3));
    }
}
