use crate::model::ModelParameters;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParameters, learning_rate: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with `grads` shaped like `params`.
    pub fn update(&mut self, params: &mut ModelParameters, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, (&gi, (mi, vi))) in gd.iter().zip(m.data_mut().iter_mut().zip(v.data_mut())).enumerate() {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParameters {
        ModelParameters {
            names: vec!["a".into(), "b".into()],
            tensors: vec![
                Tensor::vector(vec![1.0, -2.0, 0.5]),
                Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            ],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let zeros: Vec<Tensor> = p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam.update(&mut p, &zeros);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let mut adam = Adam::new(&p, 0.01);
        let grads: Vec<Tensor> = p.tensors.iter().map(|t| t.map(|x| if x > 0.0 { 3.0 } else { -0.5 })).collect();
        let before = p.clone();
        adam.update(&mut p, &grads);
        for (a, (b, g)) in p.tensors.iter().zip(before.tensors.iter().zip(&grads)) {
            for ((x, y), gi) in a.data().iter().zip(b.data()).zip(g.data()) {
                // m_hat = g, v_hat = g^2, so the step is lr * sign(g) up to epsilon.
                let expected = y - 0.01 * gi / (gi.abs() + 1e-8);
                assert!((x - expected).abs() < 1e-15);
            }
        }
    }
}
