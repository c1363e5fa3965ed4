use super::param::ParamStore;
use super::tensor::Scalar;

/// Bias-corrected Adam.
///
/// Moment buffers are created on the first step and keep the shapes of the
/// parameters they track. `step` zeroes every gradient once applied.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.epsilon);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if p.trainable {
                let values = p.value.data_mut();
                for (((w, &g), mi), vi) in values.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1 * *mi + (one - b1) * g;
                    *vi = b2 * *vi + (one - b2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                }
            }
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::from_f64(&[1], &[value]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = single(0.0);
        s.iter_mut().next().unwrap().grad[0] = 1.0;
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut s);
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -1e-3 / (1.0 + 1e-8);
        let got = s.iter().next().unwrap().1.value.data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert_eq!(s.iter().next().unwrap().1.grad[0], 0.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(0.25);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut s);
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 0.25);
    }

    #[test]
    fn two_steps_replay() {
        let (lr, b1, b2, eps, g) = (1e-2f64, 0.9f64, 0.999f64, 1e-8f64, 0.5f64);
        // scripted replay
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = single(1.0);
        let mut adam = AdamState::with_betas(lr, b1, b2, eps);
        for _ in 0..2 {
            s.iter_mut().next().unwrap().grad[0] = g;
            adam.step(&mut s);
        }
        let got = s.iter().next().unwrap().1.value.data()[0];
        assert!((got - w).abs() < 1e-15);
        assert_eq!(adam.steps(), 2);
        assert_eq!(adam.first_moments()[0].len(), 1);
    }
}
