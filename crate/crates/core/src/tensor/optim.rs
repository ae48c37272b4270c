use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Moment buffers shaped like `params`.
    pub fn new<'a>(learning_rate: f32, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first,
            second,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {i}: {:?} vs gradient {:?} vs state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(0.001, [&p]);
        s.step(&mut [&mut p], &[Tensor::zeros([3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0f32);
        let mut s = AdamState::new(0.001, [&p]);
        s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-6);
    }

    #[test]
    fn three_steps_on_parabola_match_scalar_reference() {
        // hand-stepped scalar Adam on f(x) = x², f'(x) = 2x
        fn reference(mut x: f64, lr: f64, steps: i32) -> f64 {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
            let (mut m, mut v) = (0.0, 0.0);
            for t in 1..=steps {
                let g = 2.0 * x;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                x -= lr * mh / (vh.sqrt() + eps);
            }
            x
        }
        let expected = reference(1.0, 0.1, 3);
        let mut x = Tensor::scalar(1.0f32);
        let mut s = AdamState::new(0.1, [&x]);
        for _ in 0..3 {
            let g = Tensor::scalar(2.0 * x.data()[0]);
            s.step(&mut [&mut x], &[g]).unwrap();
        }
        assert!((x.data()[0] as f64 - expected).abs() < 1e-6);
        assert_eq!(s.step, 3);
        assert_eq!(s.first_moments()[0].shape(), x.shape());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros([2]);
        let mut s = AdamState::new(0.1, [&p]);
        assert!(s.step(&mut [&mut p], &[Tensor::zeros([3])]).is_err());
        assert_eq!(s.step, 0);
    }
}
