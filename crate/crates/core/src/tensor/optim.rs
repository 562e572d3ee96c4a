use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};

/// Scales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping. `f64::INFINITY` disables
/// clipping but still reports the norm.
pub fn clip_global_norm(params: &mut [Parameter], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::usage(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    for p in params.iter() {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::usage(format!("parameter '{}' has no gradient", p.name)))?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            for v in p.grad.as_mut().unwrap() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

/// Adam moments for a fixed, ordered parameter list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Parameter], lr: f64) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }

    /// One bias-corrected Adam update over `params`.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::usage(format!("parameter '{}' has no gradient", p.name)));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().unwrap();
            if g.len() != self.m[i].len() {
                return Err(Error::dim("adam_step", &[g.len()], &[self.m[i].len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(values: &[f64], grad: &[f64]) -> Parameter {
        let mut p = Parameter::new("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p.grad = Some(grad.to_vec());
        p
    }

    #[test]
    fn clip_under_threshold_is_noop() {
        let mut ps = vec![param(&[0.0, 0.0], &[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut ps, 10.0).unwrap(), 5.0);
        assert_eq!(ps[0].grad.as_deref().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_over_threshold() {
        let mut ps = vec![param(&[0.0, 0.0], &[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut ps, 1.0).unwrap(), 5.0);
        let g = ps[0].grad.as_deref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_rejects_bad_threshold_and_missing_grads() {
        let mut ps = vec![param(&[0.0], &[1.0])];
        assert!(matches!(clip_global_norm(&mut ps, 0.0), Err(Error::Usage(_))));
        assert!(matches!(clip_global_norm(&mut ps, -1.0), Err(Error::Usage(_))));
        ps[0].grad = None;
        assert!(matches!(clip_global_norm(&mut ps, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn clip_post_norm_bounded_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let g: Vec<f64> = (0..7).map(|_| rng.random_range(-10.0..10.0)).collect();
            let g2: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let max_norm = rng.random_range(0.1..5.0);
            let mut ps = vec![param(&[0.0; 7], &g), param(&[0.0; 3], &g2)];
            clip_global_norm(&mut ps, max_norm).unwrap();
            let once: Vec<Vec<f64>> = ps.iter().map(|p| p.grad.clone().unwrap()).collect();
            let post = clip_global_norm(&mut ps, max_norm).unwrap();
            assert!(post <= max_norm + 1e-12);
            let twice: Vec<Vec<f64>> = ps.iter().map(|p| p.grad.clone().unwrap()).collect();
            for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut ps = vec![param(&[1.0, -2.0], &[0.0, 0.0])];
        let mut st = AdamState::new(&ps, 1e-4);
        st.step(&mut ps).unwrap();
        assert_eq!(ps[0].value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
        let mut ps = vec![param(&[0.0], &[0.5])];
        let mut st = AdamState::new(&ps, 1e-4);
        st.step(&mut ps).unwrap();
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((ps[0].value.data()[0] - expected).abs() < 1e-18);
        assert!((ps[0].value.data()[0].abs() - 1e-4).abs() < 1e-11);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut ps = vec![param(&[0.0], &[-2.0])];
        let mut st = AdamState::new(&ps, 1e-3);
        st.step(&mut ps).unwrap();
        let after1 = ps[0].value.data()[0];
        st.step(&mut ps).unwrap();
        let after2 = ps[0].value.data()[0];
        assert!(after1 > 0.0 && after2 > after1);
        assert!(st.second_moment(0).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_missing_gradient_is_usage_error() {
        let mut ps = vec![param(&[0.0], &[1.0])];
        let mut st = AdamState::new(&ps, 1e-3);
        ps[0].grad = None;
        assert!(matches!(st.step(&mut ps), Err(Error::Usage(_))));
    }
}
