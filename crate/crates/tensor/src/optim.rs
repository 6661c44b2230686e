use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters. Weight decay is coupled: `wd * p` is added to the
/// gradient before the moment updates (classic Adam, not AdamW).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_lens: &[usize]) -> Self {
        AdamState {
            m: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&Tensor<T>]) -> Self {
        Self::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update. A `None` gradient is treated as all zeros.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidShape {
            op: "adam_step",
            msg: format!("{} params, {} grads, {} state slots", params.len(), grads.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let step_size = T::from_f64_lossy(cfg.lr / bc1);
    let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
    let eps = T::from_f64_lossy(cfg.eps);

    for (idx, param) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        if m.len() != param.len() {
            return Err(TensorError::LengthMismatch { shape: param.shape().to_vec(), len: m.len() });
        }
        let grad = grads[idx];
        if let Some(g) = grad {
            if g.len() != param.len() {
                return Err(TensorError::LengthMismatch { shape: param.shape().to_vec(), len: g.len() });
            }
        }
        let data = param.data_mut();
        for j in 0..data.len() {
            let g = grad.map_or(T::zero(), |g| g[j]) + wd * data[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            data[j] = data[j] - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_params(&[&p]);
        let zeros = vec![0.0; 3];
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(&zeros)], &mut st, &AdamConfig::new(0.1, 0.0)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // f(x) = x has gradient 1; bias-corrected m̂ = v̂ = 1, so Δ = lr / (1 + eps).
        let mut x = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let mut st = AdamState::for_params(&[&x]);
        adam_step(&mut [&mut x], &[Some(&[1.0])], &mut st, &AdamConfig::new(0.1, 0.0)).unwrap();
        assert!((x.data()[0] + 0.1).abs() < 1e-6, "{}", x.data()[0]);
    }

    #[test]
    fn coupled_decay_shrinks_toward_zero() {
        let mut x = Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap();
        let mut st = AdamState::for_params(&[&x]);
        adam_step(&mut [&mut x], &[None], &mut st, &AdamConfig::new(0.01, 0.5)).unwrap();
        assert!(x.data()[0] < 2.0);
    }
}
