use alloc::vec::Vec;

use crate::numeric::{Real, Tensor};
use crate::{Error, Result};

/// Adam with decoupled weight decay. The decay is applied to the parameter
/// before the moment update, as `p ← p·(1 − lr·λ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment estimates mirroring a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Real = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>) -> Result<Self> {
        let zeros: Vec<Tensor<F>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect::<Result<_>>()?;
        Ok(OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

impl AdamW {
    /// One update of every parameter with its gradient. Parameters whose
    /// gradient is `None` took no part in the loss and are left untouched,
    /// weight decay included.
    pub fn step<F: Real>(
        &self,
        params: &mut [&mut Tensor<F>],
        grads: &[Option<&[F]>],
        state: &mut OptimizerState<F>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::dim("adamw", &[params.len()], &[grads.len(), state.m.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
            if g.is_some_and(|g| g.len() != p.len()) || p.shape() != m.shape() {
                return Err(Error::dim("adamw", p.shape(), m.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let decay = F::of(1.0 - lr * self.weight_decay);
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, t);
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(num_traits::Float::sqrt(bc2));
        let eps = F::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                *x = *x * decay;
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                *x = *x - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn mismatched_lists_rejected() {
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = OptimizerState::new([&p]).unwrap();
        let g = [1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[Some(&g[..])], &mut st, 1e-3).is_err());
        assert!(opt.step(&mut [&mut p], &[], &mut st, 1e-3).is_err());
        assert_eq!(st.step, 0);
        let g = vec![0.5];
        opt.step(&mut [&mut p], &[Some(&g[..])], &mut st, 1e-3).unwrap();
        assert_eq!(st.step, 1);
        let before = p.clone();
        opt.step(&mut [&mut p], &[None], &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
    }
}
