use std::collections::BTreeMap;

use thiserror::Error;

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient shape {grad:?} does not match parameter {name} of shape {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

/// Bias-corrected Adam with optional global-norm gradient clipping.
///
/// Moments are kept per parameter name so the same optimizer instance can be
/// reused across steps regardless of tape layout.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Clip gradients to this global L2 norm before the update. On by
    /// default for recurrent models; `None` disables.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(clip_norm: Option<f64>) -> Adam<T> {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every (name, param, grad) triple. Shapes must
    /// align across parameters, gradients, and stored moments.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(&str, &mut Tensor<T>)],
        grads: &[Tensor<T>],
    ) -> Result<(), OptimError> {
        for ((name, p), g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: (*name).to_string(),
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let mut sq = 0.0f64;
                for g in grads {
                    for v in g.data() {
                        let x = v.to_f64();
                        sq += x * x;
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.epsilon);
        let sc = T::from_f64(scale);
        let step_size = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        for ((name, p), g) in params.iter_mut().zip(grads.iter()) {
            let entry = self.moments.entry((*name).to_string()).or_insert_with(|| {
                (
                    Tensor::zeros(p.shape().to_vec()),
                    Tensor::zeros(p.shape().to_vec()),
                )
            });
            let (m, v) = entry;
            let (md, vd) = (m.data_mut(), v.data_mut());
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j] * sc;
                md[j] = b1 * md[j] + one_m_b1 * gj;
                vd[j] = b2 * vd[j] + one_m_b2 * gj * gj;
                // p -= lr/bc1 * m / (sqrt(v/bc2) + eps) computed as
                // p -= step_size * m / (sqrt(v)/sqrt(bc2) + eps)
                pd[j] = pd[j] - step_size * md[j] / (vd[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam: Adam<f64> = Adam::new(None);
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::zeros(vec![3]);
        let before = p.clone();
        for _ in 0..5 {
            adam.step(1e-3, &mut [("p", &mut p)], std::slice::from_ref(&g))
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut adam: Adam<f64> = Adam::new(None);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.5);
        adam.step(1e-3, &mut [("p", &mut p)], std::slice::from_ref(&g))
            .unwrap();
        // Bias correction makes the first update lr * m_hat/(sqrt(v_hat)+eps)
        // with m_hat = g and sqrt(v_hat) = |g|.
        let expected = 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn deterministic_across_identical_calls() {
        let run = || {
            let mut adam: Adam<f64> = Adam::new(Some(5.0));
            let mut p = Tensor::from_vec(vec![2], vec![0.3, -0.9]);
            let g = Tensor::from_vec(vec![2], vec![0.11, 0.07]);
            for _ in 0..10 {
                adam.step(1e-2, &mut [("p", &mut p)], std::slice::from_ref(&g))
                    .unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut adam: Adam<f64> = Adam::new(None);
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        assert!(adam
            .step(1e-3, &mut [("p", &mut p)], std::slice::from_ref(&g))
            .is_err());
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let mut a: Adam<f64> = Adam::new(Some(1.0));
        let mut b: Adam<f64> = Adam::new(None);
        let mut pa = Tensor::scalar(0.0);
        let mut pb = Tensor::scalar(0.0);
        let big = Tensor::scalar(100.0);
        let unit = Tensor::scalar(1.0);
        a.step(1e-3, &mut [("p", &mut pa)], std::slice::from_ref(&big))
            .unwrap();
        b.step(1e-3, &mut [("p", &mut pb)], std::slice::from_ref(&unit))
            .unwrap();
        assert!((pa.data()[0] - pb.data()[0]).abs() < 1e-12);
    }
}
