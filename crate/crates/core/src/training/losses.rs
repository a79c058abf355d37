use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GlobalFeature;

/// Weights of the auxiliary terms; the Chamfer term always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_align: f64,
    pub lambda_mem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_f: 0.0, lambda_align: 0.1, lambda_mem: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_align", self.lambda_align), ("lambda_mem", self.lambda_mem)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        // F-score is a metric without a gradient
        if self.lambda_f != 0.0 {
            return Err(Error::config("lambda_f", "must be 0: the F-score term has no gradient"));
        }
        Ok(())
    }
}

/// `|f_pi - f_gt|^2` and its gradients `(loss, grad_pi, grad_gt)`.
pub fn alignment_loss(f_pi: &GlobalFeature, f_gt: &GlobalFeature) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    if f_pi.dim() != f_gt.dim() {
        return Err(Error::dims(f_pi.dim(), f_gt.dim(), "alignment operands"));
    }
    let diff = f_pi.values() - f_gt.values();
    let loss = diff.dot(&diff);
    let grad_pi = &diff * 2.0;
    let grad_gt = -&grad_pi;
    Ok((loss, grad_pi, grad_gt))
}

/// `cd + lambda_f f + lambda_align align + lambda_mem mem`.
pub fn total_loss(cd: f64, f: f64, align: f64, mem: f64, w: &LossWeights) -> f64 {
    cd + w.lambda_f * f + w.lambda_align * align + w.lambda_mem * mem
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(v: &[f64]) -> GlobalFeature {
        GlobalFeature::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let (l, gp, gg) = alignment_loss(&feat(&[1.0, 0.0]), &feat(&[0.0, 0.0])).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(gp.to_vec(), vec![2.0, 0.0]);
        assert_eq!(gg.to_vec(), vec![-2.0, 0.0]);
        let (l, gp, gg) = alignment_loss(&feat(&[0.5, 2.0]), &feat(&[0.5, 2.0])).unwrap();
        assert_eq!(l, 0.0);
        assert!(gp.iter().chain(gg.iter()).all(|&v| v == 0.0));
        assert!(alignment_loss(&feat(&[1.0]), &feat(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let a = feat(&[0.3, -1.2, 0.8]);
        let b = feat(&[-0.7, 0.4, 1.9]);
        let (_, gp, gg) = alignment_loss(&a, &b).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let bump = |f: &GlobalFeature, s: f64| {
                let mut v = f.values().clone();
                v[k] += s;
                GlobalFeature::new(v).unwrap()
            };
            let fd_pi = (alignment_loss(&bump(&a, h), &b).unwrap().0 - alignment_loss(&bump(&a, -h), &b).unwrap().0) / (2.0 * h);
            let fd_gt = (alignment_loss(&a, &bump(&b, h)).unwrap().0 - alignment_loss(&a, &bump(&b, -h)).unwrap().0) / (2.0 * h);
            assert!((fd_pi - gp[k]).abs() <= 1e-6 * gp[k].abs());
            assert!((fd_gt - gg[k]).abs() <= 1e-6 * gg[k].abs());
        }
    }

    #[test]
    fn total_examples() {
        let zero = LossWeights { lambda_f: 0.0, lambda_align: 0.0, lambda_mem: 0.0 };
        assert_eq!(total_loss(0.7, 5.0, 2.0, 3.0, &zero), 0.7);
        let w = LossWeights { lambda_f: 0.0, lambda_align: 0.1, lambda_mem: 0.25 };
        assert!((total_loss(1.0, 0.0, 2.0, 3.0, &w) - 1.95).abs() < 1e-15);
        let scaled = LossWeights { lambda_f: 0.0, lambda_align: 0.3, lambda_mem: 0.75 };
        let base = total_loss(1.0, 0.0, 2.0, 3.0, &w) - 1.0;
        assert!((total_loss(1.0, 0.0, 2.0, 3.0, &scaled) - 1.0 - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let neg = LossWeights { lambda_mem: -1.0, ..LossWeights::default() };
        assert!(neg.validate().unwrap_err().to_string().contains("lambda_mem"));
        let f = LossWeights { lambda_f: 0.5, ..LossWeights::default() };
        assert!(f.validate().is_err());
    }
}
