use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::FeatureTapSet;

/// Mean of squared differences over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("cannot compare {:?} with {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Denoising objective: MSE between the true and the predicted noise.
pub fn task_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    mse(eps_true, eps_pred)
}

/// Output-level distillation: MSE between teacher and student noise predictions.
pub fn output_kd_loss(eps_teacher: &Tensor, eps_student: &Tensor) -> Result<Tensor> {
    mse(eps_teacher, eps_student)
}

/// Feature-level distillation: sum over the student's taps of the per-tap MSE
/// against the teacher tap with the same id. Teacher taps the student lacks
/// are ignored.
pub fn feature_kd_loss(teacher: &FeatureTapSet, student: &FeatureTapSet) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (id, s) in &student.taps {
        let t = teacher
            .get(id)
            .ok_or_else(|| Error::Dimension(format!("student tap {id} has no teacher counterpart")))?;
        if t.dims() != s.dims() {
            return Err(Error::Dimension(format!(
                "tap {id}: teacher {:?} vs student {:?}",
                t.dims(),
                s.dims()
            )));
        }
        let term = mse(t, s)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::Dimension("no feature taps to distill".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_out: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_out: 1.0, lambda_feat: 1.0 }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights { lambda_out: 0.0, lambda_feat: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_out >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::config(format!(
                "loss weights must be nonnegative, got out {} and feat {}",
                self.lambda_out, self.lambda_feat
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub out_kd: f64,
    pub feat_kd: f64,
    pub total: f64,
}

/// `total = task + lambda_out * out_kd + lambda_feat * feat_kd`.
pub fn total_loss(task: f64, out_kd: f64, feat_kd: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown { task, out_kd, feat_kd, total: task + w.lambda_out * out_kd + w.lambda_feat * feat_kd }
}

/// Differentiable counterpart of [`total_loss`]. Terms with zero weight are
/// left out of the graph.
pub fn weighted_total(task: &Tensor, out_kd: Option<&Tensor>, feat_kd: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut total = task.clone();
    if let Some(o) = out_kd.filter(|_| w.lambda_out != 0.0) {
        total = (total + (o * w.lambda_out)?)?;
    }
    if let Some(f) = feat_kd.filter(|_| w.lambda_feat != 0.0) {
        total = (total + (f * w.lambda_feat)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::scalar_f64;
    use candle_core::Device;

    #[test]
    fn mse_matches_brute_force_sum() {
        let dev = Device::Cpu;
        let a = Tensor::randn(0f64, 1.0, (2, 3, 4), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 3, 4), &dev).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        assert!((scalar_f64(&task_loss(&a, &b).unwrap()).unwrap() - want).abs() < 1e-12);
        assert_eq!(scalar_f64(&output_kd_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let shifted = (&a + 1.0).unwrap();
        assert!((scalar_f64(&task_loss(&a, &shifted).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let c = (&a + 0.5).unwrap();
        assert!((scalar_f64(&output_kd_loss(&a, &c).unwrap()).unwrap() - 0.25).abs() < 1e-12);
        assert!(task_loss(&a, &b.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn feature_loss_sums_shared_taps() {
        let dev = Device::Cpu;
        let t1 = Tensor::zeros((1, 2, 2, 2), candle_core::DType::F64, &dev).unwrap();
        let t2 = Tensor::zeros((1, 3, 1, 1), candle_core::DType::F64, &dev).unwrap();
        let t3 = Tensor::zeros((1, 3, 1, 1), candle_core::DType::F64, &dev).unwrap();
        let teacher = FeatureTapSet { taps: vec![("a".into(), t1.clone()), ("mid".into(), t3), ("b".into(), t2.clone())] };
        // per-tap MSE: 1.0 for a (offset 1), 4.0 for b (offset 2)
        let student = FeatureTapSet {
            taps: vec![("a".into(), (&t1 + 1.0).unwrap()), ("b".into(), (&t2 + 2.0).unwrap())],
        };
        assert_eq!(scalar_f64(&feature_kd_loss(&teacher, &student).unwrap()).unwrap(), 5.0);
        assert_eq!(scalar_f64(&feature_kd_loss(&teacher, &teacher).unwrap()).unwrap(), 0.0);
        let bad = FeatureTapSet { taps: vec![("b".into(), t1)] };
        let err = feature_kd_loss(&teacher, &bad).unwrap_err().to_string();
        assert!(err.contains("tap b"), "{err}");
    }

    #[test]
    fn total_is_linear_in_weights() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, &LossWeights::NONE).total, 1.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, &LossWeights::default()).total, 6.0);
        let w100 = LossWeights { lambda_out: 100.0, lambda_feat: 100.0 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w100).total, 501.0);
        let w2 = LossWeights { lambda_out: 2.0, lambda_feat: 0.0 };
        let w1 = LossWeights { lambda_out: 1.0, lambda_feat: 0.0 };
        let d2 = total_loss(0.5, 0.3, 0.0, &w2).total - 0.5;
        let d1 = total_loss(0.5, 0.3, 0.0, &w1).total - 0.5;
        assert_eq!(d2, 2.0 * d1);
        assert!(LossWeights { lambda_out: -1.0, lambda_feat: 0.0 }.validate().is_err());
    }
}
