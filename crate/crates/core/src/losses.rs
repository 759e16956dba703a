//! Training objectives: symmetric region contrastive loss, mask losses and
//! their weighted total.

use candle_core::{Tensor, D};

use crate::config::{parse, KeyValue};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, to_f64_vec};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub temperature: f64,
    /// While `step < warmup_contrastive_steps`, `lambda_v` is replaced by `warmup_lambda_v`.
    pub warmup_contrastive_steps: usize,
    pub warmup_lambda_v: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_s: 1.0,
            lambda_m: 10.0,
            temperature: 0.07,
            warmup_contrastive_steps: 4000,
            warmup_lambda_v: 100.0,
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    /// CE weight 2.0 and Dice weight 0.5 instead of unit weights.
    pub fn weighted_mask_preset() -> Self {
        Self {
            ce_weight: 2.0,
            dice_weight: 0.5,
            ..Self::default()
        }
    }

    pub fn effective_lambda_v(&self, step: usize) -> f64 {
        if step < self.warmup_contrastive_steps {
            self.warmup_lambda_v
        } else {
            self.lambda_v
        }
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda_v" => self.lambda_v = parse(key, value)?,
            "lambda_s" => self.lambda_s = parse(key, value)?,
            "lambda_m" => self.lambda_m = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "warmup_contrastive_steps" => self.warmup_contrastive_steps = parse(key, value)?,
            "warmup_lambda_v" => self.warmup_lambda_v = parse(key, value)?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "dice_weight" => self.dice_weight = parse(key, value)?,
            "dice_smooth" => self.dice_smooth = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValue for LossWeights {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.set_key(key, value)? {
            Ok(())
        } else {
            Err(Error::UnknownKey(key.to_string()))
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_v", self.lambda_v.to_string()),
            ("lambda_s", self.lambda_s.to_string()),
            ("lambda_m", self.lambda_m.to_string()),
            ("temperature", self.temperature.to_string()),
            ("warmup_contrastive_steps", self.warmup_contrastive_steps.to_string()),
            ("warmup_lambda_v", self.warmup_lambda_v.to_string()),
            ("ce_weight", self.ce_weight.to_string()),
            ("dice_weight", self.dice_weight.to_string()),
            ("dice_smooth", self.dice_smooth.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_s", self.lambda_s),
            ("lambda_m", self.lambda_m),
            ("warmup_lambda_v", self.warmup_lambda_v),
            ("ce_weight", self.ce_weight),
            ("dice_weight", self.dice_weight),
            ("dice_smooth", self.dice_smooth),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn row_normalize(v: &Tensor, what: &'static str) -> Result<Tensor> {
    let norms = v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    if to_f64_vec(&norms)?.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNormDescriptor { grid: what, patch: 0 });
    }
    Ok(v.broadcast_div(&norms)?)
}

fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    Ok(x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?.broadcast_add(&m)?.squeeze(D::Minus1)?)
}

/// Symmetric InfoNCE over a batch of `N` matched rows `(N, D)`.
///
/// The first direction is the usual softmax over `sim(vc_i, vt_k)`. The second
/// contrasts the positive `sim(vt_i, vc_i)` against the other targets
/// `sim(vt_i, vt_k)`, `k != i`, so a batch of one has zero loss.
pub fn contrastive_loss(vc: &Tensor, vt: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, d) = vc.dims2()?;
    if vt.dims2()? != (n, d) {
        return Err(Error::dims(format!("{n}x{d}"), format!("{:?}", vt.dims())));
    }
    let c = row_normalize(vc, "v_c")?;
    let t = row_normalize(vt, "v_t")?;
    let inv_t = 1.0 / temperature;
    let s = (c.matmul(&t.t()?)? * inv_t)?;
    let tt = (t.matmul(&t.t()?)? * inv_t)?;
    let eye = Tensor::eye(n, s.dtype(), s.device())?;
    let pos = (&s * &eye)?.sum(D::Minus1)?;
    let dir1 = (logsumexp_rows(&s)? - &pos)?;
    // Replace the diagonal of the target-target matrix by the positive logit.
    let off = (eye.ones_like()? - &eye)?;
    let row2 = ((tt * &off)? + eye.broadcast_mul(&pos.unsqueeze(1)?)?)?;
    let dir2 = (logsumexp_rows(&row2)? - &pos)?;
    Ok((dir1 + dir2)?.mean_all()?)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `{0,1}` targets, computed stably.
pub fn ce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(Error::dims(format!("{:?}", logits.dims()), format!("{:?}", gt.dims())));
    }
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((logits.relu()? - (logits * gt)?)?.add(&soft)?.mean_all()?)
}

/// Smoothed soft Dice on sigmoid probabilities, averaged over the leading (batch) axis.
pub fn dice_loss(logits: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(Error::dims(format!("{:?}", logits.dims()), format!("{:?}", gt.dims())));
    }
    let b = logits.dim(0)?;
    let p = sigmoid(logits)?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + smooth)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

pub fn mask_loss(logits: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let ce = ce_loss(logits, gt)?;
    let dice = dice_loss(logits, gt, w.dice_smooth)?;
    Ok(((ce * w.ce_weight)? + (dice * w.dice_weight)?)?)
}

/// Scalar loss components, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub v: f64,
    pub s: f64,
    pub m: f64,
}

/// Weighted sum of already computed components; `lambda_v` follows the warm-up rule.
pub fn combine(l_v: &Tensor, l_s: &Tensor, l_m: &Tensor, w: &LossWeights, step: usize) -> Result<(Tensor, LossParts)> {
    let total = ((l_v * w.effective_lambda_v(step))? + (l_s * w.lambda_s)?)?.add(&(l_m * w.lambda_m)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(to_f64_vec(t)?[0]) };
    let parts = LossParts {
        total: scalar(&total)?,
        v: scalar(l_v)?,
        s: scalar(l_s)?,
        m: scalar(l_m)?,
    };
    Ok((total, parts))
}

/// `λ1 L_v(v̂_c, v_t) + λ2 L_s(M̂_c, M_t) + λ3 L_m(M̂_t, M_t)`.
pub fn total_loss(
    v_hat: &Tensor,
    v_t: &Tensor,
    cross_logits: &Tensor,
    target_logits: &Tensor,
    gt: &Tensor,
    w: &LossWeights,
    step: usize,
) -> Result<(Tensor, LossParts)> {
    let l_v = contrastive_loss(v_hat, v_t, w.temperature)?;
    let l_s = mask_loss(cross_logits, gt, w)?;
    let l_m = mask_loss(target_logits, gt, w)?;
    combine(&l_v, &l_s, &l_m, w, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        to_f64_vec(t).unwrap()[0]
    }

    #[test]
    fn single_pair_has_zero_contrastive_loss() {
        let vc = t2(&[vec![1.0, 2.0, -0.5]]);
        let vt = t2(&[vec![-3.0, 0.1, 4.0]]);
        assert_eq!(scalar(&contrastive_loss(&vc, &vt, 0.07).unwrap()), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_at_unit_temperature() {
        let vc = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = scalar(&contrastive_loss(&vc, &vc, 1.0).unwrap());
        let per_direction = (1.0 + (-1.0f64).exp()).ln();
        assert!((per_direction - 0.31326).abs() < 1e-5);
        assert!((l - 2.0 * per_direction).abs() < 1e-12, "{l}");
    }

    #[test]
    fn contrastive_is_scale_invariant_and_rejects_zero_rows() {
        let vc = t2(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![-2.0, 0.3]]);
        let vt = t2(&[vec![0.9, 2.2], vec![0.1, -1.0], vec![-1.0, 1.3]]);
        let a = scalar(&contrastive_loss(&vc, &vt, 0.1).unwrap());
        let b = scalar(&contrastive_loss(&(&vc * 10.0).unwrap(), &(&vt * 10.0).unwrap(), 0.1).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(a >= 0.0);
        let z = t2(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(contrastive_loss(&z, &vt, 0.1).is_err());
    }

    #[test]
    fn saturated_prediction_has_tiny_mask_loss() {
        let gt = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0]]], &Device::Cpu).unwrap();
        let logits = gt.affine(40.0, -20.0).unwrap();
        assert!(scalar(&ce_loss(&logits, &gt).unwrap()) <= 1e-6);
        assert!(scalar(&dice_loss(&logits, &gt, 1.0).unwrap()) <= 1e-4);
    }

    #[test]
    fn all_background_against_all_foreground() {
        let gt = Tensor::ones((1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let logits = Tensor::full(-1e4f64, (1, 4, 4), &Device::Cpu).unwrap();
        let d = scalar(&dice_loss(&logits, &gt, 1.0).unwrap());
        assert!((d - (1.0 - 1.0 / 17.0)).abs() < 1e-9, "{d}");
    }

    #[test]
    fn dice_is_symmetric_for_binary_probabilities() {
        let a = Tensor::new(&[[[1.0f64, 1.0, 0.0, 0.0]]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[[0.0f64, 1.0, 1.0, 1.0]]], &Device::Cpu).unwrap();
        let la = |m: &Tensor| m.affine(2000.0, -1000.0).unwrap();
        let ab = scalar(&dice_loss(&la(&a), &b, 1.0).unwrap());
        let ba = scalar(&dice_loss(&la(&b), &a, 1.0).unwrap());
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn flipping_a_pixel_increases_mask_loss() {
        let gt = Tensor::new(&[[[1.0f64, 0.0, 1.0, 0.0]]], &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let perfect = gt.affine(20.0, -10.0).unwrap();
        let flipped = Tensor::new(&[[[-10.0f64, -10.0, 10.0, -10.0]]], &Device::Cpu).unwrap();
        let a = scalar(&mask_loss(&perfect, &gt, &w).unwrap());
        let b = scalar(&mask_loss(&flipped, &gt, &w).unwrap());
        assert!(b > a);
        let bad = Tensor::zeros((1, 1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(mask_loss(&bad, &gt, &w), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weighted_sum_and_warmup() {
        let s = |v: f64| Tensor::new(&[v], &Device::Cpu).unwrap();
        let mut w = LossWeights {
            warmup_contrastive_steps: 0,
            ..LossWeights::default()
        };
        let (_, p) = combine(&s(0.5), &s(0.2), &s(0.1), &w, 10).unwrap();
        assert!((p.total - 1.7).abs() < 1e-12);
        let (_, p) = combine(&s(0.0), &s(0.0), &s(0.0), &w, 0).unwrap();
        assert_eq!(p.total, 0.0);
        w.warmup_contrastive_steps = 4000;
        let (_, p) = combine(&s(0.01), &s(0.0), &s(0.0), &w, 0).unwrap();
        assert!((p.total - 1.0).abs() < 1e-12);
        assert_eq!(w.effective_lambda_v(3999), 100.0);
        assert_eq!(w.effective_lambda_v(4000), 1.0);
    }
}
