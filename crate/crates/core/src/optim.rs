//! AdamW with decoupled weight decay, global-norm clipping and the
//! warm-up + cosine learning-rate schedule.

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::Result;
use crate::nn::to_f64_vec;

/// Linear warm-up from 0 to `base_lr` over `round(warmup_ratio * total)` steps,
/// then cosine decay to 0 at `total`.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments are kept per variable; weight decay applies to tensors of rank ≥ 2 only.
pub struct AdamW {
    cfg: AdamWConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, cfg: AdamWConfig) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, vars, m, v, t: 0 })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Applies one update with the given (already averaged and clipped) gradients.
    pub fn step(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = ((&self.m[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = (&m * (1.0 / bc1))?.div(&((&v * (1.0 / bc2))?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let decayed = if var.rank() >= 2 && c.weight_decay > 0.0 {
                (theta * (1.0 - lr * c.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Collects gradients for `vars` (missing ones stay `None`).
pub fn collect_grads(grads: &GradStore, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|v| grads.get(v.as_tensor()).map(|g| g.detach())).collect()
}

/// Adds `other` into `acc` element-wise.
pub fn accumulate(acc: &mut [Option<Tensor>], other: Vec<Option<Tensor>>) -> Result<()> {
    for (a, o) in acc.iter_mut().zip(other) {
        *a = match (a.take(), o) {
            (Some(x), Some(y)) => Some((x + y)?),
            (x, None) => x,
            (None, y) => y,
        };
    }
    Ok(())
}

pub fn global_norm(grads: &[Option<Tensor>]) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += to_f64_vec(&g.sqr()?.sum_all()?)?[0];
    }
    Ok(sq.sqrt())
}

/// Scales gradients in place so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// Multiplies every gradient by `s`.
pub fn scale_grads(grads: &mut [Option<Tensor>], s: f64) -> Result<()> {
    for g in grads.iter_mut().flatten() {
        *g = (&*g * s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_endpoints_and_junction() {
        let total = 1000;
        assert_eq!(lr_at_step(0, total, 4e-5, 0.05), 0.0);
        assert!((lr_at_step(50, total, 4e-5, 0.05) - 4e-5).abs() < 1e-18);
        assert!(lr_at_step(total, total, 4e-5, 0.05).abs() < 1e-20);
        assert!((lr_at_step(49, total, 4e-5, 0.05) - 4e-5 * 49.0 / 50.0).abs() < 1e-18);
        for s in 0..=total {
            let lr = lr_at_step(s, total, 4e-5, 0.05);
            assert!((0.0..=4e-5).contains(&lr));
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let dev = Device::Cpu;
        let mut g = vec![
            Some(Tensor::new(&[3.0f64, 4.0], &dev).unwrap()),
            None,
            Some(Tensor::new(&[12.0f64], &dev).unwrap()),
        ];
        let pre = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((pre - 13.0).abs() < 1e-12);
        assert!(global_norm(&g).unwrap() <= 1.0 + 1e-6);
    }

    #[test]
    fn adamw_moves_against_the_gradient() {
        let var = Var::from_tensor(&Tensor::new(&[[1.0f64, -1.0]], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![var.clone()], AdamWConfig::default()).unwrap();
        let g = Tensor::new(&[[0.5f64, -0.5]], &Device::Cpu).unwrap();
        opt.step(&[Some(g)], 0.1).unwrap();
        let v = to_f64_vec(var.as_tensor()).unwrap();
        // First step: update = sign(g) (bias-corrected), decay 1 - 0.1 * 0.05.
        assert!((v[0] - (0.995 - 0.1)).abs() < 1e-6, "{v:?}");
        assert!((v[1] - (-0.995 + 0.1)).abs() < 1e-6);
        assert_eq!(var.dtype(), DType::F64);
    }
}
