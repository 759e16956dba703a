//! Shared test helpers: brute-force oracles and a finite-difference gradient harness.
#![allow(dead_code)]

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v2lab::features::FeatureGrid;
use v2lab::mask::Mask;
use v2lab::nn::{to_f64_vec, ParamStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random feature grid with entries in `[-1, 1]`.
pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> FeatureGrid {
    FeatureGrid {
        dim,
        rows,
        cols,
        patch_size: 1,
        orig_height: rows,
        orig_width: cols,
        data: (0..dim * rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    }
}

/// Cosine similarity of every query patch against every target patch, one pair at a time.
pub fn brute_heatmap(fq: &FeatureGrid, ft: &FeatureGrid) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..fq.rows * fq.cols {
        let mut row = Vec::new();
        for j in 0..ft.rows * ft.cols {
            let (mut dot, mut nq, mut nt) = (0.0f64, 0.0f64, 0.0f64);
            for c in 0..fq.dim {
                let a = fq.value(c, i) as f64;
                let b = ft.value(c, j) as f64;
                dot += a * b;
                nq += a * a;
                nt += b * b;
            }
            row.push(dot / (nq.sqrt() * nt.sqrt()));
        }
        out.push(row);
    }
    out
}

/// First index holding the maximum.
pub fn brute_argmax(row: &[f64]) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v == max).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Symmetric contrastive loss written as two explicit sums per sample. In the
/// target-anchored direction the negatives are the other target features and
/// the positive pair itself completes the denominator.
pub fn literal_contrastive(vc: &[Vec<f64>], vt: &[Vec<f64>], tau: f64) -> f64 {
    let n = vc.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cos(&vc[i], &vt[i]) / tau).exp();
        let mut den1 = 0.0;
        for k in 0..n {
            den1 += (cos(&vc[i], &vt[k]) / tau).exp();
        }
        let mut den2 = pos;
        for k in 0..n {
            if k != i {
                den2 += (cos(&vt[i], &vt[k]) / tau).exp();
            }
        }
        total += (pos / den1).ln() + (pos / den2).ln();
    }
    -total / n as f64
}

/// Linear warm-up then half-cosine to zero, written from the schedule definition.
pub fn schedule_oracle(step: usize, total: usize, base: f64, warmup_ratio: f64) -> f64 {
    let w = (warmup_ratio * total as f64).round();
    let s = step as f64;
    if s < w {
        base * s / w
    } else {
        let p = (s - w) / (total as f64 - w);
        base * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let cx = rng.random_range(0.2..0.8) * w as f64;
    let cy = rng.random_range(0.2..0.8) * h as f64;
    let rx = rng.random_range(0.1..0.3) * w as f64;
    let ry = rng.random_range(0.1..0.3) * h as f64;
    Mask::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

pub fn scalar(t: &Tensor) -> f64 {
    to_f64_vec(t).unwrap()[0]
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Entries skipped because the difference interval is not smooth.
    pub non_smooth: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with a floor so entries where both gradients vanish do not divide by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `loss`'s analytic gradient with central differences (step `h`) on up to
/// `per_tensor` seeded entries of every parameter in `stores`.
pub fn check_gradients(
    stores: &[&ParamStore],
    loss: &dyn Fn() -> Tensor,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> GradReport {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut rng = rng(seed);
    let mut report = GradReport::default();
    for store in stores {
        let mut names: Vec<(String, Var)> = store.vars().map(|(n, v)| (n.to_string(), v.clone())).collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, var) in names {
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => to_f64_vec(g).unwrap(),
                None => vec![0.0; var.elem_count()],
            };
            let base = to_f64_vec(var.as_tensor()).unwrap();
            let picks: Vec<usize> = if base.len() <= per_tensor {
                (0..base.len()).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..base.len())).collect()
            };
            for idx in picks {
                let at = |offset: f64| {
                    let mut v = base.clone();
                    v[idx] = base[idx] + offset;
                    store.set(&name, &v).unwrap();
                    scalar(&loss())
                };
                let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
                store.set(&name, &base).unwrap();
                let d1 = (p1 - m1) / (2.0 * h);
                let d2 = (p2 - m2) / (4.0 * h);
                // On a smooth stretch d1 and d2 differ by O(h^2); a larger gap means
                // the interval crosses a ReLU kink or a mask-threshold flip.
                if (d1 - d2).abs() > 1e-2 * d1.abs().max(d2.abs()).max(1e-4) {
                    report.non_smooth += 1;
                    continue;
                }
                let numeric = (4.0 * d1 - d2) / 3.0;
                let e = rel_err(analytic[idx], numeric);
                report.checked += 1;
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = format!("{name}[{idx}]: analytic {:.6e} numeric {numeric:.6e}", analytic[idx]);
                }
            }
        }
    }
    report
}
