//! Visual prompt matcher: finite-difference gradients, sensitivity and shape contracts.

mod common;

use candle_core::{DType, Tensor};
use v2lab::losses::dice_loss;
use v2lab::mask::Mask;
use v2lab::matcher::{mask_pool, VpMatcher};
use v2lab::model::{grids_tensor, masks_tensor, rows_tensor, ModelConfig};
use v2lab::nn::{to_f64_vec, ParamStore};

use common::*;

const SIZE: usize = 16;

struct Inputs {
    feats: Tensor,
    rows: usize,
    cols: usize,
    masks: Tensor,
    v_q: Tensor,
    gt: Tensor,
}

fn inputs(model: &ModelConfig, seed: u64) -> Inputs {
    let mut rng = rng(seed);
    let mut grid = random_grid(&mut rng, SIZE / 4, SIZE / 4, model.embed_dim);
    grid.patch_size = 4;
    grid.orig_width = SIZE;
    grid.orig_height = SIZE;
    let mq = random_mask(&mut rng, SIZE, SIZE);
    let mt = random_mask(&mut rng, SIZE, SIZE);
    let v_q = mask_pool(&grid, &mq, 1e-9).unwrap();
    Inputs {
        feats: grids_tensor(&[&grid], DType::F64).unwrap(),
        rows: grid.rows,
        cols: grid.cols,
        masks: masks_tensor(&[&mq], DType::F64).unwrap(),
        v_q: rows_tensor(&[v_q], DType::F64).unwrap(),
        gt: masks_tensor(&[&mt], DType::F64).unwrap().squeeze(1).unwrap(),
    }
}

/// Largest relative error between the analytic gradient and a plain central
/// difference over every entry of the parameters whose name starts with `prefix`.
fn central_difference_check(store: &ParamStore, prefix: &str, loss: &dyn Fn() -> Tensor, h: f64) -> (usize, f64) {
    let grads = loss().backward().unwrap();
    let (mut n, mut worst) = (0, 0.0f64);
    let names: Vec<String> = store
        .vars()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, _)| name.to_string())
        .collect();
    assert!(!names.is_empty(), "no parameter starts with {prefix}");
    for name in names {
        let var = store.get(&name).unwrap().clone();
        let analytic = to_f64_vec(grads.get(var.as_tensor()).expect("gradient reaches the parameter")).unwrap();
        let base = to_f64_vec(var.as_tensor()).unwrap();
        for idx in 0..base.len() {
            let at = |offset: f64| {
                let mut v = base.clone();
                v[idx] += offset;
                store.set(&name, &v).unwrap();
                scalar(&loss())
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            store.set(&name, &base).unwrap();
            worst = worst.max(rel_err(analytic[idx], numeric));
            n += 1;
        }
    }
    (n, worst)
}

#[test]
fn refined_feature_norm_gradient_wrt_query_projection() {
    let model = ModelConfig::tiny();
    let m = VpMatcher::new(&model, 5, DType::F64).unwrap();
    let x = inputs(&model, 6);
    let loss = || {
        let out = m.forward(&x.feats, x.rows, x.cols, &x.masks, &x.v_q).unwrap();
        out.v_hat.sqr().unwrap().sum_all().unwrap()
    };
    let (n, worst) = central_difference_check(&m.store, "attn0.q.w", &loss, 1e-3);
    assert!(n > 0 && worst < 1e-4, "max rel err {worst:.3e} over {n} entries");
}

#[test]
fn dice_gradient_wrt_conditioning() {
    let model = ModelConfig::tiny();
    let m = VpMatcher::new(&model, 7, DType::F64).unwrap();
    // Move the conditioning off its zero start so the check is not at a special point.
    for name in ["cond.w", "cond.b"] {
        let n = m.store.get(name).unwrap().elem_count();
        let vals: Vec<f64> = (0..n).map(|i| 0.05 * ((i * 37 % 11) as f64 - 5.0)).collect();
        m.store.set(name, &vals).unwrap();
    }
    let x = inputs(&model, 8);
    let loss = || {
        let out = m.forward(&x.feats, x.rows, x.cols, &x.masks, &x.v_q).unwrap();
        dice_loss(&out.logits, &x.gt, 1.0).unwrap()
    };
    let (n, worst) = central_difference_check(&m.store, "cond.", &loss, 1e-3);
    assert!(n > 0 && worst < 1e-4, "max rel err {worst:.3e} over {n} entries");
}

#[test]
fn visual_prompt_responds_to_both_halves() {
    let model = ModelConfig::tiny();
    let m = VpMatcher::new(&model, 9, DType::F64).unwrap();
    let d = model.embed_dim;
    let mut rng = rng(10);
    let row = |rng: &mut rand_chacha::ChaCha8Rng| random_grid(rng, 1, 1, d).data;
    let (a, b) = (row(&mut rng), row(&mut rng));
    let prompt = |a: &[f32], b: &[f32]| {
        let out = m
            .build_visual_prompt(&rows_tensor(&[a.to_vec()], DType::F64).unwrap(), &rows_tensor(&[b.to_vec()], DType::F64).unwrap())
            .unwrap();
        to_f64_vec(&out).unwrap()
    };
    let base = prompt(&a, &b);
    assert_eq!(base.len(), d);
    for i in 0..d {
        let mut a2 = a.clone();
        a2[i] += 1e-2;
        let mut b2 = b.clone();
        b2[i] += 1e-2;
        let da: f64 = prompt(&a2, &b).iter().zip(&base).map(|(x, y)| (x - y).abs()).sum();
        let db: f64 = prompt(&a, &b2).iter().zip(&base).map(|(x, y)| (x - y).abs()).sum();
        assert!(da > 1e-8 && db > 1e-8, "entry {i}: sensitivity {da:.2e} / {db:.2e}");
    }
}

#[test]
fn eval_forward_is_deterministic_with_image_sized_logits() {
    let model = ModelConfig::tiny();
    let m = VpMatcher::new(&model, 11, DType::F32).unwrap();
    let x = inputs(&model, 12);
    let (feats, masks, v_q) = (
        x.feats.to_dtype(DType::F32).unwrap(),
        x.masks.to_dtype(DType::F32).unwrap(),
        x.v_q.to_dtype(DType::F32).unwrap(),
    );
    let a = m.forward(&feats, x.rows, x.cols, &masks, &v_q).unwrap();
    let b = m.forward(&feats, x.rows, x.cols, &masks, &v_q).unwrap();
    assert_eq!(a.v_hat.dims(), &[1, model.embed_dim]);
    assert_eq!(a.logits.dims(), &[1, SIZE, SIZE]);
    assert_eq!(to_f64_vec(&a.v_hat).unwrap(), to_f64_vec(&b.v_hat).unwrap());
    assert_eq!(to_f64_vec(&a.logits).unwrap(), to_f64_vec(&b.logits).unwrap());
    for att in &a.attention {
        let w = to_f64_vec(att).unwrap();
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_mask_pool_is_the_global_mean() {
    let mut rng = rng(13);
    let g = random_grid(&mut rng, 6, 5, 7);
    let pooled = mask_pool(&g, &Mask::full(5, 6), 0.5).unwrap();
    for c in 0..g.dim {
        let mean: f64 = (0..g.num_patches()).map(|p| g.value(c, p) as f64).sum::<f64>() / g.num_patches() as f64;
        assert!((pooled[c] as f64 - mean).abs() < 1e-6);
    }
}
