//! VPMatcher: transfers a query region's appearance to the target view.
//!
//! The feature-mapping branch refines the fused query embedding by gated
//! cross-attention over the query feature map. The structural-mapping branch
//! predicts a coarse cross-view mask from the query mask, modulated (FiLM) by
//! the pooled query feature. Both outputs feed a small MLP that emits the
//! visual prompt token.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::features::{project_mask_to_grid, FeatureGrid};
use crate::mask::Mask;
use crate::model::ModelConfig;
use crate::nn::{gelu, sigmoid, softmax_last, upsample_nearest, Conv2d, Init, Linear, ParamStore};

/// Bias of the gate projection at initialisation: `sigmoid(6) ≈ 0.9975`.
pub const GATE_INIT_BIAS: f64 = 6.0;

/// Mean of the descriptors of foreground patches (same selection rule as the anchor pipeline).
pub fn mask_pool(feat: &FeatureGrid, m: &Mask, threshold: f64) -> Result<Vec<f32>> {
    let fg = project_mask_to_grid(m, feat, threshold)?;
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let n = feat.num_patches();
    Ok((0..feat.dim)
        .map(|c| {
            let s: f64 = fg.iter().map(|&p| feat.data[c * n + p] as f64).sum();
            (s / fg.len() as f64) as f32
        })
        .collect())
}

struct CrossLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

/// Intermediate and final tensors of one batched matcher pass.
#[derive(Debug, Clone)]
pub struct MatcherOutput {
    /// Refined region feature `(B, D)`.
    pub v_hat: Tensor,
    /// Cross-view mask logits `(B, H, W)`.
    pub logits: Tensor,
    pub m_tilde: Tensor,
    pub m_prior: Tensor,
    /// Spatial gate per patch `(B, N)`.
    pub gate: Tensor,
    /// Renormalised attention of every layer, each `(B, N)`.
    pub attention: Vec<Tensor>,
}

pub struct VpMatcher {
    pub store: ParamStore,
    dim: usize,
    f_mask: Vec<Conv2d>,
    gate: Conv2d,
    f_prior: Vec<Conv2d>,
    cond: Linear,
    f_dec: Vec<Conv2d>,
    layers: Vec<CrossLayer>,
    mlp1: Linear,
    mlp2: Linear,
    prompt0: Linear,
    prompt1: Linear,
    prompt2: Linear,
}

fn conv_stack(store: &mut ParamStore, name: &str, widths: [usize; 4], stride: usize) -> Result<Vec<Conv2d>> {
    (0..3)
        .map(|i| store.conv(&format!("{name}.{i}"), widths[i], widths[i + 1], 3, stride))
        .collect()
}

fn run_stack(stack: &[Conv2d], x: &Tensor, upsample: bool) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, conv) in stack.iter().enumerate() {
        if upsample {
            h = upsample_nearest(&h, 2)?;
        }
        h = conv.forward(&h)?;
        if i + 1 < stack.len() {
            h = gelu(&h)?;
        }
    }
    Ok(h)
}

impl VpMatcher {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let d = cfg.embed_dim;
        let (c1, c2) = cfg.conv_widths;
        let mut s = ParamStore::new(seed, dtype);
        let f_mask = conv_stack(&mut s, "f_mask", [1, c1, c2, d], 2)?;
        let gate = Conv2d {
            w: s.param("gate.w", &[1, d, 1, 1], Init::Zeros)?,
            b: s.param("gate.b", &[1], Init::Const(GATE_INIT_BIAS))?,
            stride: 1,
            padding: 0,
        };
        let f_prior = conv_stack(&mut s, "f_prior", [1, c1, c2, d], 2)?;
        let cond = s.linear_with("cond", d, 2 * d, Init::Zeros, Init::Zeros)?;
        let f_dec = conv_stack(&mut s, "f_dec", [d, c2, c1, 1], 1)?;
        let layers = (0..cfg.matcher_layers)
            .map(|l| {
                Ok(CrossLayer {
                    wq: s.linear(&format!("attn{l}.q"), d, d)?,
                    wk: s.linear(&format!("attn{l}.k"), d, d)?,
                    wv: s.linear(&format!("attn{l}.v"), d, d)?,
                    wo: s.linear(&format!("attn{l}.o"), d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mlp1 = s.linear("mlp.0", d, cfg.matcher_mlp_hidden)?;
        let mlp2 = s.linear("mlp.1", cfg.matcher_mlp_hidden, d)?;
        let prompt0 = s.linear("prompt.skip", 2 * d, d)?;
        let prompt1 = s.linear("prompt.0", 2 * d, cfg.prompt_mlp_hidden)?;
        let prompt2 = s.linear("prompt.1", cfg.prompt_mlp_hidden, d)?;
        Ok(Self {
            store: s,
            dim: d,
            f_mask,
            gate,
            f_prior,
            cond,
            f_dec,
            layers,
            mlp1,
            mlp2,
            prompt0,
            prompt1,
            prompt2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mask encoder map `(B, D, H/8, W/8)` of a `(B, 1, H, W)` mask batch.
    pub fn encode_mask(&self, masks: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = masks.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("mask size {w}x{h} must be a multiple of 8")));
        }
        run_stack(&self.f_mask, masks, false)
    }

    /// Spatial gate in `(0, 1)` on the `rows x cols` feature grid, `(B, N)`.
    pub fn spatial_gate(&self, fmask_map: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let (b, _, h, w) = fmask_map.dims4()?;
        let g = sigmoid(&self.gate.forward(fmask_map)?)?;
        if rows % h != 0 || cols % w != 0 || rows / h != cols / w {
            return Err(Error::dims(format!("grid multiple of {h}x{w}"), format!("{rows}x{cols}")));
        }
        let g = upsample_nearest(&g, rows / h)?;
        Ok(g.reshape((b, rows * cols))?)
    }

    /// Gated cross-attention from the fused embedding `p_f (B, D)` to query
    /// features `(B, N, D)`, followed by the residual MLP. `gate = None` runs ungated.
    pub fn feature_mapping_forward(&self, p_f: &Tensor, feats: &Tensor, gate: Option<&Tensor>) -> Result<(Tensor, Vec<Tensor>)> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut x = p_f.clone();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.wq.forward(&x)?.unsqueeze(1)?;
            let k = layer.wk.forward(feats)?;
            let v = layer.wv.forward(feats)?;
            let s = (q.matmul(&k.transpose(1, 2)?)? * scale)?.squeeze(1)?;
            let mut a = softmax_last(&s)?;
            if let Some(g) = gate {
                let ag = (a * g)?;
                a = ag.broadcast_div(&ag.sum_keepdim(D::Minus1)?)?;
            }
            let ctx = a.unsqueeze(1)?.matmul(&v)?.squeeze(1)?;
            x = (x + layer.wo.forward(&ctx)?)?;
            attention.push(a);
        }
        let h = self.mlp2.forward(&gelu(&self.mlp1.forward(&x)?)?)?;
        Ok(((x + h)?, attention))
    }

    /// Returns `(logits (B, H, W), m_tilde, m_prior)`; `fmask_map` is the mask encoder output.
    pub fn structural_mapping_forward(&self, masks: &Tensor, v_q: &Tensor, fmask_map: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.dim;
        let m_prior = run_stack(&self.f_prior, masks, false)?;
        let gb = self.cond.forward(v_q)?;
        let b = v_q.dim(0)?;
        let gamma = gb.narrow(1, 0, d)?.reshape((b, d, 1, 1))?;
        let beta = gb.narrow(1, d, d)?.reshape((b, d, 1, 1))?;
        let m_tilde = m_prior
            .broadcast_mul(&(gamma.tanh()? + 1.0)?)?
            .broadcast_add(&beta)?
            .add(fmask_map)?;
        let logits = run_stack(&self.f_dec, &m_tilde, true)?.squeeze(1)?;
        Ok((logits, m_tilde, m_prior))
    }

    /// `MLP([v_c, v_c'])` with a linear skip: `W2 gelu(W1 x + b1) + b2 + W0 x + b0`.
    pub fn build_visual_prompt(&self, v_c: &Tensor, v_c_prime: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[v_c, v_c_prime], D::Minus1)?;
        let h = self.prompt2.forward(&gelu(&self.prompt1.forward(&x)?)?)?;
        Ok((h + self.prompt0.forward(&x)?)?)
    }

    /// Both branches on a batch: features `(B, N, D)` on a `rows x cols` grid,
    /// masks `(B, 1, H, W)`, pooled query features `v_q (B, D)`.
    pub fn forward(&self, feats: &Tensor, rows: usize, cols: usize, masks: &Tensor, v_q: &Tensor) -> Result<MatcherOutput> {
        let fmask_map = self.encode_mask(masks)?;
        let p_f = (v_q + fmask_map.mean((2, 3))?)?;
        let gate = self.spatial_gate(&fmask_map, rows, cols)?;
        let (v_hat, attention) = self.feature_mapping_forward(&p_f, feats, Some(&gate))?;
        let (logits, m_tilde, m_prior) = self.structural_mapping_forward(masks, v_q, &fmask_map)?;
        Ok(MatcherOutput {
            v_hat,
            logits,
            m_tilde,
            m_prior,
            gate,
            attention,
        })
    }
}

/// Per-sample `v_c'`: the query features pooled under the thresholded cross-view
/// mask, or `v_hat` itself when that mask selects no patch.
pub fn pooled_prediction(feat_q: &FeatureGrid, logits: &[f32], v_hat: &[f32], threshold: f64) -> Result<(Vec<f32>, bool)> {
    let m = Mask::from_logits(feat_q.orig_width, feat_q.orig_height, logits)?;
    match mask_pool(feat_q, &m, threshold) {
        Ok(v) => Ok((v, false)),
        Err(Error::EmptyForeground) => Ok((v_hat.to_vec(), true)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grids_tensor, masks_tensor, rows_tensor};
    use crate::nn::to_f64_vec;
    use candle_core::Device;

    fn grid(dim: usize, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> FeatureGrid {
        let n = rows * cols;
        FeatureGrid {
            dim,
            rows,
            cols,
            patch_size: 4,
            orig_height: rows * 4,
            orig_width: cols * 4,
            data: (0..dim * n).map(|i| f(i / n, i % n)).collect(),
        }
    }

    #[test]
    fn mask_pool_uniform_and_mean() {
        let g = grid(3, 2, 2, |c, _| c as f32);
        let m = Mask::from_fn(8, 8, |x, _| x < 4);
        assert_eq!(mask_pool(&g, &m, 0.5).unwrap(), vec![0.0, 1.0, 2.0]);
        let g = grid(2, 1, 2, |c, p| if c == 0 { [1.0, 3.0][p] } else { 0.0 });
        let m = Mask::full(8, 4);
        assert_eq!(mask_pool(&g, &m, 0.5).unwrap(), vec![2.0, 0.0]);
        assert!(matches!(mask_pool(&g, &Mask::new(8, 4), 0.5), Err(Error::EmptyForeground)));
    }

    #[test]
    fn mask_pool_ignores_background() {
        let a = grid(2, 2, 2, |c, p| (c + p) as f32);
        let mut b = a.clone();
        let m = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        for c in 0..2 {
            for p in 1..4 {
                b.data[c * 4 + p] = 99.0;
            }
        }
        assert_eq!(mask_pool(&a, &m, 0.5).unwrap(), mask_pool(&b, &m, 0.5).unwrap());
    }

    fn tiny_inputs(dtype: DType) -> (Tensor, Tensor, Tensor) {
        let g = grid(8, 4, 4, |c, p| ((c * 7 + p * 3) % 11) as f32 / 11.0 - 0.4);
        let m = Mask::from_fn(16, 16, |x, y| (3..11).contains(&x) && (4..12).contains(&y));
        let feats = grids_tensor(&[&g], dtype).unwrap();
        let masks = masks_tensor(&[&m], dtype).unwrap();
        let v_q = rows_tensor(&[mask_pool(&g, &m, 0.5).unwrap()], dtype).unwrap();
        (feats, masks, v_q)
    }

    #[test]
    fn attention_rows_sum_to_one_and_shapes() {
        let vm = VpMatcher::new(&ModelConfig::tiny(), 3, DType::F64).unwrap();
        let (feats, masks, v_q) = tiny_inputs(DType::F64);
        let out = vm.forward(&feats, 4, 4, &masks, &v_q).unwrap();
        for a in &out.attention {
            let v = to_f64_vec(a).unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.v_hat.dims(), &[1, 8]);
        assert_eq!(out.logits.dims(), &[1, 16, 16]);
        let again = vm.forward(&feats, 4, 4, &masks, &v_q).unwrap();
        assert_eq!(to_f64_vec(&out.logits).unwrap(), to_f64_vec(&again.logits).unwrap());
        assert_eq!(to_f64_vec(&out.v_hat).unwrap(), to_f64_vec(&again.v_hat).unwrap());
    }

    #[test]
    fn all_ones_gate_equals_ungated() {
        let vm = VpMatcher::new(&ModelConfig::tiny(), 4, DType::F64).unwrap();
        let (feats, _, v_q) = tiny_inputs(DType::F64);
        let ones = Tensor::ones((1, 16), DType::F64, &Device::Cpu).unwrap();
        let (a, _) = vm.feature_mapping_forward(&v_q, &feats, Some(&ones)).unwrap();
        let (b, _) = vm.feature_mapping_forward(&v_q, &feats, None).unwrap();
        let (a, b) = (to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_film_and_mask_encoder_leave_prior_untouched() {
        let vm = VpMatcher::new(&ModelConfig::tiny(), 5, DType::F32).unwrap();
        let (_, masks, v_q) = tiny_inputs(DType::F32);
        let zero = vm.encode_mask(&masks).unwrap().zeros_like().unwrap();
        let (_, m_tilde, m_prior) = vm.structural_mapping_forward(&masks, &v_q, &zero).unwrap();
        assert_eq!(to_f64_vec(&m_tilde).unwrap(), to_f64_vec(&m_prior).unwrap());

        // Shifting beta by c (gamma still zero) shifts m_tilde by exactly c.
        let d = vm.dim();
        let mut bias = vec![0.0; 2 * d];
        bias[d..].iter_mut().for_each(|v| *v = 0.25);
        vm.store.set("cond.b", &bias).unwrap();
        let (_, shifted, _) = vm.structural_mapping_forward(&masks, &v_q, &zero).unwrap();
        let (s, p) = (to_f64_vec(&shifted).unwrap(), to_f64_vec(&m_prior).unwrap());
        for (x, y) in s.iter().zip(&p) {
            assert!((x - y - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn prompt_mlp_can_pass_through_first_half() {
        let cfg = ModelConfig::tiny();
        let vm = VpMatcher::new(&cfg, 6, DType::F64).unwrap();
        let d = cfg.embed_dim;
        let mut skip = vec![0.0; 2 * d * d];
        for i in 0..d {
            skip[i * d + i] = 1.0;
        }
        vm.store.set("prompt.skip.w", &skip).unwrap();
        vm.store.set("prompt.1.w", &vec![0.0; cfg.prompt_mlp_hidden * d]).unwrap();
        let a = Tensor::new(&[[0.5f64, -1.0, 2.0, 0.0, 3.0, 1.5, -0.25, 0.75]], &Device::Cpu).unwrap();
        let b = (a.ones_like().unwrap() * 7.0).unwrap();
        let out = vm.build_visual_prompt(&a, &b).unwrap();
        assert_eq!(out.dims(), &[1, d]);
        assert_eq!(to_f64_vec(&out).unwrap(), to_f64_vec(&a).unwrap());
    }
}
