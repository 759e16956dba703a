//! Prompt encoder and a small two-way transformer mask decoder.
//!
//! Point prompts become random-Fourier positional encodings plus a learned
//! kind embedding; visual prompts are used as tokens directly. A learned mask
//! token is prepended, tokens and image embeddings attend to each other for a
//! few blocks, and a hypernetwork on the mask token weights per-pixel
//! features produced by a sub-patch projection of the image embedding.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anchor::AnchorPrompt;
use crate::error::{Error, Result};
use crate::geometry::Frame;
use crate::model::ModelConfig;
use crate::nn::{gelu, softmax_last, Init, LayerNorm, Linear, ParamStore};

/// Seed of the fixed (non-learned) Fourier basis; shared by every decoder.
const PE_SEED: u64 = 0x00F0_0EA1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Point,
    Visual,
}

/// Prompt tokens `(T, D)` (or `(B, T, D)` for batches) with their kinds, in order.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Concatenation `self ++ other`; token order is part of the contract.
    pub fn concat(&self, other: &PromptEmbedding) -> Result<PromptEmbedding> {
        let dim = self.tokens.rank() - 2;
        let mut kinds = self.kinds.clone();
        kinds.extend(&other.kinds);
        Ok(PromptEmbedding {
            tokens: Tensor::cat(&[&self.tokens, &other.tokens], dim)?,
            kinds,
        })
    }
}

/// Wraps a visual prompt vector `(D)` or batch `(B, D)` as a single visual token.
pub fn encode_visual_prompt(v: &Tensor) -> Result<PromptEmbedding> {
    Ok(PromptEmbedding {
        tokens: v.unsqueeze(v.rank() - 1)?,
        kinds: vec![TokenKind::Visual],
    })
}

/// Fixed Gaussian Fourier features of normalised coordinates in `[0, 1]^2`.
#[derive(Debug, Clone)]
pub struct FourierEncoding {
    freqs: Vec<[f64; 2]>,
}

impl FourierEncoding {
    pub fn new(dim: usize, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PE_SEED);
        let freqs = (0..dim / 2)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [a * sigma, b * sigma]
            })
            .collect();
        Self { freqs }
    }

    pub fn encode(&self, u: f64, v: f64) -> Vec<f64> {
        let (x, y) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let angles: Vec<f64> = self
            .freqs
            .iter()
            .map(|f| std::f64::consts::TAU * (f[0] * x + f[1] * y))
            .collect();
        angles.iter().map(|a| a.sin()).chain(angles.iter().map(|a| a.cos())).collect()
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(s: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: s.linear(&format!("{name}.q"), d, d)?,
            k: s.linear(&format!("{name}.k"), d, d)?,
            v: s.linear(&format!("{name}.v"), d, d)?,
            o: s.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let d = q.dim(D::Minus1)?;
        let q = self.q.forward(q)?;
        let k = self.k.forward(k)?;
        let v = self.v.forward(v)?;
        let s = (q.matmul(&k.transpose(1, 2)?)? * (1.0 / (d as f64).sqrt()))?;
        let a = softmax_last(&s)?;
        self.o.forward(&a.matmul(&v)?)
    }
}

struct Block {
    ln_t1: LayerNorm,
    t2i: Attention,
    ln_t2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    ln_i: LayerNorm,
    i2t: Attention,
}

pub struct Decoder {
    pub store: ParamStore,
    dim: usize,
    head_channels: usize,
    patch_size: usize,
    pe: FourierEncoding,
    in_proj: Linear,
    mask_token: Tensor,
    kind_point: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    hyper1: Linear,
    hyper2: Linear,
    up: Linear,
    /// Cached grid encoding keyed by `(rows, cols, patch, height, width)`.
    grid_pe: std::sync::Mutex<Option<((usize, usize, usize, usize, usize), Tensor)>>,
}

/// Geometry of the target feature grid a batch is decoded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn of(g: &crate::features::FeatureGrid) -> Self {
        Self {
            rows: g.rows,
            cols: g.cols,
            patch_size: g.patch_size,
            height: g.orig_height,
            width: g.orig_width,
        }
    }
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let d = cfg.embed_dim;
        let ps = cfg.appearance_patch;
        let c = cfg.head_channels;
        let mut s = ParamStore::new(seed, dtype);
        let in_proj = s.linear("in_proj", d, d)?;
        let mask_token = s.param("mask_token", &[1, 1, d], Init::Normal(0.5))?;
        let kind_point = s.param("kind.point", &[d], Init::Normal(0.5))?;
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                let n = |p: &str| format!("block{i}.{p}");
                Ok(Block {
                    ln_t1: s.layer_norm(&n("ln_t1"), d)?,
                    t2i: Attention::new(&mut s, &n("t2i"), d)?,
                    ln_t2: s.layer_norm(&n("ln_t2"), d)?,
                    mlp1: s.linear(&n("mlp.0"), d, cfg.decoder_mlp_hidden)?,
                    mlp2: s.linear(&n("mlp.1"), cfg.decoder_mlp_hidden, d)?,
                    ln_i: s.layer_norm(&n("ln_i"), d)?,
                    i2t: Attention::new(&mut s, &n("i2t"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = s.layer_norm("ln_out", d)?;
        let hyper1 = s.linear("hyper.0", d, d)?;
        let hyper2 = s.linear("hyper.1", d, c)?;
        let up = s.linear("up", d, c * ps * ps)?;
        Ok(Self {
            store: s,
            dim: d,
            head_channels: c,
            patch_size: ps,
            pe: FourierEncoding::new(d, cfg.pe_sigma),
            in_proj,
            mask_token,
            kind_point,
            blocks,
            ln_out,
            hyper1,
            hyper2,
            up,
            grid_pe: std::sync::Mutex::new(None),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Positional encoding of one canonical-frame point, without the kind embedding.
    pub fn point_encoding(&self, x: f64, y: f64, canonical: (usize, usize)) -> Vec<f64> {
        self.pe.encode(x / canonical.0 as f64, y / canonical.1 as f64)
    }

    /// One token per point: Fourier encoding of the normalised position plus the
    /// learned foreground-point embedding. Result is `(T, D)`.
    pub fn encode_point_prompt(&self, p: &AnchorPrompt) -> Result<PromptEmbedding> {
        let (w, h) = p.canonical_size;
        if p.points.is_empty() {
            return Err(Error::EmptyForeground);
        }
        let mut data = Vec::with_capacity(p.points.len() * self.dim);
        for pt in &p.points {
            if pt.frame != Frame::Canonical {
                return Err(Error::Config(format!("expected a canonical point, got {}", pt.frame)));
            }
            if !pt.is_finite() || pt.x < 0.0 || pt.y < 0.0 || pt.x > w as f64 || pt.y > h as f64 {
                return Err(Error::OutOfBounds {
                    x: pt.x,
                    y: pt.y,
                    frame: "canonical",
                    width: w as f64,
                    height: h as f64,
                });
            }
            data.extend(self.point_encoding(pt.x, pt.y, (w, h)));
        }
        let pe = Tensor::from_vec(data, (p.points.len(), self.dim), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(PromptEmbedding {
            tokens: pe.broadcast_add(&self.kind_point)?,
            kinds: vec![TokenKind::Point; p.points.len()],
        })
    }

    fn grid_encoding(&self, g: GridShape) -> Result<Tensor> {
        let key = (g.rows, g.cols, g.patch_size, g.height, g.width);
        let mut cache = self.grid_pe.lock().expect("grid encoding cache poisoned");
        if let Some((k, t)) = cache.as_ref() {
            if *k == key {
                return Ok(t.clone());
            }
        }
        let mut data = Vec::with_capacity(g.rows * g.cols * self.dim);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let x = (c as f64 + 0.5) * g.patch_size as f64 / g.width as f64;
                let y = (r as f64 + 0.5) * g.patch_size as f64 / g.height as f64;
                data.extend(self.pe.encode(x, y));
            }
        }
        let t = Tensor::from_vec(data, (1, g.rows * g.cols, self.dim), &Device::Cpu)?.to_dtype(self.dtype())?;
        *cache = Some((key, t.clone()));
        Ok(t)
    }

    /// Batched decoding. `feats` is `(B, N, D)`, `tokens` is `(B, T, D)`;
    /// returns logits `(B, H, W)`.
    pub fn forward(&self, feats: &Tensor, tokens: &Tensor, g: GridShape) -> Result<Tensor> {
        if g.patch_size != self.patch_size {
            return Err(Error::dims(format!("patch size {}", self.patch_size), format!("patch size {}", g.patch_size)));
        }
        let (b, n, _) = feats.dims3()?;
        if n != g.rows * g.cols {
            return Err(Error::dims(g.rows * g.cols, n));
        }
        let pe = self.grid_encoding(g)?;
        let mut img = self.in_proj.forward(feats)?;
        let mask_token = self.mask_token.broadcast_as((b, 1, self.dim))?;
        let mut t = Tensor::cat(&[&mask_token, tokens], 1)?;
        for blk in &self.blocks {
            let keys = img.broadcast_add(&pe)?;
            let tn = blk.ln_t1.forward(&t)?;
            t = (&t + blk.t2i.forward(&tn, &keys, &img)?)?;
            let tn = blk.ln_t2.forward(&t)?;
            t = (&t + blk.mlp2.forward(&gelu(&blk.mlp1.forward(&tn)?)?)?)?;
            let qi = blk.ln_i.forward(&img.broadcast_add(&pe)?)?;
            img = (&img + blk.i2t.forward(&qi, &t, &t)?)?;
        }
        let o = self.ln_out.forward(&t.narrow(1, 0, 1)?)?;
        let hyper = self.hyper2.forward(&gelu(&self.hyper1.forward(&o)?)?)?;
        let (ps, c) = (self.patch_size, self.head_channels);
        let pix = gelu(&self.up.forward(&img)?)?.reshape((b, n * ps * ps, c))?;
        let logits = pix.matmul(&hyper.transpose(1, 2)?)?;
        let logits = logits
            .reshape((b, g.rows, g.cols, ps, ps))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((b, g.rows * ps, g.cols * ps))?;
        let logits = if g.rows * ps != g.height || g.cols * ps != g.width {
            logits.narrow(1, 0, g.height)?.narrow(2, 0, g.width)?
        } else {
            logits
        };
        Ok(logits)
    }

    /// Single-sample decoding: `feat` `(N, D)`, prompt tokens `(T, D)`; returns `(H, W)` logits.
    pub fn decode_mask(&self, feat: &Tensor, prompt: &PromptEmbedding, g: GridShape) -> Result<Tensor> {
        let out = self.forward(&feat.unsqueeze(0)?, &prompt.tokens.unsqueeze(0)?, g)?;
        Ok(out.squeeze(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2D;
    use crate::nn::to_f64_vec;

    fn prompt(points: &[(f64, f64)]) -> AnchorPrompt {
        AnchorPrompt {
            points: points.iter().map(|&(x, y)| Point2D::new(x, y, Frame::Canonical)).collect(),
            labels: vec![true; points.len()],
            canonical_size: (16, 16),
        }
    }

    #[test]
    fn point_tokens_are_deterministic_and_distinct() {
        let dec = Decoder::new(&ModelConfig::tiny(), 1, DType::F64).unwrap();
        let e = dec.encode_point_prompt(&prompt(&[(3.0, 4.0), (3.0, 4.0)])).unwrap();
        assert_eq!(e.len(), 2);
        let v = to_f64_vec(&e.tokens).unwrap();
        assert_eq!(v[..8], v[8..]);

        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(move |x| x / n)
        };
        let a = norm(dec.point_encoding(0.0, 0.0, (16, 16)));
        let b = norm(dec.point_encoding(16.0, 16.0, (16, 16)));
        let dist = a.zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.1, "{dist}");
    }

    #[test]
    fn out_of_bounds_point_is_rejected() {
        let dec = Decoder::new(&ModelConfig::tiny(), 1, DType::F64).unwrap();
        assert!(matches!(
            dec.encode_point_prompt(&prompt(&[(17.0, 2.0)])),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn visual_wrapper_and_concatenation_order() {
        let dec = Decoder::new(&ModelConfig::tiny(), 1, DType::F64).unwrap();
        let v = Tensor::arange(0.0f64, 8.0, &Device::Cpu).unwrap();
        let vis = encode_visual_prompt(&v).unwrap();
        assert_eq!(vis.kinds, vec![TokenKind::Visual]);
        assert_eq!(to_f64_vec(&vis.tokens).unwrap(), to_f64_vec(&v).unwrap());
        let pts = dec.encode_point_prompt(&prompt(&[(1.0, 1.0), (9.0, 2.0)])).unwrap();
        let fused = pts.concat(&vis).unwrap();
        assert_eq!(fused.kinds, vec![TokenKind::Point, TokenKind::Point, TokenKind::Visual]);
        let f = to_f64_vec(&fused.tokens).unwrap();
        assert_eq!(f[..16], to_f64_vec(&pts.tokens).unwrap()[..]);
        assert_eq!(f[16..], to_f64_vec(&v).unwrap()[..]);
    }

    #[test]
    fn logits_cover_the_image_and_are_deterministic() {
        let dec = Decoder::new(&ModelConfig::tiny(), 2, DType::F64).unwrap();
        let g = GridShape {
            rows: 4,
            cols: 4,
            patch_size: 4,
            height: 15,
            width: 14,
        };
        let feat = Tensor::rand(-1.0f64, 1.0, (16, 8), &Device::Cpu).unwrap();
        let p = dec.encode_point_prompt(&prompt(&[(5.0, 5.0)])).unwrap();
        let a = dec.decode_mask(&feat, &p, g).unwrap();
        assert_eq!(a.dims(), &[15, 14]);
        let b = dec.decode_mask(&feat, &p, g).unwrap();
        let (a, b) = (to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
