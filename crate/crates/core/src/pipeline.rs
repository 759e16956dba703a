//! Experts and per-pair inference.
//!
//! A [`Prepared`] pair caches everything that does not depend on learned
//! parameters (feature grids, pooled features, the anchor prompt), so training
//! and evaluation only run the matcher and decoder.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};

use crate::anchor::{generate_anchor_prompt, AnchorConfig, AnchorPrompt};
use crate::decoder::{encode_visual_prompt, Decoder, GridShape, PromptEmbedding};
use crate::error::{Error, Result};
use crate::features::{Backend, FeatureGrid};
use crate::mask::Mask;
use crate::metrics::MetricReport;
use crate::matcher::{mask_pool, pooled_prediction, VpMatcher};
use crate::model::{grids_tensor, masks_tensor, rows_tensor, ModelConfig};
use crate::nn::to_f64_vec;
use crate::synth::ViewPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertKind {
    Anchor,
    Visual,
    Fusion,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Anchor, ExpertKind::Visual, ExpertKind::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Anchor => "anchor",
            ExpertKind::Visual => "visual",
            ExpertKind::Fusion => "fusion",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(ExpertKind::Anchor),
            "visual" => Ok(ExpertKind::Visual),
            "fusion" => Ok(ExpertKind::Fusion),
            other => Err(Error::Config(format!("unknown expert `{other}`"))),
        }
    }
}

/// Parameter-independent data of one view pair.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub query_feat: FeatureGrid,
    pub target_feat: FeatureGrid,
    pub query_anchor_feat: FeatureGrid,
    pub target_anchor_feat: FeatureGrid,
    pub query_mask: Mask,
    pub target_mask: Mask,
    pub v_q: Vec<f32>,
    /// Pooled target features under the ground-truth mask, when it covers a patch.
    pub v_t: Option<Vec<f32>>,
    pub anchor: Option<AnchorPrompt>,
}

/// Fraction of a patch that must be foreground for it to count as part of a mask.
pub const POOL_THRESHOLD: f64 = 0.5;

pub fn prepare(id: impl Into<String>, pair: &ViewPair, backend: &Backend, anchor_cfg: &AnchorConfig) -> Result<Prepared> {
    let query_feat = backend.appearance.encode(&pair.query_image)?;
    let target_feat = backend.appearance.encode(&pair.target_image)?;
    let query_anchor_feat = backend.anchor.encode(&pair.query_image)?;
    let target_anchor_feat = backend.anchor.encode(&pair.target_image)?;
    let v_q = pool_or_nearest(&query_feat, &pair.query_mask)?;
    let v_t = match mask_pool(&target_feat, &pair.target_mask, POOL_THRESHOLD) {
        Ok(v) => Some(v),
        Err(Error::EmptyForeground) => None,
        Err(e) => return Err(e),
    };
    let anchor = match generate_anchor_prompt(&query_anchor_feat, &target_anchor_feat, &pair.query_mask, anchor_cfg) {
        Ok(a) => Some(a),
        Err(Error::EmptyForeground) => None,
        Err(e) => return Err(e),
    };
    Ok(Prepared {
        id: id.into(),
        query_feat,
        target_feat,
        query_anchor_feat,
        target_anchor_feat,
        query_mask: pair.query_mask.clone(),
        target_mask: pair.target_mask.clone(),
        v_q,
        v_t,
        anchor,
    })
}

/// Mask pooling that falls back to any touched patch for masks too thin to
/// fill half a patch anywhere.
fn pool_or_nearest(feat: &FeatureGrid, m: &Mask) -> Result<Vec<f32>> {
    match mask_pool(feat, m, POOL_THRESHOLD) {
        Err(Error::EmptyForeground) => mask_pool(feat, m, 1e-9),
        r => r,
    }
}

pub struct Expert {
    pub kind: ExpertKind,
    pub decoder: Decoder,
    pub matcher: Option<VpMatcher>,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

/// One expert's output on one pair.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub mask: Mask,
}

impl Expert {
    pub fn new(kind: ExpertKind, cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let decoder = Decoder::new(cfg, seed, dtype)?;
        let matcher = match kind {
            ExpertKind::Anchor => None,
            _ => Some(VpMatcher::new(cfg, seed ^ 0xA5A5_5A5A, dtype)?),
        };
        Ok(Self {
            kind,
            decoder,
            matcher,
            steps: 0,
        })
    }

    /// Visual prompt tokens `(B, 1, D)` plus the matcher output for a batch.
    pub fn visual_tokens(&self, batch: &[&Prepared]) -> Result<(Tensor, crate::matcher::MatcherOutput)> {
        let matcher = self.matcher.as_ref().ok_or(Error::TrainingFree("anchor"))?;
        let dtype = self.decoder.store.dtype();
        let first = &batch[0].query_feat;
        let feats: Vec<&FeatureGrid> = batch.iter().map(|p| &p.query_feat).collect();
        let masks: Vec<&Mask> = batch.iter().map(|p| &p.query_mask).collect();
        let v_q = rows_tensor(&batch.iter().map(|p| p.v_q.clone()).collect::<Vec<_>>(), dtype)?;
        let out = matcher.forward(&grids_tensor(&feats, dtype)?, first.rows, first.cols, &masks_tensor(&masks, dtype)?, &v_q)?;
        let d = matcher.dim();
        let (h, w) = (first.orig_height, first.orig_width);
        let logits = to_f64_vec(&out.logits)?;
        let v_hat = to_f64_vec(&out.v_hat)?;
        let mut pooled = Vec::with_capacity(batch.len());
        for (i, p) in batch.iter().enumerate() {
            let l: Vec<f32> = logits[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f32).collect();
            let vh: Vec<f32> = v_hat[i * d..(i + 1) * d].iter().map(|&v| v as f32).collect();
            pooled.push(pooled_prediction(&p.query_feat, &l, &vh, POOL_THRESHOLD)?.0);
        }
        let v_c_prime = rows_tensor(&pooled, dtype)?;
        let prompt = matcher.build_visual_prompt(&out.v_hat, &v_c_prime)?;
        Ok((encode_visual_prompt(&prompt)?.tokens, out))
    }

    /// Anchor tokens `(B, T, D)`; `T` is the smallest point count in the batch.
    pub fn anchor_tokens(&self, batch: &[&Prepared]) -> Result<Option<Tensor>> {
        let mut per = Vec::with_capacity(batch.len());
        for p in batch {
            match &p.anchor {
                Some(a) => per.push(self.decoder.encode_point_prompt(a)?.tokens),
                None => return Ok(None),
            }
        }
        let t = per.iter().map(|x| x.dim(0)).collect::<candle_core::Result<Vec<_>>>()?;
        let t = t.into_iter().min().unwrap_or(0);
        let per = per.iter().map(|x| x.narrow(0, 0, t)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Some(Tensor::stack(&per, 0)?))
    }

    /// Target logits `(B, H, W)` for a batch, plus the matcher output when the expert has one.
    pub fn forward(&self, batch: &[&Prepared]) -> Result<(Tensor, Option<crate::matcher::MatcherOutput>)> {
        let dtype = self.decoder.store.dtype();
        let feats: Vec<&FeatureGrid> = batch.iter().map(|p| &p.target_feat).collect();
        let grid = GridShape::of(feats[0]);
        let feats = grids_tensor(&feats, dtype)?;
        let (tokens, out) = match self.kind {
            ExpertKind::Anchor => {
                let t = self.anchor_tokens(batch)?.ok_or(Error::EmptyForeground)?;
                (t, None)
            }
            ExpertKind::Visual => {
                let (t, out) = self.visual_tokens(batch)?;
                (t, Some(out))
            }
            ExpertKind::Fusion => {
                let (vis, out) = self.visual_tokens(batch)?;
                let t = match self.anchor_tokens(batch)? {
                    Some(a) => Tensor::cat(&[&a, &vis], 1)?,
                    None => vis,
                };
                (t, Some(out))
            }
        };
        Ok((self.decoder.forward(&feats, &tokens, grid)?, out))
    }

    /// Prediction on one pair. An anchor expert without an anchor prompt predicts an empty mask.
    pub fn predict(&self, p: &Prepared) -> Result<Prediction> {
        let (w, h) = p.target_mask.dims();
        if self.kind == ExpertKind::Anchor && p.anchor.is_none() {
            return Ok(Prediction {
                logits: vec![-1.0; w * h],
                mask: Mask::new(w, h),
            });
        }
        let (logits, _) = self.forward(&[p])?;
        let logits: Vec<f32> = to_f64_vec(&logits)?.into_iter().map(|v| v as f32).collect();
        let mask = Mask::from_logits(w, h, &logits)?;
        Ok(Prediction { logits, mask })
    }
}

/// Decodes a mask for an arbitrary point prompt on a feature grid with a point-prompt decoder.
pub fn decode_points(decoder: &Decoder, feat: &FeatureGrid, prompt: &AnchorPrompt) -> Result<Mask> {
    let tokens: PromptEmbedding = decoder.encode_point_prompt(prompt)?;
    let f = grids_tensor(&[feat], decoder.store.dtype())?.squeeze(0)?;
    let logits = decoder.decode_mask(&f, &tokens, GridShape::of(feat))?;
    let logits: Vec<f32> = to_f64_vec(&logits)?.into_iter().map(|v| v as f32).collect();
    Mask::from_logits(feat.orig_width, feat.orig_height, &logits)
}

/// Per-pair IoU and localisation error of one expert over prepared pairs.
pub fn evaluate_expert(expert: &Expert, data: &[Prepared]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for p in data {
        let pred = expert.predict(p)?;
        report.push(p.id.clone(), &pred.mask, &p.target_mask)?;
    }
    Ok(report)
}
