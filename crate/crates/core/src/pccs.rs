//! Post-hoc expert selection by cyclic consistency.
//!
//! Each candidate target mask is mapped back to the query view with the
//! anchor matcher run in reverse; the candidate whose back-projected points sit
//! closest to the query mask wins. Nothing here has parameters.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor::{match_region, robust_center, to_canonical_coords, AnchorConfig};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::geometry::{Frame, Point2D, PointSet};
use crate::mask::Mask;
use crate::metrics::compute_iou;
use crate::pipeline::{decode_points, Prepared};
use crate::training::point_prompt;

pub const DEFAULT_K_REF: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicScore {
    pub expert_id: usize,
    /// Mean nearest-reference distance in pixels; `+inf` when nothing back-projects.
    pub mean_dist: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: usize,
    pub scores: Vec<CyclicScore>,
    /// Set when no candidate produced a finite score and the first one was taken.
    pub fallback: bool,
}

/// Everything about one pair the selectors need besides the candidates.
#[derive(Debug, Clone, Copy)]
pub struct SelectContext<'a> {
    /// Anchor-role features of the query and target views.
    pub query_feat: &'a FeatureGrid,
    pub target_feat: &'a FeatureGrid,
    pub query_mask: &'a Mask,
    pub anchor: &'a AnchorConfig,
    pub k_ref: usize,
    pub seed: u64,
}

/// Matched query-view points (pixel-index frame) of the target-view mask `m`,
/// stratified at `cfg.back_project_min_dist`.
pub fn back_project(target_feat: &FeatureGrid, query_feat: &FeatureGrid, m: &Mask, cfg: &AnchorConfig) -> Result<PointSet> {
    let reverse = AnchorConfig {
        min_dist: cfg.back_project_min_dist,
        ..cfg.clone()
    };
    let (pts, _) = match_region(target_feat, query_feat, m, &reverse)?;
    let canonical = (query_feat.orig_width, query_feat.orig_height);
    Ok(to_canonical_coords(&pts, query_feat, canonical)?
        .into_iter()
        .map(|p| Point2D::new(p.x - 0.5, p.y - 0.5, Frame::ImagePixels))
        .collect())
}

/// `k_ref` foreground pixels of `mq` drawn without replacement (all of them if fewer).
pub fn reference_points(mq: &Mask, k_ref: usize, seed: u64) -> Result<PointSet> {
    let fg: Vec<(usize, usize)> = mq.foreground().collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let idx: Vec<usize> = if fg.len() <= k_ref {
        (0..fg.len()).collect()
    } else {
        let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), fg.len(), k_ref).into_vec();
        v.sort_unstable();
        v
    };
    Ok(idx.into_iter().map(|i| Point2D::pixel(fg[i].0 as f64, fg[i].1 as f64)).collect())
}

/// Mean distance from each back-projected point to its nearest reference point.
pub fn cyclic_score(back_pts: &[Point2D], mq: &Mask, k_ref: usize, seed: u64) -> Result<f64> {
    if back_pts.is_empty() {
        return Ok(f64::INFINITY);
    }
    let refs = reference_points(mq, k_ref, seed)?;
    let total: f64 = back_pts
        .iter()
        .map(|p| refs.iter().map(|r| p.distance(r)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / back_pts.len() as f64)
}

fn score_one(id: usize, m: &Mask, ctx: &SelectContext) -> Result<CyclicScore> {
    match back_project(ctx.target_feat, ctx.query_feat, m, ctx.anchor) {
        Ok(pts) => Ok(CyclicScore {
            expert_id: id,
            mean_dist: cyclic_score(&pts, ctx.query_mask, ctx.k_ref, ctx.seed)?,
            n_points: pts.len(),
        }),
        Err(Error::EmptyForeground) => Ok(CyclicScore {
            expert_id: id,
            mean_dist: f64::INFINITY,
            n_points: 0,
        }),
        Err(e) => Err(e),
    }
}

fn pick(candidates: &[(usize, f64)], better: impl Fn(f64, f64) -> bool) -> (usize, bool) {
    let mut best: Option<(usize, f64)> = None;
    for &(id, s) in candidates {
        if !s.is_finite() {
            continue;
        }
        best = match best {
            Some((bid, bs)) if !(better(s, bs) || (s == bs && id < bid)) => Some((bid, bs)),
            _ => Some((id, s)),
        };
    }
    match best {
        Some((id, _)) => (id, false),
        None => (candidates[0].0, true),
    }
}

/// Point-level cyclic consistency: lowest mean distance wins, ties go to the lowest id.
pub fn select_expert(predictions: &[(usize, Mask)], ctx: &SelectContext) -> Result<Selection> {
    if predictions.is_empty() {
        return Err(Error::Config("no candidate predictions".into()));
    }
    let scores = predictions
        .iter()
        .map(|(id, m)| score_one(*id, m, ctx))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<(usize, f64)> = scores.iter().map(|s| (s.expert_id, s.mean_dist)).collect();
    let (selected, fallback) = pick(&flat, |a, b| a < b);
    if fallback {
        log::warn!("no candidate back-projected onto the query view; keeping expert {selected}");
    }
    Ok(Selection {
        selected,
        scores,
        fallback,
    })
}

/// Mask-level baseline: decode a query-view mask from the robust centre of
/// each back-projection with `decoder` and keep the candidate with highest IoU
/// against the query mask. `query_appearance` is the decoder's feature grid of the query view.
pub fn cycle_mask_select(
    predictions: &[(usize, Mask)],
    ctx: &SelectContext,
    decoder: &Decoder,
    query_appearance: &FeatureGrid,
) -> Result<Selection> {
    if predictions.is_empty() {
        return Err(Error::Config("no candidate predictions".into()));
    }
    let (w, h) = ctx.query_mask.dims();
    let mut flat = Vec::with_capacity(predictions.len());
    let mut scores = Vec::with_capacity(predictions.len());
    for (id, m) in predictions {
        let (iou, n) = match back_project(ctx.target_feat, ctx.query_feat, m, ctx.anchor) {
            Ok(pts) if !pts.is_empty() => {
                let c = robust_center(&pts, ctx.anchor.outlier_mad_k)?;
                let x = (c.x + 0.5).clamp(0.0, w as f64);
                let y = (c.y + 0.5).clamp(0.0, h as f64);
                let rec = decode_points(decoder, query_appearance, &point_prompt(x, y, w, h))?;
                (compute_iou(&rec, ctx.query_mask)?, pts.len())
            }
            Ok(_) | Err(Error::EmptyForeground) => (f64::NEG_INFINITY, 0),
            Err(e) => return Err(e),
        };
        flat.push((*id, iou));
        scores.push(CyclicScore {
            expert_id: *id,
            mean_dist: 1.0 - iou,
            n_points: n,
        });
    }
    let (selected, fallback) = pick(&flat, |a, b| a > b);
    if fallback {
        log::warn!("no candidate back-projected onto the query view; keeping expert {selected}");
    }
    Ok(Selection {
        selected,
        scores,
        fallback,
    })
}

/// How one candidate is chosen among several expert predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Pccs,
    CycleMask,
    /// Keep the first candidate.
    None,
}

impl fmt::Display for SelectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectMode::Pccs => "pccs",
            SelectMode::CycleMask => "cyclemask",
            SelectMode::None => "none",
        })
    }
}

impl FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pccs" => Ok(SelectMode::Pccs),
            "cyclemask" => Ok(SelectMode::CycleMask),
            "none" => Ok(SelectMode::None),
            other => Err(Error::Config(format!("unknown selector `{other}`"))),
        }
    }
}

/// Runs `mode` on the candidates of one prepared pair. `point_decoder` is only
/// used by the cycle-mask baseline.
pub fn select_for(
    p: &Prepared,
    predictions: &[(usize, Mask)],
    mode: SelectMode,
    anchor: &AnchorConfig,
    point_decoder: &Decoder,
    seed: u64,
) -> Result<Selection> {
    let ctx = SelectContext {
        query_feat: &p.query_anchor_feat,
        target_feat: &p.target_anchor_feat,
        query_mask: &p.query_mask,
        anchor,
        k_ref: DEFAULT_K_REF,
        seed,
    };
    match mode {
        SelectMode::Pccs => select_expert(predictions, &ctx),
        SelectMode::CycleMask => cycle_mask_select(predictions, &ctx, point_decoder, &p.query_feat),
        SelectMode::None => {
            let first = predictions
                .first()
                .ok_or_else(|| Error::Config("no candidate predictions".into()))?;
            Ok(Selection {
                selected: first.0,
                scores: Vec::new(),
                fallback: false,
            })
        }
    }
}
