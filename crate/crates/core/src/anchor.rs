//! Geometry-aware anchor prompts.
//!
//! The query mask selects foreground patches; each is matched to its most
//! similar target patch by cosine similarity, the matched target points are
//! thinned by greedy minimum-distance stratification, collapsed to a robust
//! centre (or truncated to the best `n_points`) and mapped into the canonical
//! coordinate frame consumed by the prompt encoder. Nothing here is learned.

use crate::config::{parse, parse_pair, KeyValue};
use crate::error::{Error, Result};
use crate::features::{project_mask_to_grid, FeatureGrid};
use crate::geometry::{Frame, Point2D, PointSet};
use crate::mask::Mask;

/// Dense cosine-similarity matrix between query patches (rows) and target patches (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One query patch paired with its best target patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query: usize,
    pub target: usize,
    pub score: f64,
}

pub type MatchSet = Vec<Match>;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// Minimum pairwise distance between kept points, in patch units.
    pub min_dist: f64,
    /// Minimum distance used when a predicted mask is matched back to the query
    /// view for selection. Below one patch every matched point is kept.
    pub back_project_min_dist: f64,
    pub n_points: usize,
    pub outlier_mad_k: f64,
    pub foreground_threshold: f64,
    /// Canonical frame size `(width, height)`; `None` means the original image size.
    pub canonical_size: Option<(usize, usize)>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            min_dist: 2.0,
            back_project_min_dist: 0.5,
            n_points: 1,
            outlier_mad_k: 3.0,
            foreground_threshold: 0.5,
            canonical_size: None,
        }
    }
}

impl KeyValue for AnchorConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "min_dist" => self.min_dist = parse(key, value)?,
            "back_project_min_dist" => self.back_project_min_dist = parse(key, value)?,
            "n_points" => self.n_points = parse(key, value)?,
            "outlier_mad_k" => self.outlier_mad_k = parse(key, value)?,
            "foreground_threshold" => self.foreground_threshold = parse(key, value)?,
            "canonical_size" => {
                self.canonical_size = match value {
                    "none" => None,
                    v => Some(parse_pair(key, v)?),
                }
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("min_dist", self.min_dist.to_string()),
            ("back_project_min_dist", self.back_project_min_dist.to_string()),
            ("n_points", self.n_points.to_string()),
            ("outlier_mad_k", self.outlier_mad_k.to_string()),
            ("foreground_threshold", self.foreground_threshold.to_string()),
            (
                "canonical_size",
                self.canonical_size.map_or("none".to_string(), |(w, h)| format!("{w},{h}")),
            ),
        ]
    }

    fn validate(&self) -> Result<()> {
        AnchorConfig::validate(self)
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_dist >= 0.0) {
            return Err(Error::Config("min_dist must be non-negative".into()));
        }
        if !(self.back_project_min_dist >= 0.0) {
            return Err(Error::Config("back_project_min_dist must be non-negative".into()));
        }
        if self.n_points == 0 {
            return Err(Error::Config("n_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Coordinate prompt in the canonical frame; every point is a foreground click.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrompt {
    pub points: PointSet,
    pub labels: Vec<bool>,
    pub canonical_size: (usize, usize),
}

fn norms(grid: &FeatureGrid, which: &'static str) -> Result<Vec<f64>> {
    let n = grid.num_patches();
    let mut sq = vec![0.0f64; n];
    for c in 0..grid.dim {
        for (p, s) in sq.iter_mut().enumerate() {
            let v = grid.value(c, p) as f64;
            *s += v * v;
        }
    }
    sq.into_iter()
        .enumerate()
        .map(|(p, s)| {
            if s > 0.0 && s.is_finite() {
                Ok(s.sqrt())
            } else {
                Err(Error::ZeroNormDescriptor { grid: which, patch: p })
            }
        })
        .collect()
}

/// `H[i][j] = <q_i, t_j> / (|q_i| |t_j|)` over flattened patch indices.
pub fn similarity_heatmap(fq: &FeatureGrid, ft: &FeatureGrid) -> Result<Heatmap> {
    if fq.dim != ft.dim {
        return Err(Error::dims(format!("dim {}", fq.dim), format!("dim {}", ft.dim)));
    }
    let nq = norms(fq, "query")?;
    let nt = norms(ft, "target")?;
    let dq = fq.descriptors();
    let dt = ft.descriptors();
    let (rows, cols, dim) = (fq.num_patches(), ft.num_patches(), fq.dim);
    let mut data = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let qi = &dq[i * dim..(i + 1) * dim];
        for j in 0..cols {
            let tj = &dt[j * dim..(j + 1) * dim];
            let dot: f64 = qi.iter().zip(tj).map(|(&a, &b)| a as f64 * b as f64).sum();
            data[i * cols + j] = (dot / (nq[i] * nt[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(Heatmap { rows, cols, data })
}

/// For each foreground query patch, the arg-max target patch (smallest index on ties).
pub fn best_matches(h: &Heatmap, foreground: &[usize]) -> Result<MatchSet> {
    if foreground.is_empty() {
        return Err(Error::EmptyForeground);
    }
    foreground
        .iter()
        .map(|&i| {
            if i >= h.rows {
                return Err(Error::dims(format!("query index < {}", h.rows), i));
            }
            let row = h.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            Ok(Match {
                query: i,
                target: best,
                score: row[best],
            })
        })
        .collect()
}

/// Indices of the points kept by greedy stratification, in keep order.
pub fn stratify_indices(pts: &[Point2D], scores: &[f64], min_dist: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| pts[i].distance(&pts[k]) > min_dist) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy scan in descending score order keeping points farther than
/// `min_dist` from everything already kept.
pub fn stratify_points(pts: &[Point2D], scores: &[f64], min_dist: f64) -> PointSet {
    stratify_indices(pts, scores, min_dist)
        .into_iter()
        .map(|i| pts[i])
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn median_and_mad(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let m = median(&values);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    dev.sort_by(f64::total_cmp);
    (m, median(&dev))
}

/// Median/MAD outlier rejection on each axis, then the centroid of survivors.
///
/// An axis whose MAD is zero keeps only points lying exactly on the median.
/// If nothing survives, the per-axis median point is returned.
pub fn robust_center(pts: &[Point2D], mad_k: f64) -> Result<Point2D> {
    let frame = pts.first().ok_or(Error::EmptyForeground)?.frame;
    let (mx, madx) = median_and_mad(pts.iter().map(|p| p.x).collect());
    let (my, mady) = median_and_mad(pts.iter().map(|p| p.y).collect());
    let keep = |v: f64, m: f64, mad: f64| {
        if mad == 0.0 {
            v == m
        } else {
            (v - m).abs() <= mad_k * mad
        }
    };
    let mut survivors: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| keep(p.x, mx, madx) && keep(p.y, my, mady))
        .map(|p| (p.x, p.y))
        .collect();
    if survivors.is_empty() {
        return Ok(Point2D::new(mx, my, frame));
    }
    // Sorting makes the floating-point sum independent of input order.
    survivors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = survivors.len() as f64;
    let sx: f64 = survivors.iter().map(|p| p.0).sum();
    let sy: f64 = survivors.iter().map(|p| p.1).sum();
    Ok(Point2D::new(sx / n, sy / n, frame))
}

/// Patch-grid point `(x = col, y = row)` to the pixel centre of that patch, rescaled
/// to a canonical frame of `canonical = (width, height)`.
pub fn to_canonical_coords(pts: &[Point2D], grid: &FeatureGrid, canonical: (usize, usize)) -> Result<PointSet> {
    let sx = canonical.0 as f64 / grid.orig_width as f64;
    let sy = canonical.1 as f64 / grid.orig_height as f64;
    let ps = grid.patch_size as f64;
    pts.iter()
        .map(|p| {
            if p.frame != Frame::PatchGrid {
                return Err(Error::Config(format!("expected a patch-grid point, got {}", p.frame)));
            }
            let max_x = (grid.cols - 1) as f64;
            let max_y = (grid.rows - 1) as f64;
            if !p.is_finite() || p.x < 0.0 || p.y < 0.0 || p.x > max_x || p.y > max_y {
                return Err(Error::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    frame: "patch-grid",
                    width: grid.cols as f64,
                    height: grid.rows as f64,
                });
            }
            Ok(Point2D::new(
                (p.x + 0.5) * ps * sx,
                (p.y + 0.5) * ps * sy,
                Frame::Canonical,
            ))
        })
        .collect()
}

/// Patch-grid coordinates of a flattened patch index.
pub fn patch_point(grid: &FeatureGrid, patch: usize) -> Point2D {
    let (r, c) = grid.patch_coords(patch);
    Point2D::new(c as f64, r as f64, Frame::PatchGrid)
}

/// Best matches of every foreground patch of `mask`, as points in the
/// *destination* grid (patch-grid frame) with their scores.
///
/// `src` is the view carrying `mask`; `dst` is the view receiving the points.
pub fn matched_points(
    src: &FeatureGrid,
    dst: &FeatureGrid,
    mask: &Mask,
    cfg: &AnchorConfig,
) -> Result<(PointSet, Vec<f64>)> {
    cfg.validate()?;
    let foreground = project_mask_to_grid(mask, src, cfg.foreground_threshold)?;
    if foreground.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let heat = similarity_heatmap(src, dst)?;
    let matches = best_matches(&heat, &foreground)?;
    Ok((
        matches.iter().map(|m| patch_point(dst, m.target)).collect(),
        matches.iter().map(|m| m.score).collect(),
    ))
}

/// [`matched_points`] after stratification, in keep order.
pub fn match_region(
    src: &FeatureGrid,
    dst: &FeatureGrid,
    mask: &Mask,
    cfg: &AnchorConfig,
) -> Result<(PointSet, Vec<f64>)> {
    let (pts, scores) = matched_points(src, dst, mask, cfg)?;
    let kept = stratify_indices(&pts, &scores, cfg.min_dist);
    Ok((
        kept.iter().map(|&i| pts[i]).collect(),
        kept.iter().map(|&i| scores[i]).collect(),
    ))
}

/// Full anchor pipeline from query features/mask to a canonical-frame prompt for the target view.
///
/// A single point is the robust centre of all matches; the stratified subset is
/// too sparse to centre reliably. Several points are the first stratified ones.
pub fn generate_anchor_prompt(
    fq: &FeatureGrid,
    ft: &FeatureGrid,
    mq: &Mask,
    cfg: &AnchorConfig,
) -> Result<AnchorPrompt> {
    let chosen = if cfg.n_points == 1 {
        let (all, _) = matched_points(fq, ft, mq, cfg)?;
        vec![robust_center(&all, cfg.outlier_mad_k)?]
    } else {
        let (stratified, _) = match_region(fq, ft, mq, cfg)?;
        stratified.into_iter().take(cfg.n_points).collect()
    };
    let canonical = cfg.canonical_size.unwrap_or((ft.orig_width, ft.orig_height));
    let points = to_canonical_coords(&chosen, ft, canonical)?;
    Ok(AnchorPrompt {
        labels: vec![true; points.len()],
        points,
        canonical_size: canonical,
    })
}

/// Maps canonical-frame points back to pixel coordinates of an `orig` sized image.
pub fn canonical_to_pixels(pts: &[Point2D], canonical: (usize, usize), orig: (usize, usize)) -> PointSet {
    let sx = orig.0 as f64 / canonical.0 as f64;
    let sy = orig.1 as f64 / canonical.1 as f64;
    pts.iter()
        .map(|p| Point2D::pixel(p.x * sx, p.y * sy))
        .collect()
}
