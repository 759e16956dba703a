//! Anchor pipeline against the synthetic ground truth.

mod common;

use rand::Rng;
use v2lab::anchor::{
    best_matches, generate_anchor_prompt, patch_point, similarity_heatmap, stratify_points, to_canonical_coords,
    AnchorConfig,
};
use v2lab::features::{project_mask_to_grid, Backend};
use v2lab::geometry::Point2D;
use v2lab::mask::mask_centroid;
use v2lab::model::ModelConfig;
use v2lab::synth::{generate_pair, SceneConfig};

use common::*;

const PATCH: f64 = 4.0;

fn backend() -> Backend {
    ModelConfig::default().backend()
}

fn translation_only(seed: u64) -> SceneConfig {
    SceneConfig {
        rotation_range: 0.0,
        scale_range: 1.0,
        ..SceneConfig::default()
    }
    .with_seed(seed)
}

#[test]
fn anchor_lands_near_warped_centroid_on_translation_pairs() {
    let b = backend();
    let cfg = AnchorConfig::default();
    let mut hits = 0;
    for i in 0..100 {
        let pair = generate_pair(&translation_only(1000 + i)).unwrap();
        let fq = b.anchor.encode(&pair.query_image).unwrap();
        let ft = b.anchor.encode(&pair.target_image).unwrap();
        let prompt = generate_anchor_prompt(&fq, &ft, &pair.query_mask, &cfg).unwrap();
        let c = mask_centroid(&pair.query_mask).unwrap();
        let (wx, wy) = pair.transform.apply(c.x, c.y);
        let p = prompt.points[0];
        // Canonical points sit on pixel centres, half a pixel past the index.
        let d = ((p.x - 0.5 - wx).powi(2) + (p.y - 0.5 - wy).powi(2)).sqrt();
        if d <= PATCH {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100 within one patch");
}

#[test]
fn best_matches_follow_the_translation() {
    let b = backend();
    let (mut good, mut total) = (0usize, 0usize);
    for i in 0..20 {
        let pair = generate_pair(&translation_only(2000 + i)).unwrap();
        let fq = b.anchor.encode(&pair.query_image).unwrap();
        let ft = b.anchor.encode(&pair.target_image).unwrap();
        let fg = project_mask_to_grid(&pair.query_mask, &fq, 0.5).unwrap();
        let heat = similarity_heatmap(&fq, &ft).unwrap();
        let canon = (fq.orig_width, fq.orig_height);
        for m in best_matches(&heat, &fg).unwrap() {
            let q = to_canonical_coords(&[patch_point(&fq, m.query)], &fq, canon).unwrap()[0];
            let t = to_canonical_coords(&[patch_point(&ft, m.target)], &ft, canon).unwrap()[0];
            let (wx, wy) = pair.transform.apply(q.x - 0.5, q.y - 0.5);
            let d = ((t.x - 0.5 - wx).powi(2) + (t.y - 0.5 - wy).powi(2)).sqrt();
            total += 1;
            if d <= PATCH {
                good += 1;
            }
        }
    }
    assert!(good * 10 >= total * 9, "{good}/{total} matches within one patch");
}

#[test]
fn identity_pair_anchor_sits_on_the_object() {
    let b = backend();
    let cfg = AnchorConfig::default();
    for i in 0..10 {
        let pair = generate_pair(&SceneConfig::identity().with_seed(3000 + i)).unwrap();
        let fq = b.anchor.encode(&pair.query_image).unwrap();
        let ft = b.anchor.encode(&pair.target_image).unwrap();
        let prompt = generate_anchor_prompt(&fq, &ft, &pair.query_mask, &cfg).unwrap();
        let p = prompt.points[0];
        let (x, y) = ((p.x - 0.5).round() as i64, (p.y - 0.5).round() as i64);
        assert!(pair.query_mask.get_signed(x, y), "pair {i}: anchor ({x},{y}) off the mask");
        let c = mask_centroid(&pair.query_mask).unwrap();
        let d = ((p.x - 0.5 - c.x).powi(2) + (p.y - 0.5 - c.y).powi(2)).sqrt();
        assert!(d <= PATCH, "pair {i}: {d:.2} px from the centroid");
    }
}

/// Greedy scan written out directly: sort by score (ties by index), keep what is far from the kept.
fn brute_stratify(pts: &[Point2D], scores: &[f64], tau: f64) -> Vec<Point2D> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<Point2D> = Vec::new();
    for i in idx {
        let mut far = true;
        for k in &kept {
            if ((pts[i].x - k.x).powi(2) + (pts[i].y - k.y).powi(2)).sqrt() <= tau {
                far = false;
            }
        }
        if far {
            kept.push(pts[i]);
        }
    }
    kept
}

#[test]
fn stratification_matches_the_greedy_oracle() {
    let mut rng = rng(41);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let pts: Vec<Point2D> = (0..n)
            .map(|_| Point2D::pixel(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for tau in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            assert_eq!(stratify_points(&pts, &scores, tau), brute_stratify(&pts, &scores, tau));
        }
        assert_eq!(stratify_points(&pts, &scores, 0.0).len(), n);
    }
}

#[test]
fn self_heatmap_peaks_on_the_diagonal() {
    let mut rng = rng(43);
    for _ in 0..10 {
        let g = random_grid(&mut rng, 5, 5, 8);
        let h = similarity_heatmap(&g, &g).unwrap();
        for i in 0..25 {
            let row = h.row(i);
            assert!(row.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
            assert_eq!(brute_argmax(row), i);
        }
    }
}

#[test]
fn anchor_prompt_is_deterministic() {
    let b = backend();
    let pair = generate_pair(&SceneConfig::default().with_seed(77)).unwrap();
    let fq = b.anchor.encode(&pair.query_image).unwrap();
    let ft = b.anchor.encode(&pair.target_image).unwrap();
    for n_points in [1, 5, 10, 30] {
        let cfg = AnchorConfig {
            n_points,
            ..AnchorConfig::default()
        };
        let a = generate_anchor_prompt(&fq, &ft, &pair.query_mask, &cfg).unwrap();
        let b = generate_anchor_prompt(&fq, &ft, &pair.query_mask, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.points.is_empty() && a.points.len() <= n_points);
    }
}
