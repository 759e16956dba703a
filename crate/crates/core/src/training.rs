//! Training loops: point-prompt decoder pre-training and Visual / Fusion expert training.

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::AnchorPrompt;
use crate::config::{parse, KeyValue};
use crate::decoder::{Decoder, GridShape};
use crate::error::{Error, Result};
use crate::features::{Backend, FeatureGrid};
use crate::geometry::{Frame, Point2D};
use crate::losses::{combine, contrastive_loss, mask_loss, LossParts, LossWeights};
use crate::mask::Mask;
use crate::model::{grids_tensor, masks_tensor, rows_tensor, ModelConfig};
use crate::optim::{accumulate, clip_grad_norm, collect_grads, lr_at_step, scale_grads, AdamW, AdamWConfig};
use crate::metrics::compute_iou;
use crate::pipeline::{decode_points, Expert, ExpertKind, Prepared};
use crate::synth::{generate_pair, pair_seed, SceneConfig, ViewPair};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    /// Upper bound on optimizer steps; 0 means no bound beyond `epochs`.
    pub max_steps: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            epochs: 24,
            batch_size: 8,
            grad_accum: 1,
            warmup_ratio: 0.05,
            max_steps: 0,
            seed: 0,
            loss: LossWeights::default(),
            pretrain_steps: 5000,
            pretrain_lr: 1e-3,
            pretrain_batch: 8,
        }
    }
}

impl TrainConfig {
    /// Settings for short CPU runs on the synthetic benchmark: a larger learning
    /// rate and a contrastive warm-up scaled to the much shorter schedule.
    pub fn desk() -> Self {
        let mut cfg = Self {
            lr: 1e-3,
            ..Self::default()
        };
        cfg.loss.warmup_contrastive_steps = 150;
        cfg
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size * self.grad_accum).max(1);
        let steps = per_epoch * self.epochs;
        if self.max_steps > 0 {
            steps.min(self.max_steps)
        } else {
            steps
        }
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            _ => {
                if !self.loss.set_key(key, value)? {
                    return Err(Error::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_accum", self.grad_accum.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
        ];
        v.extend(self.loss.entries());
        v
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes and grad_accum must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,lr,loss_total,loss_v,loss_s,loss_m,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{},{},{},{},{}\n",
                r.step, r.lr, r.loss.total, r.loss.v, r.loss.s, r.loss.m, r.grad_norm
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss.total)
    }
}

fn all_vars(expert: &Expert) -> Vec<Var> {
    let mut v: Vec<Var> = expert.decoder.store.vars().map(|(_, v)| v.clone()).collect();
    if let Some(m) = &expert.matcher {
        v.extend(m.store.vars().map(|(_, v)| v.clone()));
    }
    v
}

fn check_finite(parts: &LossParts, step: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "training loss".into(),
            step: Some(step),
        })
    }
}

/// One single-view training example for the point decoder.
struct PointSample {
    feat: FeatureGrid,
    mask: Mask,
    point: (f64, f64),
}

fn point_samples(scene: &SceneConfig, backend: &Backend, seed: u64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PointSample>> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        let pair = generate_pair(&scene.with_seed(pair_seed(seed, i)))?;
        i += 1;
        for (img, mask) in [(&pair.query_image, &pair.query_mask), (&pair.target_image, &pair.target_mask)] {
            if out.len() == n || mask.is_empty() {
                continue;
            }
            let fg: Vec<(usize, usize)> = mask.foreground().collect();
            let (x, y) = fg[rng.random_range(0..fg.len())];
            out.push(PointSample {
                feat: backend.appearance.encode(img)?,
                mask: mask.clone(),
                point: (x as f64 + 0.5, y as f64 + 0.5),
            });
        }
    }
    Ok(out)
}

/// Single-point prompt at pixel position `(x, y)` of a `w x h` image.
pub fn point_prompt(x: f64, y: f64, w: usize, h: usize) -> AnchorPrompt {
    AnchorPrompt {
        points: vec![Point2D::new(x, y, Frame::Canonical)],
        labels: vec![true],
        canonical_size: (w, h),
    }
}

/// Trains a point-prompt decoder on freshly generated single views, each
/// prompted with one uniformly drawn foreground pixel of its object.
pub fn pretrain_point_decoder(
    model: &ModelConfig,
    scene: &SceneConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<(Decoder, TrainLog)> {
    let decoder = Decoder::new(model, cfg.seed ^ 0xDEC0_DE00, DType::F32)?;
    let backend = model.backend();
    let vars: Vec<Var> = decoder.store.vars().map(|(_, v)| v.clone()).collect();
    let mut opt = AdamW::new(vars.clone(), cfg.adamw())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
    let total = cfg.pretrain_steps;
    let mut log = TrainLog::default();
    let data_seed = scene.seed ^ 0x5151_0000_0000;
    let mut drawn = 0usize;
    for step in 0..total {
        let mut acc: Vec<Option<Tensor>> = vec![None; vars.len()];
        let mut parts = LossParts::default();
        for _ in 0..cfg.grad_accum {
            let samples = point_samples(scene, &backend, pair_seed(data_seed, drawn), cfg.pretrain_batch, &mut rng)?;
            drawn += 1;
            let grids: Vec<&FeatureGrid> = samples.iter().map(|s| &s.feat).collect();
            let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
            let g = GridShape::of(grids[0]);
            let tokens = samples
                .iter()
                .map(|s| {
                    let p = point_prompt(s.point.0, s.point.1, g.width, g.height);
                    Ok(decoder.encode_point_prompt(&p)?.tokens)
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = decoder.forward(&grids_tensor(&grids, DType::F32)?, &Tensor::stack(&tokens, 0)?, g)?;
            let gt = masks_tensor(&masks, DType::F32)?.squeeze(1)?;
            let l_m = mask_loss(&logits, &gt, &cfg.loss)?;
            let (loss, p) = combine(&l_m.zeros_like()?, &l_m.zeros_like()?, &l_m, &unit_mask_weights(), step)?;
            check_finite(&p, step)?;
            parts.total += p.total / cfg.grad_accum as f64;
            parts.m += p.m / cfg.grad_accum as f64;
            accumulate(&mut acc, collect_grads(&loss.backward()?, &vars))?;
        }
        scale_grads(&mut acc, 1.0 / cfg.grad_accum as f64)?;
        let grad_norm = clip_grad_norm(&mut acc, cfg.grad_clip_norm)?;
        let lr = lr_at_step(step, total, cfg.pretrain_lr, cfg.warmup_ratio);
        opt.step(&acc, lr)?;
        let row = LogRow {
            step,
            lr,
            loss: parts,
            grad_norm,
        };
        on_step(&row);
        log.rows.push(row);
    }
    Ok((decoder, log))
}

fn unit_mask_weights() -> LossWeights {
    LossWeights {
        lambda_v: 0.0,
        lambda_s: 0.0,
        lambda_m: 1.0,
        warmup_contrastive_steps: 0,
        ..LossWeights::default()
    }
}

/// Mean IoU of a point-prompt decoder on both views of `pairs`, each view
/// prompted with one seeded random foreground pixel.
pub fn point_prompt_iou(decoder: &Decoder, backend: &Backend, pairs: &[ViewPair], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for pair in pairs {
        for (img, mask) in [(&pair.query_image, &pair.query_mask), (&pair.target_image, &pair.target_mask)] {
            if mask.is_empty() {
                continue;
            }
            let fg: Vec<(usize, usize)> = mask.foreground().collect();
            let (x, y) = fg[rng.random_range(0..fg.len())];
            let (w, h) = mask.dims();
            let feat = backend.appearance.encode(img)?;
            let pred = decode_points(decoder, &feat, &point_prompt(x as f64 + 0.5, y as f64 + 0.5, w, h))?;
            total += compute_iou(&pred, mask)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / n as f64)
}

/// Samples usable for expert training: a pooled target feature is required,
/// and Fusion additionally needs an anchor prompt.
pub fn trainable<'a>(kind: ExpertKind, data: &'a [Prepared]) -> Vec<&'a Prepared> {
    data.iter()
        .filter(|p| p.v_t.is_some() && (kind != ExpertKind::Fusion || p.anchor.is_some()))
        .collect()
}

/// Total training loss of a learnable expert on one batch. Every sample needs `v_t`.
pub fn batch_loss(expert: &Expert, batch: &[&Prepared], weights: &LossWeights, step: usize) -> Result<(Tensor, LossParts)> {
    let dtype = expert.decoder.store.dtype();
    let (logits, out) = expert.forward(batch)?;
    let out = out.ok_or(Error::TrainingFree("anchor"))?;
    let masks: Vec<&Mask> = batch.iter().map(|p| &p.target_mask).collect();
    let gt = masks_tensor(&masks, dtype)?.squeeze(1)?;
    let v_t = batch
        .iter()
        .map(|p| p.v_t.clone().ok_or(Error::EmptyForeground))
        .collect::<Result<Vec<_>>>()?;
    let l_v = contrastive_loss(&out.v_hat, &rows_tensor(&v_t, dtype)?, weights.temperature)?;
    let l_s = mask_loss(&out.logits, &gt, weights)?;
    let l_m = mask_loss(&logits, &gt, weights)?;
    combine(&l_v, &l_s, &l_m, weights, step)
}

/// Trains a Visual or Fusion expert in place, continuing from `expert.steps`.
/// The learning-rate schedule spans `cfg.total_steps(data.len())` steps.
pub fn train_expert(
    expert: &mut Expert,
    data: &[Prepared],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    if expert.kind == ExpertKind::Anchor {
        return Err(Error::TrainingFree("anchor"));
    }
    cfg.validate()?;
    let usable = trainable(expert.kind, data);
    if usable.is_empty() {
        return Err(Error::Config("no usable training pairs".into()));
    }
    let vars = all_vars(expert);
    let mut opt = AdamW::new(vars.clone(), cfg.adamw())?;
    let total = cfg.total_steps(usable.len());
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = u64::MAX;
    for step in expert.steps..total {
        // Each epoch reshuffles with its own seeded stream, so resuming reproduces the order.
        let e = ((step * per_step) / usable.len()) as u64;
        if e != epoch {
            epoch = e;
            order = (0..usable.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, e as usize)));
            cursor = (step * per_step) % usable.len();
        }
        let mut acc: Vec<Option<Tensor>> = vec![None; vars.len()];
        let mut parts = LossParts::default();
        for _ in 0..cfg.grad_accum {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                batch.push(usable[order[cursor % order.len()]]);
                cursor += 1;
            }
            let (loss, p) = batch_loss(expert, &batch, &cfg.loss, step)?;
            check_finite(&p, step)?;
            let k = cfg.grad_accum as f64;
            parts.total += p.total / k;
            parts.v += p.v / k;
            parts.s += p.s / k;
            parts.m += p.m / k;
            accumulate(&mut acc, collect_grads(&loss.backward()?, &vars))?;
        }
        scale_grads(&mut acc, 1.0 / cfg.grad_accum as f64)?;
        let grad_norm = clip_grad_norm(&mut acc, cfg.grad_clip_norm)?;
        let lr = lr_at_step(step, total, cfg.lr, cfg.warmup_ratio);
        opt.step(&acc, lr)?;
        expert.steps = step + 1;
        let row = LogRow {
            step,
            lr,
            loss: parts,
            grad_norm,
        };
        on_step(&row);
        log.rows.push(row);
    }
    Ok(log)
}

/// Anchor, Visual and Fusion experts; the learnable ones start from the
/// pretrained point decoder but own independent copies of it.
pub fn build_experts(model: &ModelConfig, point_decoder: &Decoder, seed: u64) -> Result<Vec<Expert>> {
    ExpertKind::ALL
        .iter()
        .map(|&kind| {
            let e = Expert::new(kind, model, seed.wrapping_add(kind.tag() as u64), DType::F32)?;
            e.decoder.store.copy_from(&point_decoder.store)?;
            Ok(e)
        })
        .collect()
}
