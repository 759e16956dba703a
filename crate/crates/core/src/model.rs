//! Architecture hyperparameters shared by the matcher and the decoder, plus
//! helpers that move feature grids and masks into batched tensors.

use candle_core::{DType, Device, Tensor};

use crate::config::{parse, KeyValue};
use crate::error::{Error, Result};
use crate::features::{Backend, FeatureGrid, DEFAULT_ENCODER_SEED};
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width; also the appearance feature dimension.
    pub embed_dim: usize,
    pub appearance_patch: usize,
    pub anchor_patch: usize,
    pub anchor_dim: usize,
    pub backend_seed: u64,
    pub matcher_layers: usize,
    pub matcher_mlp_hidden: usize,
    pub prompt_mlp_hidden: usize,
    /// Channel widths of the first two mask-encoder stages; the third is `embed_dim`.
    pub conv_widths: (usize, usize),
    pub decoder_blocks: usize,
    pub decoder_mlp_hidden: usize,
    pub head_channels: usize,
    /// Bandwidth of the random Fourier point encoding.
    pub pe_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            appearance_patch: 4,
            anchor_patch: 4,
            anchor_dim: 64,
            backend_seed: DEFAULT_ENCODER_SEED,
            matcher_layers: 2,
            matcher_mlp_hidden: 256,
            prompt_mlp_hidden: 128,
            conv_widths: (8, 16),
            decoder_blocks: 2,
            decoder_mlp_hidden: 128,
            head_channels: 8,
            pe_sigma: 1.5,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration the gradient checks run on.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            appearance_patch: 4,
            anchor_patch: 4,
            anchor_dim: 8,
            matcher_layers: 2,
            matcher_mlp_hidden: 16,
            prompt_mlp_hidden: 16,
            conv_widths: (2, 4),
            decoder_blocks: 2,
            decoder_mlp_hidden: 16,
            head_channels: 2,
            ..Self::default()
        }
    }

    pub fn backend(&self) -> Backend {
        Backend::new(
            self.anchor_patch,
            self.anchor_dim,
            self.appearance_patch,
            self.embed_dim,
            self.backend_seed,
        )
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "appearance_patch" => self.appearance_patch = parse(key, value)?,
            "anchor_patch" => self.anchor_patch = parse(key, value)?,
            "anchor_dim" => self.anchor_dim = parse(key, value)?,
            "backend_seed" => self.backend_seed = parse(key, value)?,
            "matcher_layers" => self.matcher_layers = parse(key, value)?,
            "matcher_mlp_hidden" => self.matcher_mlp_hidden = parse(key, value)?,
            "prompt_mlp_hidden" => self.prompt_mlp_hidden = parse(key, value)?,
            "conv_widths" => self.conv_widths = crate::config::parse_pair(key, value)?,
            "decoder_blocks" => self.decoder_blocks = parse(key, value)?,
            "decoder_mlp_hidden" => self.decoder_mlp_hidden = parse(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "pe_sigma" => self.pe_sigma = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("appearance_patch", self.appearance_patch.to_string()),
            ("anchor_patch", self.anchor_patch.to_string()),
            ("anchor_dim", self.anchor_dim.to_string()),
            ("backend_seed", self.backend_seed.to_string()),
            ("matcher_layers", self.matcher_layers.to_string()),
            ("matcher_mlp_hidden", self.matcher_mlp_hidden.to_string()),
            ("prompt_mlp_hidden", self.prompt_mlp_hidden.to_string()),
            ("conv_widths", format!("{},{}", self.conv_widths.0, self.conv_widths.1)),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("decoder_mlp_hidden", self.decoder_mlp_hidden.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("pe_sigma", self.pe_sigma.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("appearance_patch", self.appearance_patch),
            ("anchor_patch", self.anchor_patch),
            ("anchor_dim", self.anchor_dim),
            ("matcher_layers", self.matcher_layers),
            ("matcher_mlp_hidden", self.matcher_mlp_hidden),
            ("prompt_mlp_hidden", self.prompt_mlp_hidden),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_mlp_hidden", self.decoder_mlp_hidden),
            ("head_channels", self.head_channels),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even".into()));
        }
        if !(self.pe_sigma > 0.0) {
            return Err(Error::Config("pe_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Patch-major descriptors of several equally shaped grids as a `(B, N, D)` tensor.
pub fn grids_tensor(grids: &[&FeatureGrid], dtype: DType) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (n, d) = (first.num_patches(), first.dim);
    let mut data = Vec::with_capacity(grids.len() * n * d);
    for g in grids {
        if g.num_patches() != n || g.dim != d {
            return Err(Error::dims(format!("{n} patches x {d}"), format!("{} patches x {}", g.num_patches(), g.dim)));
        }
        data.extend(g.descriptors());
    }
    Ok(Tensor::from_vec(data, (grids.len(), n, d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Binary masks as a `(B, 1, H, W)` tensor of zeros and ones.
pub fn masks_tensor(masks: &[&Mask], dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        first.ensure_same_dims(m)?;
        data.extend(m.to_f32());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Rows of equal-length vectors as a `(B, D)` tensor.
pub fn rows_tensor(rows: &[Vec<f32>], dtype: DType) -> Result<Tensor> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::dims(d, r.len()));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(data, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.conv_widths = (3, 5);
        let mut back = ModelConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(back.set("nope", "1"), Err(Error::UnknownKey(_))));
    }
}
