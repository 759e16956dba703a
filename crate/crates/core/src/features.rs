//! Patch-level feature grids and the deterministic synthetic encoder.
//!
//! Descriptors are content-based: a patch's descriptor depends only on the
//! pixels in and around it, never on its position, so identical content
//! anywhere in either view maps to identical descriptors.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::Mask;

pub const FEATURE_MAGIC: &[u8; 4] = b"V2FG";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Seed of the shared projection used by [`encode_patches`].
pub const DEFAULT_ENCODER_SEED: u64 = 0x5EED_F00D;
pub const DEFAULT_FEATURE_DIM: usize = 64;

/// `dim × rows × cols` feature tensor for one view, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub orig_height: usize,
    pub orig_width: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn value(&self, channel: usize, patch: usize) -> f32 {
        self.data[channel * self.num_patches() + patch]
    }

    pub fn descriptor(&self, patch: usize) -> Vec<f32> {
        (0..self.dim).map(|c| self.value(c, patch)).collect()
    }

    /// Patch-major copy: `num_patches × dim`.
    pub fn descriptors(&self) -> Vec<f32> {
        let n = self.num_patches();
        let mut out = vec![0.0; n * self.dim];
        for c in 0..self.dim {
            for p in 0..n {
                out[p * self.dim + c] = self.data[c * n + p];
            }
        }
        out
    }

    /// `(row, col)` of a flattened patch index.
    pub fn patch_coords(&self, patch: usize) -> (usize, usize) {
        (patch / self.cols, patch % self.cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.dim * self.rows * self.cols {
            return Err(Error::dims(self.dim * self.rows * self.cols, self.data.len()));
        }
        if self.rows * self.patch_size < self.orig_height || self.cols * self.patch_size < self.orig_width {
            return Err(Error::Config("patch grid does not cover the image".into()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite feature value at index {i}")));
        }
        Ok(())
    }
}

/// Neighbourhood descriptor: a `window x window` lattice of samples spaced
/// `stride` pixels apart around each patch centre, read from a Gaussian-blurred
/// copy of the image. The samples have their mean colour removed and are
/// scaled to unit length; the mean colour times `colour_weight` is appended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Context {
    pub window: usize,
    pub stride: f64,
    pub sigma: f64,
    pub colour_weight: f64,
}

impl Context {
    /// Default for the matching role: a 12 px neighbourhood on 4 px patches.
    pub const MATCHING: Context = Context {
        window: 6,
        stride: 2.0,
        sigma: 1.0,
        colour_weight: 2.0,
    };
}

/// Fixed random projection of raw patch pixels (or a [`Context`] window)
/// followed by L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub patch_size: usize,
    pub dim: usize,
    pub channels: usize,
    pub seed: u64,
    /// `None` projects the raw patch pixels.
    pub context: Option<Context>,
    projection: Vec<f32>,
}

impl PatchEncoder {
    pub fn new(patch_size: usize, dim: usize, channels: usize, seed: u64) -> Self {
        Self::build(patch_size, dim, channels, seed, None)
    }

    pub fn with_context(patch_size: usize, dim: usize, channels: usize, seed: u64, context: Context) -> Self {
        Self::build(patch_size, dim, channels, seed, Some(context))
    }

    fn build(patch_size: usize, dim: usize, channels: usize, seed: u64, context: Option<Context>) -> Self {
        let input = match context {
            None => patch_size * patch_size * channels,
            Some(c) => (c.window * c.window + 1) * channels,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((patch_size as u64) << 32) ^ ((dim as u64) << 16) ^ channels as u64);
        let projection = (0..dim * input)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            patch_size,
            dim,
            channels,
            seed,
            context,
            projection,
        }
    }

    fn input_len(&self) -> usize {
        self.projection.len() / self.dim
    }

    /// Fills `raw` with the raw pixels of patch `(r, c)`, zero-padded at the border.
    fn raw_patch(&self, image: &Image, r: usize, c: usize, raw: &mut [f64]) {
        let ps = self.patch_size;
        raw.iter_mut().for_each(|v| *v = 0.0);
        for dy in 0..ps {
            let y = r * ps + dy;
            if y >= image.height {
                break;
            }
            for dx in 0..ps {
                let x = c * ps + dx;
                if x >= image.width {
                    break;
                }
                for ch in 0..self.channels {
                    raw[(dy * ps + dx) * self.channels + ch] = image.at(x, y, ch) as f64;
                }
            }
        }
    }

    fn context_patch(&self, blurred: &Image, ctx: &Context, r: usize, c: usize, raw: &mut [f64]) {
        let ps = self.patch_size as f64;
        let ch = self.channels;
        let cx = c as f64 * ps + ps / 2.0 - 0.5;
        let cy = r as f64 * ps + ps / 2.0 - 0.5;
        let half = (ctx.window - 1) as f64 / 2.0;
        let max_x = (blurred.width - 1) as f64;
        let max_y = (blurred.height - 1) as f64;
        let n = ctx.window * ctx.window;
        let mut mean = vec![0.0; ch];
        for j in 0..ctx.window {
            let y = (cy + (j as f64 - half) * ctx.stride).round().clamp(0.0, max_y) as usize;
            for i in 0..ctx.window {
                let x = (cx + (i as f64 - half) * ctx.stride).round().clamp(0.0, max_x) as usize;
                for k in 0..ch {
                    let v = blurred.at(x, y, k) as f64;
                    raw[(j * ctx.window + i) * ch + k] = v;
                    mean[k] += v / n as f64;
                }
            }
        }
        let samples = &mut raw[..n * ch];
        for (idx, v) in samples.iter_mut().enumerate() {
            *v -= mean[idx % ch];
        }
        let norm = samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            samples.iter_mut().for_each(|v| *v /= norm);
        }
        for k in 0..ch {
            raw[n * ch + k] = mean[k] * ctx.colour_weight;
        }
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid> {
        let ps = self.patch_size;
        if image.width < ps || image.height < ps || ps == 0 {
            return Err(Error::ImageTooSmall {
                width: image.width,
                height: image.height,
                patch_size: ps,
            });
        }
        if image.channels != self.channels {
            return Err(Error::dims(format!("{} channels", self.channels), format!("{} channels", image.channels)));
        }
        let rows = image.height.div_ceil(ps);
        let cols = image.width.div_ceil(ps);
        let n = rows * cols;
        let input = self.input_len();
        let blurred = self.context.map(|ctx| gaussian_blur(image, ctx.sigma));
        let mut data = vec![0.0f32; self.dim * n];
        let mut raw = vec![0.0f64; input];
        let mut desc = vec![0.0f64; self.dim];
        for r in 0..rows {
            for c in 0..cols {
                match (&self.context, &blurred) {
                    (Some(ctx), Some(b)) => self.context_patch(b, ctx, r, c, &mut raw),
                    _ => self.raw_patch(image, r, c, &mut raw),
                }
                for (k, d) in desc.iter_mut().enumerate() {
                    let row = &self.projection[k * input..(k + 1) * input];
                    *d = row.iter().zip(&raw).map(|(&w, &v)| w as f64 * v).sum();
                }
                let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
                let patch = r * cols + c;
                if norm > 1e-12 {
                    for (k, d) in desc.iter().enumerate() {
                        data[k * n + patch] = (d / norm) as f32;
                    }
                } else {
                    // An all-black patch has no direction; pin it to the first axis.
                    data[patch] = 1.0;
                }
            }
        }
        Ok(FeatureGrid {
            dim: self.dim,
            rows,
            cols,
            patch_size: ps,
            orig_height: image.height,
            orig_width: image.width,
            data,
        })
    }
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` copies the image.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        let (w, h) = (src.width as i64, src.height as i64);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..src.channels {
                    let mut acc = 0.0;
                    for (k, wgt) in kernel.iter().enumerate() {
                        let o = k as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += wgt * src.at(sx as usize, sy as usize, ch) as f64;
                    }
                    out.pixel_mut(x as usize, y as usize)[ch] = acc as f32;
                }
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

/// Encodes with the shared default projection (`DEFAULT_FEATURE_DIM` channels).
pub fn encode_patches(image: &Image, patch_size: usize) -> Result<FeatureGrid> {
    PatchEncoder::new(patch_size, DEFAULT_FEATURE_DIM, image.channels, DEFAULT_ENCODER_SEED).encode(image)
}

/// Encoders for the two feature roles: geometric matching and appearance/decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Backend {
    pub anchor: PatchEncoder,
    pub appearance: PatchEncoder,
}

impl Backend {
    pub fn new(anchor_patch: usize, anchor_dim: usize, appearance_patch: usize, appearance_dim: usize, seed: u64) -> Self {
        Self {
            anchor: PatchEncoder::with_context(anchor_patch, anchor_dim, 3, seed, Context::MATCHING),
            appearance: PatchEncoder::new(appearance_patch, appearance_dim, 3, seed.wrapping_add(1)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.anchor.seed
    }
}

/// Indices of patches whose foreground-pixel fraction is at least `threshold`.
pub fn project_mask_to_grid(mask: &Mask, grid: &FeatureGrid, threshold: f64) -> Result<Vec<usize>> {
    if mask.width() != grid.orig_width || mask.height() != grid.orig_height {
        return Err(Error::dims(
            format!("{}x{}", grid.orig_width, grid.orig_height),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let ps = grid.patch_size;
    let mut out = Vec::new();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (y0, y1) = (r * ps, ((r + 1) * ps).min(grid.orig_height));
            let (x0, x1) = (c * ps, ((c + 1) * ps).min(grid.orig_width));
            let total = (y1 - y0) * (x1 - x0);
            let fg = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| mask.get(x, y))
                .count();
            if fg > 0 && fg as f64 >= threshold * total as f64 {
                out.push(r * grid.cols + c);
            }
        }
    }
    Ok(out)
}

pub fn save_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_grid(grid)?).map_err(|e| Error::io(path, e))
}

pub fn load_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_grid(&bytes)
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION as usize,
        grid.dim,
        grid.rows,
        grid.cols,
        grid.patch_size,
        grid.orig_height,
        grid.orig_width,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected V2FG"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = field(0);
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let [dim, rows, cols, patch_size, orig_height, orig_width] =
        std::array::from_fn(|i| field(i + 1) as usize);
    let expected = 4 * dim * rows * cols;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            bytes.len(),
            format!("payload length {} does not match header ({expected} bytes)", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = FeatureGrid {
        dim,
        rows,
        cols,
        patch_size,
        orig_height,
        orig_width,
        data,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(w: usize, h: usize, seed: u32) -> Image {
        let mut img = Image::new(w, h, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            let k = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97));
            *v = (k % 251) as f32 / 250.0;
        }
        img
    }

    #[test]
    fn identical_images_identical_grids() {
        let img = textured(20, 12, 1);
        assert_eq!(encode_patches(&img, 4).unwrap(), encode_patches(&img, 4).unwrap());
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let g = encode_patches(&textured(33, 17, 2), 8).unwrap();
        assert_eq!((g.rows, g.cols), (3, 5));
        for p in 0..g.num_patches() {
            let n: f32 = g.descriptor(p).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_tile_gives_identical_descriptors() {
        // Tile an 8x8 block twice horizontally; patches (0,0) and (0,1) hold identical pixels.
        let tile = textured(8, 8, 3);
        let mut img = Image::new(16, 8, 3);
        for y in 0..8 {
            for x in 0..16 {
                for c in 0..3 {
                    img.pixel_mut(x, y)[c] = tile.at(x % 8, y, c);
                }
            }
        }
        let g = encode_patches(&img, 8).unwrap();
        assert_eq!(g.descriptor(0), g.descriptor(1));
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(matches!(
            encode_patches(&Image::new(7, 20, 3), 8),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    fn grid_64(ps: usize) -> FeatureGrid {
        encode_patches(&textured(64, 64, 4), ps).unwrap()
    }

    #[test]
    fn full_and_empty_mask_projection() {
        let g = grid_64(16);
        assert_eq!(project_mask_to_grid(&Mask::full(64, 64), &g, 0.5).unwrap(), (0..16).collect::<Vec<_>>());
        assert!(project_mask_to_grid(&Mask::new(64, 64), &g, 0.5).unwrap().is_empty());
        assert!(project_mask_to_grid(&Mask::new(63, 64), &g, 0.5).is_err());
    }

    #[test]
    fn exact_patch_mask_selects_that_patch() {
        // Patch (row 2, col 1) spans x in 16..32, y in 32..48; every other patch has coverage 0.
        let g = grid_64(16);
        let m = Mask::from_fn(64, 64, |x, y| (16..32).contains(&x) && (32..48).contains(&y));
        assert_eq!(project_mask_to_grid(&m, &g, 0.5).unwrap(), vec![2 * 4 + 1]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let g = grid_64(8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.v2fg");
        save_feature_grid(&g, &p).unwrap();
        assert_eq!(load_feature_grid(&p).unwrap(), g);

        let bytes = encode_feature_grid(&g).unwrap();
        let err = decode_feature_grid(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() - 3));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_grid(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_feature_grid(&v2), Err(Error::Version { found: 2, .. })));
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_patches(
            bits in proptest::collection::vec(any::<bool>(), 24 * 24),
            t1 in 0.0f64..1.0, dt in 0.0f64..1.0,
        ) {
            let bytes: Vec<u8> = bits.into_iter().map(u8::from).collect();
            let m = Mask::from_bytes(24, 24, &bytes).unwrap();
            let g = encode_patches(&textured(24, 24, 5), 6).unwrap();
            let lo = project_mask_to_grid(&m, &g, t1).unwrap();
            let hi = project_mask_to_grid(&m, &g, t1 + dt).unwrap();
            prop_assert!(hi.iter().all(|p| lo.contains(p)));
        }

        #[test]
        fn file_round_trip_is_identity(
            (dim, rows, cols) in (1usize..5, 1usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..dim * rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = FeatureGrid { dim, rows, cols, patch_size: 2, orig_height: rows * 2, orig_width: cols * 2 - 1, data };
            prop_assert_eq!(decode_feature_grid(&encode_feature_grid(&g).unwrap()).unwrap(), g);
        }
    }
}
