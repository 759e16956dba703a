use crate::error::{Error, Result};
use crate::geometry::Point2D;

/// Dense binary raster, row-major, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    /// Builds a mask from raw bytes; any nonzero byte is foreground.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::dims(width * height, bytes.len()));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    /// Bounds-checked lookup with signed coordinates; outside reads as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn ensure_same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        Ok(())
    }

    /// Shifts the mask by an integer offset; pixels leaving the frame are dropped.
    pub fn translated(&self, dx: i64, dy: i64) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get_signed(x as i64 - dx, y as i64 - dy)
        })
    }

    /// Foreground where `logits >= 0` (sigmoid probability ≥ 0.5).
    pub fn from_logits(width: usize, height: usize, logits: &[f32]) -> Result<Mask> {
        if logits.len() != width * height {
            return Err(Error::dims(width * height, logits.len()));
        }
        Ok(Self {
            width,
            height,
            data: logits.iter().map(|&l| u8::from(l >= 0.0)).collect(),
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Arithmetic mean of foreground pixel coordinates.
pub fn mask_centroid(m: &Mask) -> Result<Point2D> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (x, y) in m.foreground() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Point2D::pixel(sx / n as f64, sy / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_of_single_pixel() {
        let mut m = Mask::new(8, 8);
        m.set(3, 5, true);
        let c = mask_centroid(&m).unwrap();
        assert_eq!((c.x, c.y), (3.0, 5.0));
    }

    #[test]
    fn centroid_of_pixel_pair() {
        let mut m = Mask::new(4, 2);
        m.set(0, 0, true);
        m.set(2, 0, true);
        let c = mask_centroid(&m).unwrap();
        assert_eq!((c.x, c.y), (1.0, 0.0));
    }

    #[test]
    fn centroid_of_full_mask() {
        // Enumerated mean over x, y ∈ {0, 1, 2, 3}.
        let expected = (0..4).map(|v| v as f64).sum::<f64>() / 4.0;
        let c = mask_centroid(&Mask::full(4, 4)).unwrap();
        assert_eq!((c.x, c.y), (expected, expected));
        assert_eq!(expected, 1.5);
    }

    #[test]
    fn centroid_of_empty_mask_fails() {
        assert!(matches!(mask_centroid(&Mask::new(3, 3)), Err(Error::EmptyMask)));
    }

    #[test]
    fn translation_drops_pixels_leaving_frame() {
        let mut m = Mask::new(4, 4);
        m.set(3, 0, true);
        m.set(1, 1, true);
        let t = m.translated(1, 1);
        assert_eq!(t.count(), 1);
        assert!(t.get(2, 2));
    }
}
