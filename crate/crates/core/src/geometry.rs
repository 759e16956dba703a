//! Points, coordinate frames and 2D affine transforms.

use std::fmt;

/// Coordinate frame a [`Point2D`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    /// `x` = patch column, `y` = patch row.
    PatchGrid,
    /// Pixel indices; pixel `(x, y)` has its sample at integer coordinates.
    ImagePixels,
    /// The decoder-facing canonical frame (defaults to the image frame).
    Canonical,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frame::PatchGrid => "patch-grid",
            Frame::ImagePixels => "image-pixels",
            Frame::Canonical => "canonical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    pub frame: Frame,
}

impl Point2D {
    pub const fn new(x: f64, y: f64, frame: Frame) -> Self {
        Self { x, y, frame }
    }

    pub const fn pixel(x: f64, y: f64) -> Self {
        Self::new(x, y, Frame::ImagePixels)
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

pub type PointSet = Vec<Point2D>;

/// Row-major 2×3 affine transform `p' = A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine {
    pub const fn new(m: [[f64; 3]; 2]) -> Self {
        Self { m }
    }

    pub const fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        Self::new([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    /// Counter-clockwise rotation (in the x-right / y-down pixel frame this
    /// maps +x onto +y) about the origin.
    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self::new([[c, -s, 0.0], [s, c, 0.0]])
    }

    pub fn scale(s: f64) -> Self {
        Self::new([[s, 0.0, 0.0], [0.0, s, 0.0]])
    }

    /// Rotation by `radians` and isotropic scaling by `scale` about `center`,
    /// followed by a translation of `(dx, dy)`.
    pub fn similarity_about(center: (f64, f64), radians: f64, scale: f64, dx: f64, dy: f64) -> Self {
        Affine::translation(center.0 + dx, center.1 + dy)
            .then_after(&Affine::rotation(radians))
            .then_after(&Affine::scale(scale))
            .then_after(&Affine::translation(-center.0, -center.1))
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn then_after(&self, inner: &Affine) -> Affine {
        let a = &self.m;
        let b = &inner.m;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..2 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine::new(out)
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Closed-form inverse; `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Affine> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Some(Affine::new([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn apply_point(&self, p: &Point2D) -> Point2D {
        let (x, y) = self.apply(p.x, p.y);
        Point2D::new(x, y, p.frame)
    }

    /// Six values, row-major.
    pub fn to_row_major(&self) -> [f64; 6] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn from_row_major(v: [f64; 6]) -> Self {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]]])
    }
}

/// Applies `t` to every point; frames are preserved.
pub fn warp_points(pts: &[Point2D], t: &Affine) -> PointSet {
    pts.iter().map(|p| t.apply_point(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn identity_leaves_points_unchanged() {
        let pts = vec![Point2D::pixel(1.5, -2.0), Point2D::pixel(7.0, 3.25)];
        assert_eq!(warp_points(&pts, &Affine::identity()), pts);
    }

    #[test]
    fn quarter_turn_maps_x_axis_onto_y_axis() {
        let p = warp_points(&[Point2D::pixel(1.0, 0.0)], &Affine::rotation(std::f64::consts::FRAC_PI_2));
        assert!(close((p[0].x, p[0].y), (0.0, 1.0)));
    }

    #[test]
    fn translation_moves_point() {
        let p = warp_points(&[Point2D::pixel(2.0, 3.0)], &Affine::translation(5.0, -1.0));
        assert_eq!((p[0].x, p[0].y), (7.0, 2.0));
    }

    #[test]
    fn singular_transform_has_no_inverse() {
        let t = Affine::new([[1.0, 2.0, 0.0], [2.0, 4.0, 1.0]]);
        assert!(t.inverse().is_none());
    }

    #[test]
    fn similarity_about_center_fixes_center() {
        let t = Affine::similarity_about((32.0, 32.0), 0.4, 1.2, 0.0, 0.0);
        assert!(close(t.apply(32.0, 32.0), (32.0, 32.0)));
    }
}
