//! Five-point face alignment by a least-squares similarity transform.

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::{bail, Result};
use crate::image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Left eye, right eye, nose tip, left and right mouth corner, for a
/// 112×112 crop.
pub const TEMPLATE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

/// Spread (RMS distance to centroid, in pixels) below which landmarks are
/// treated as degenerate.
pub const MIN_SPREAD: f64 = 1e-3;

/// Five landmarks in pixel coordinates (pixel centers at integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks5 {
    pub points: [[f64; 2]; 5],
}

impl Landmarks5 {
    pub fn new(points: [[f64; 2]; 5]) -> Self {
        Landmarks5 { points }
    }

    /// The canonical template rescaled to a `size × size` crop.
    pub fn template(size: usize) -> Self {
        let k = size as f64 / 112.0;
        Landmarks5 { points: TEMPLATE_112.map(|[x, y]| [x * k, y * k]) }
    }

    /// Checks the points lie inside a `w × h` image and the eyes differ.
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        for (i, &[x, y]) in self.points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                bail!(Alignment, "landmark {i} at ({x}, {y}) lies outside the {w}×{h} image");
            }
        }
        let [l, r] = [self.points[0], self.points[1]];
        if (l[0] - r[0]).hypot(l[1] - r[1]) < MIN_SPREAD {
            bail!(Alignment, "eye landmarks coincide");
        }
        Ok(())
    }

    pub fn map(&self, t: &Similarity) -> Self {
        Landmarks5 { points: self.points.map(|p| t.apply(p)) }
    }
}

/// `(x, y) ↦ (a·x − b·y + tx, b·x + a·y + ty)`: rotation, uniform scale and
/// translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    /// Rotation by `angle` radians and scaling by `scale` about `center`,
    /// followed by a shift.
    pub fn about(center: [f64; 2], angle: f64, scale: f64, shift: [f64; 2]) -> Self {
        let (a, b) = (scale * angle.cos(), scale * angle.sin());
        let [cx, cy] = center;
        Similarity { a, b, tx: cx - (a * cx - b * cy) + shift[0], ty: cy - (b * cx + a * cy) + shift[1] }
    }

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty]
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn angle(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.a * self.a + self.b * self.b;
        if !(d > 0.0) {
            bail!(Alignment, "similarity has zero scale");
        }
        let (a, b) = (self.a / d, -self.b / d);
        Ok(Similarity { a, b, tx: -(a * self.tx - b * self.ty), ty: -(b * self.tx + a * self.ty) })
    }
}

/// Least-squares similarity taking `src` onto `dst`. Treating points as
/// complex numbers `z`, the fit is `w = s·z + t` with
/// `s = Σ conj(z̃)·w̃ / Σ|z̃|²` on centered coordinates.
pub fn estimate_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 2 {
        bail!(Alignment, "need at least two point pairs, got {} and {}", src.len(), dst.len());
    }
    let n = src.len() as f64;
    let centroid = |pts: &[[f64; 2]]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    };
    let (cs, cd) = (centroid(src), centroid(dst));
    let (mut num_re, mut num_im, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (zx, zy) = (p[0] - cs[0], p[1] - cs[1]);
        let (wx, wy) = (q[0] - cd[0], q[1] - cd[1]);
        num_re += zx * wx + zy * wy;
        num_im += zx * wy - zy * wx;
        den += zx * zx + zy * zy;
    }
    if (den / n).sqrt() < MIN_SPREAD {
        bail!(Alignment, "landmarks have no spread");
    }
    let (a, b) = (num_re / den, num_im / den);
    Ok(Similarity { a, b, tx: cd[0] - (a * cs[0] - b * cs[1]), ty: cd[1] - (b * cs[0] + a * cs[1]) })
}

/// Warps `image` (`[1, 3, H, W]`) so `lm` lands on `template`, producing a
/// `size × size` crop. Pixels outside the source read −1.
pub fn align_face<T: Scalar>(image: &Tensor<T>, lm: &Landmarks5, template: &Landmarks5, size: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        bail!(Dimension, "align_face expects an RGB image, got {c} channels");
    }
    lm.validate(w, h)?;
    let fwd = estimate_similarity(&lm.points, &template.points)?;
    let inv = fwd.inverse()?;
    image::warp(image, size, size, -1.0, |u, v| {
        let [x, y] = inv.apply([u, v]);
        (x, y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn recovers_an_exact_similarity() {
        let t = Similarity::about([56.0, 60.0], 0.4, 1.7, [12.0, -3.0]);
        let src = TEMPLATE_112;
        let dst = src.map(|p| t.apply(p));
        let est = estimate_similarity(&src, &dst).unwrap();
        for (x, y) in [(est.a, t.a), (est.b, t.b), (est.tx, t.tx), (est.ty, t.ty)] {
            assert!(close(x, y, 1e-9), "{est:?} vs {t:?}");
        }
    }

    #[test]
    fn two_point_fit_is_exact_on_eyes() {
        // With two points the fit has zero residual; check against the
        // direct construction from the eye vector.
        let src = [[10.0, 20.0], [30.0, 25.0]];
        let dst = [[50.0, 50.0], [52.0, 90.0]];
        let est = estimate_similarity(&src, &dst).unwrap();
        for (p, q) in src.iter().zip(&dst) {
            let r = est.apply(*p);
            assert!(close(r[0], q[0], 1e-9) && close(r[1], q[1], 1e-9));
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = Similarity::about([3.0, 4.0], -1.1, 0.6, [7.0, 8.0]);
        let inv = t.inverse().unwrap();
        let p = [13.5, -2.25];
        let q = inv.apply(t.apply(p));
        assert!(close(p[0], q[0], 1e-12) && close(p[1], q[1], 1e-12));
    }

    #[test]
    fn coincident_landmarks_are_rejected() {
        let pts = [[5.0, 5.0]; 5];
        assert!(matches!(estimate_similarity(&pts, &TEMPLATE_112), Err(crate::Error::Alignment(_))));
        let lm = Landmarks5::new(pts);
        assert!(matches!(lm.validate(10, 10), Err(crate::Error::Alignment(_))));
    }

    #[test]
    fn out_of_bounds_landmarks_are_rejected() {
        let lm = Landmarks5::template(256);
        assert!(lm.validate(256, 256).is_ok());
        assert!(lm.validate(64, 64).is_err());
    }

    #[test]
    fn template_landmarks_give_the_identity_warp() {
        let img = Tensor::<f64>::from_fn(&[1, 3, 32, 32], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let t = Landmarks5::template(32);
        let out = align_face(&img, &t, &t, 32).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-4);
    }
}
