//! Procedural face-like images with known landmarks, for tests, demos and
//! the smoke-training corpus. Shapes have soft edges so resampling stays
//! well behaved.

use alloc::vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{Landmarks5, Similarity, TEMPLATE_112};
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Appearance fixed per identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceStyle {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    /// Half width and half height of the face oval, template units.
    pub face_radii: [f64; 2],
    /// Extra horizontal eye offset, template units.
    pub eye_spread: f64,
    pub eye_radius: f64,
}

/// Per-photo variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shot {
    pub background: [f64; 3],
    /// Maps template coordinates into the canvas.
    pub placement: Similarity,
    /// Mouth curvature, −1..1.
    pub smile: f64,
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl FaceStyle {
    pub fn for_identity(id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0x5EED_FACE);
        let tone = rng.gen_range(-0.2..0.7);
        FaceStyle {
            skin: [tone + 0.2, tone, tone - 0.15],
            hair: color(&mut rng, -1.0, 0.2),
            iris: color(&mut rng, -0.9, 0.3),
            lips: [rng.gen_range(0.2..0.8), rng.gen_range(-0.6..-0.1), rng.gen_range(-0.5..0.0)],
            face_radii: [rng.gen_range(30.0..38.0), rng.gen_range(40.0..48.0)],
            eye_spread: rng.gen_range(-3.0..3.0),
            eye_radius: rng.gen_range(4.0..6.0),
        }
    }

    /// Landmarks in template units.
    pub fn landmarks(&self) -> [[f64; 2]; 5] {
        let mut p = TEMPLATE_112;
        p[0][0] -= self.eye_spread;
        p[1][0] += self.eye_spread;
        p
    }
}

impl Shot {
    /// Canonical placement in a `size × size` canvas.
    pub fn aligned(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = size as f64 / 112.0;
        Shot {
            background: color(&mut rng, -0.8, 0.8),
            placement: Similarity { a: k, b: 0.0, tx: 0.0, ty: 0.0 },
            smile: rng.gen_range(-0.5..1.0),
        }
    }

    /// Random placement with rotation up to `max_angle` radians.
    pub fn posed(size: usize, seed: u64, max_angle: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Shot::aligned(size, seed ^ 0xA5A5);
        let k = size as f64 / 112.0 * rng.gen_range(0.7..0.9);
        let angle = rng.gen_range(-max_angle..=max_angle);
        let c = size as f64 / 2.0;
        let placement = Similarity::about([56.0, 62.0], angle, k, [c - 56.0, c - 62.0]);
        Shot { placement, ..base }
    }
}

fn smoothstep(edge: f64, width: f64, d: f64) -> f64 {
    // 1 inside (d < edge), 0 outside, linear ramp of the given width.
    ((edge - d) / width + 0.5).clamp(0.0, 1.0)
}

fn mix(base: [f64; 3], top: [f64; 3], alpha: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| base[i] * (1.0 - alpha) + top[i] * alpha)
}

/// Color at template coordinate `(u, v)`.
fn shade(style: &FaceStyle, shot: &Shot, u: f64, v: f64, edge: f64) -> [f64; 3] {
    let lm = style.landmarks();
    let grad = (v / 112.0 - 0.5) * 0.3;
    let mut c = shot.background.map(|x| (x + grad).clamp(-1.0, 1.0));

    let (cx, cy) = (56.0, 64.0);
    let [rx, ry] = style.face_radii;
    let oval = |x: f64, y: f64, sx: f64, sy: f64| (((u - x) / sx).powi(2) + ((v - y) / sy).powi(2)).sqrt();

    let hair = oval(cx, cy - 6.0, rx + 6.0, ry + 4.0);
    let hair_alpha = smoothstep(1.0, edge / ry, hair) * smoothstep(cy - 14.0, edge, v).max(0.0);
    c = mix(c, style.hair, hair_alpha);

    let face = oval(cx, cy, rx, ry);
    c = mix(c, style.skin, smoothstep(1.0, edge / ry, face));

    for eye in &lm[..2] {
        let white = oval(eye[0], eye[1], style.eye_radius * 1.6, style.eye_radius);
        c = mix(c, [0.9, 0.9, 0.85], smoothstep(1.0, edge / style.eye_radius, white));
        let iris = oval(eye[0], eye[1], style.eye_radius * 0.7, style.eye_radius * 0.7);
        c = mix(c, style.iris, smoothstep(1.0, edge / style.eye_radius, iris));
        let brow = oval(eye[0], eye[1] - 8.0, style.eye_radius * 2.0, 1.6);
        c = mix(c, style.hair, smoothstep(1.0, edge / 1.6, brow));
    }

    let nose = lm[2];
    let ridge = oval(nose[0], nose[1] - 6.0, 3.0, 9.0);
    let shadow = style.skin.map(|x| x - 0.25);
    c = mix(c, shadow, 0.6 * smoothstep(1.0, edge / 3.0, ridge));
    let tip = oval(nose[0], nose[1], 4.0, 3.0);
    c = mix(c, shadow, smoothstep(1.0, edge / 3.0, tip));

    let (ml, mr) = (lm[3], lm[4]);
    let mx = (ml[0] + mr[0]) / 2.0;
    let half = (mr[0] - ml[0]) / 2.0;
    let t = ((u - mx) / half).clamp(-1.0, 1.0);
    let centre_y = (ml[1] + mr[1]) / 2.0 + shot.smile * 4.0 * (1.0 - t * t);
    let mouth = oval(mx, centre_y, half, 2.5 + 1.0 * (1.0 - t * t));
    c = mix(c, style.lips, smoothstep(1.0, edge / 2.5, mouth));
    c.map(|x| x.clamp(-1.0, 1.0))
}

/// Renders a `[1, 3, size, size]` face and its landmarks in pixel coordinates.
pub fn render_face<T: Scalar>(style: &FaceStyle, shot: &Shot, size: usize) -> Result<(Tensor<T>, Landmarks5)> {
    if size < 4 {
        bail!(Config, "render size must be at least 4, got {size}");
    }
    let to_template = shot.placement.inverse()?;
    // Soft edge of about 1.5 output pixels, in template units.
    let edge = 1.5 / shot.placement.scale();
    let plane = size * size;
    let mut data = vec![T::zero(); 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let [u, v] = to_template.apply([x as f64, y as f64]);
            let rgb = shade(style, shot, u, v, edge);
            for (ch, &val) in rgb.iter().enumerate() {
                data[ch * plane + y * size + x] = T::from_f64(val);
            }
        }
    }
    let lm = Landmarks5::new(style.landmarks().map(|p| shot.placement.apply(p)));
    Ok((Tensor::new(&[1, 3, size, size], data)?, lm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let s = FaceStyle::for_identity(3);
        let shot = Shot::aligned(48, 9);
        let (a, lm) = render_face::<f32>(&s, &shot, 48).unwrap();
        let (b, _) = render_face::<f32>(&s, &shot, 48).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(lm.validate(48, 48).is_ok());
    }

    #[test]
    fn identities_differ() {
        let shot = Shot::aligned(32, 1);
        let (a, _) = render_face::<f32>(&FaceStyle::for_identity(1), &shot, 32).unwrap();
        let (b, _) = render_face::<f32>(&FaceStyle::for_identity(2), &shot, 32).unwrap();
        assert!(a.max_abs_diff(&b) > 0.1);
    }
}
