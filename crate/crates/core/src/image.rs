//! Pixel-level helpers on `[B, 3, H, W]` images with values in `[-1, 1]`.

use alloc::vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[0, 255] → [-1, 1]` via `x/127.5 − 1`.
pub fn from_byte(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`from_byte`], rounded and clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Mean over non-overlapping `factor × factor` windows.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        bail!(Config, "area downsample by {factor} needs extents divisible by it, got {h}×{w}");
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let src = x.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = &plane[(oy * factor + dy) * w + ox * factor..][..factor];
                    s += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                out[bc * oh * ow + oy * ow + ox] = T::from_f64(s * inv);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Mirror along the width axis.
pub fn hflip<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    let dst = out.data_mut();
    for row in 0..b * c * h {
        dst[row * w..(row + 1) * w].reverse();
    }
    Ok(out)
}

/// Mean squared error in `f64`.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Dimension, "mse of {:?} and {:?}", a.shape(), b.shape());
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[-1, 1]` (peak-to-peak 2).
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / m).log10() })
}

/// Bilinear sample of channel plane `plane` (`h × w`) at `(x, y)`, with
/// integer coordinates on pixel centers. Taps outside the image read `fill`.
pub fn sample_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64, fill: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            fill
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples one image `[1, 3, H, W]` to `oh × ow` where output pixel
/// `(u, v)` reads source point `map(u, v)`.
pub fn warp<T: Scalar>(
    image: &Tensor<T>,
    oh: usize,
    ow: usize,
    fill: f64,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Tensor<T>> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 {
        bail!(Dimension, "warp works on a single image, got batch {b}");
    }
    let planes: vec::Vec<vec::Vec<f64>> =
        (0..c).map(|ci| image.data()[ci * h * w..(ci + 1) * h * w].iter().map(|v| v.as_f64()).collect()).collect();
    let mut out = vec![T::zero(); c * oh * ow];
    for v in 0..oh {
        for u in 0..ow {
            let (x, y) = map(u as f64, v as f64);
            for (ci, plane) in planes.iter().enumerate() {
                out[ci * oh * ow + v * ow + u] = T::from_f64(sample_bilinear(plane, h, w, x, y, fill));
            }
        }
    }
    Tensor::new(&[1, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(to_byte(from_byte(v)), v);
        }
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 4], vec![1., 3., 0., 0., 5., 7., 2., 2.]).unwrap();
        let y = area_downsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[4.0, 1.0]);
        assert!(area_downsample(&x, 3).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32);
        let f = hflip(&x).unwrap();
        assert_ne!(f, x);
        assert_eq!(hflip(&f).unwrap(), x);
    }

    #[test]
    fn psnr_of_known_offset() {
        let a = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let b = Tensor::<f64>::full(&[1, 3, 4, 4], 0.02);
        // mse 4e-4 → 10·log10(1e4)
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn identity_warp_is_exact() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 5, 6], |i| ((i * 37) % 11) as f64 / 11.0);
        let y = warp(&x, 5, 6, -1.0, |u, v| (u, v)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn warp_fills_outside() {
        let x = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
        let y = warp(&x, 4, 4, -1.0, |u, v| (u + 100.0, v)).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.0));
    }
}
