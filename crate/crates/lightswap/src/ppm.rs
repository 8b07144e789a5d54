//! Binary PPM (P6, maxval 255) images as `[1, 3, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use lightswap_core::image::{from_byte, to_byte};
use lightswap_core::{Error as CoreError, Result as CoreResult, Scalar, Tensor};

use crate::error::{self, Result, WithPath};

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Load(msg.into())
}

pub fn encode<T: Scalar>(img: &Tensor<T>) -> CoreResult<Vec<u8>> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 3 {
        return Err(CoreError::Dimension(format!("PPM needs a [1, 3, H, W] image, got {:?}", img.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[ch * plane + p].as_f64()));
        }
    }
    Ok(out)
}

/// Reads the next header token, skipping whitespace and `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> CoreResult<u64> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(bad("PPM header ends early")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad PPM header number at byte {start}")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> CoreResult<Tensor<T>> {
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a binary PPM (expected P6)"));
    }
    let mut pos = 2;
    let w = token(bytes, &mut pos)? as usize;
    let h = token(bytes, &mut pos)? as usize;
    let maxval = token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after PPM header"));
    }
    pos += 1;
    let plane = w * h;
    let pixels = &bytes[pos..];
    if plane == 0 || pixels.len() != 3 * plane {
        return Err(bad(format!("{w}×{h} PPM needs {} pixel bytes, found {}", 3 * plane, pixels.len())));
    }
    let mut data = vec![T::zero(); 3 * plane];
    for (p, rgb) in pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = T::from_f64(from_byte(rgb[ch]));
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode(&error::read(path)?).at(path)
}

pub fn write<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let bytes = encode(img).at(path)?;
    error::write(path, &bytes)
}

/// Tiles `[1, 3, h, w]` images row by row into one image, padding short
/// rows with black. All tiles must share a size.
pub fn grid<T: Scalar>(tiles: &[Tensor<T>], cols: usize) -> CoreResult<Tensor<T>> {
    let Some(first) = tiles.first() else {
        return Err(CoreError::Usage("empty image grid".into()));
    };
    let (_, _, h, w) = first.dims4()?;
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![-T::one(); 3 * gh * gw];
    for (i, t) in tiles.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(CoreError::Dimension(format!("grid tile {i} is {:?}, expected {:?}", t.shape(), first.shape())));
        }
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                let src = &t.data()[ch * h * w + y * w..][..w];
                let dst = ch * gh * gw + (r * h + y) * gw + c * w;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[1, 3, gh, gw], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_images_round_trip_exactly() {
        let img = Tensor::<f32>::from_fn(&[1, 3, 5, 7], |i| from_byte((i * 37 % 256) as u8) as f32);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        let back: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn comments_and_errors() {
        let mut b = b"P6 # made by hand\n2 1\n# c\n255\n".to_vec();
        b.extend_from_slice(&[0, 255, 0, 255, 255, 255]);
        let t: Tensor<f64> = decode(&b).unwrap();
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, 1.0, -1.0, 1.0]);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        assert!(decode::<f64>(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode::<f64>(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
        assert!(encode(&Tensor::<f32>::zeros(&[2, 3, 2, 2])).is_err());
    }

    #[test]
    fn grid_places_tiles() {
        let a = Tensor::<f32>::full(&[1, 3, 2, 2], 0.5);
        let b = Tensor::<f32>::full(&[1, 3, 2, 2], -0.5);
        let g = grid(&[a.clone(), b, a], 2).unwrap();
        assert_eq!(g.shape(), &[1, 3, 4, 4]);
        assert_eq!(g.data()[0], 0.5);
        assert_eq!(g.data()[2], -0.5);
        assert_eq!(g.data()[2 * 4 + 2], -1.0);
    }
}
