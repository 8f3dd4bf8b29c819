//! Portable tensor and image file formats.
//!
//! Tensor format `LWT1`: magic bytes `L W T 1`, little-endian `u32` rank,
//! `rank` little-endian `u32` dimensions, then the payload as little-endian
//! `f32` in row-major order. Values are widened to `f64` on read and
//! narrowed on write.
//!
//! Images are binary 8-bit PGM (`P5`) and PPM (`P6`) with maxval 255; pixel
//! value `v` maps to `v / 255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LWT_MAGIC: [u8; 4] = *b"LWT1";
const MAX_RANK: u32 = 8;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated while reading {what} ({n} bytes needed at offset {})", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    fn bump(&mut self) {
        self.pos += 1;
    }
}

/// Decodes an `LWT1` buffer into a double-precision tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != LWT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"LWT1\"")));
    }
    let rank_off = r.offset();
    let rank = r.take_u32_le("rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(
            rank_off,
            format!("rank {rank} outside supported range 1..={MAX_RANK}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for axis in 0..rank {
        let dim_off = r.offset();
        let d = r.take_u32_le("dimension")?;
        if d == 0 {
            return Err(Error::format(dim_off, format!("axis {axis} has size 0")));
        }
        count = count.checked_mul(d as usize).ok_or_else(|| {
            Error::format(dim_off, "dimension product overflows".to_string())
        })?;
        shape.push(d as usize);
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let val_off = r.offset();
        let b = r.take(4, "payload value")?;
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(Error::format(
                val_off,
                format!("non-finite payload value at element {i}"),
            ));
        }
        data.push(v as f64);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes after payload", bytes.len() - r.pos),
        ));
    }
    Tensor::new(shape, data)
}

/// Encodes a tensor as `LWT1` bytes (payload narrowed to `f32`).
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() as u32 > MAX_RANK {
        return Err(Error::invalid(format!(
            "rank {} exceeds the format maximum {MAX_RANK}",
            t.rank()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&LWT_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::invalid(format!("dimension {d} exceeds u32 range")))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| e.with_path(path))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn skip_pnm_separators(r: &mut Reader<'_>) {
    loop {
        match r.peek() {
            Some(b) if b.is_ascii_whitespace() => r.bump(),
            Some(b'#') => {
                while let Some(b) = r.peek() {
                    r.bump();
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => return,
        }
    }
}

fn read_pnm_number(r: &mut Reader<'_>, what: &str) -> Result<u64> {
    skip_pnm_separators(r);
    let start = r.offset();
    let mut value: u64 = 0;
    let mut any = false;
    while let Some(b) = r.peek() {
        if b.is_ascii_digit() {
            any = true;
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as u64))
                .ok_or_else(|| Error::format(r.offset(), format!("{what} overflows")))?;
            r.bump();
        } else {
            break;
        }
    }
    if !any {
        return Err(Error::format(start, format!("expected {what}")));
    }
    Ok(value)
}

/// Decodes a binary PGM (`P5`) or PPM (`P6`) buffer into a `1xHxW` or
/// `3xHxW` tensor with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(2, "magic")?;
    let channels = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => {
            return Err(Error::format(
                0,
                format!("bad magic {magic:?}, expected \"P5\" or \"P6\""),
            ))
        }
    };
    let w = read_pnm_number(&mut r, "width")?;
    let h = read_pnm_number(&mut r, "height")?;
    if w == 0 || h == 0 {
        return Err(Error::format(r.offset(), format!("degenerate size {w}x{h}")));
    }
    let maxval_off = {
        skip_pnm_separators(&mut r);
        r.offset()
    };
    let maxval = read_pnm_number(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_off,
            format!("maxval {maxval} unsupported; only 8-bit (255) images are handled"),
        ));
    }
    match r.peek() {
        Some(b) if b.is_ascii_whitespace() => r.bump(),
        _ => {
            return Err(Error::format(
                r.offset(),
                "expected single whitespace before payload".to_string(),
            ))
        }
    }
    let (w, h) = (w as usize, h as usize);
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(r.offset(), "pixel count overflows".to_string()))?;
    let payload = r.take(count, "pixel payload")?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes after payload", bytes.len() - r.pos),
        ));
    }
    // Interleaved on disk, planar in memory.
    let mut data = vec![0.0f64; count];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let raw = payload[(y * w + x) * channels + c];
                data[(c * h + y) * w + x] = raw as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Encodes a `1xHxW` tensor as PGM or a `3xHxW` tensor as PPM. Values are
/// clamped to `[0, 1]` and quantized as `round(v * 255)`.
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims_chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::invalid(format!(
                "image encoding needs 1 (PGM) or 3 (PPM) channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = t.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.with_path(path))
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either an `LWT1` tensor or a PGM/PPM image, deciding by magic bytes.
pub fn read_any(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = if bytes.starts_with(&LWT_MAGIC) {
        decode_tensor(&bytes)
    } else {
        decode_image(&bytes)
    };
    decoded.map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, Rng};

    #[test]
    fn tensor_roundtrip_is_bit_exact_at_f32_precision() {
        let mut rng = Rng::new(1);
        let raw: Tensor = gaussian_sample(&mut rng, vec![3, 8, 8]).unwrap();
        // Values that survived one pass through f32 round-trip exactly.
        let t = raw.map(|v| v as f32 as f64).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(t, back);
        // And re-encoding reproduces the file bytes.
        assert_eq!(bytes, encode_tensor(&back).unwrap());
    }

    #[test]
    fn tensor_decode_rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(vec![2, 2]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        let err = decode_tensor(b"NOPE").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));

        bytes.truncate(bytes.len() - 2);
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn tensor_decode_rejects_zero_dim_and_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LWT1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 8, .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LWT1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = decode_tensor(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("overflow"), "{msg}");
    }

    #[test]
    fn pgm_values_normalize() {
        let bytes = b"P5\n2 1\n255\n\xff\x80".to_vec();
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-15);
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 2\n# another\n255\n\x00\x01\x02\x03".to_vec();
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
    }

    #[test]
    fn ppm_roundtrip_planar_layout() {
        let t = Tensor::new(
            vec![3, 1, 2],
            vec![1.0, 0.0, /* R */ 0.0, 1.0, /* G */ 0.5, 0.5 /* B */],
        )
        .unwrap();
        let bytes = encode_image(&t).unwrap();
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 1, 2]);
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back.data()[2], 0.0);
        // 0.5 quantizes to 128, decodes to 128/255.
        assert!((back.data()[4] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn image_decode_rejects_wrong_maxval_and_truncation() {
        let err = decode_image(b"P5\n2 1\n65535\n\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
        let err = decode_image(b"P5\n4 4\n255\n\x00").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn read_missing_file_names_path() {
        let err = read_tensor("/nonexistent/missing.lwt").unwrap_err();
        assert!(err.to_string().contains("missing.lwt"));
    }
}
