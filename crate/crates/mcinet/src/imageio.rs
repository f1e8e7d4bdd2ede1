//! Binary PGM/PPM (maxval 255) and `.nt` image decoding, PGM encoding.

use std::path::Path;

use mcinet_core::Tensor;

use crate::error::{self, AppError, Result};
use crate::formats;

/// Binary PGM bytes for a row-major grayscale image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn header_fields(bytes: &[u8]) -> std::result::Result<([usize; 3], usize), String> {
    let mut at = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(at) {
                Some(b) if b.is_ascii_whitespace() => at += 1,
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        if start == at {
            return Err(format!("malformed header at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .expect("ascii digits")
            .parse()
            .map_err(|_| "header value out of range".to_string())?;
    }
    match bytes.get(at) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields, at + 1)),
        _ => Err("truncated header".into()),
    }
}

/// P5 (C=1) or P6 (C=3) to 1×C×H×W with values scaled to [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("unsupported image format (expected P5, P6 or NTSR)".into()),
    };
    let ([width, height, maxval], start) = header_fields(bytes)?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} is not 255"));
    }
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    let need = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(format!("truncated payload: {} of {need} bytes", payload.len()));
    }
    let plane = width * height;
    let mut data = vec![0.0; need];
    // interleaved RGB → channel planes
    for (i, &b) in payload[..need].iter().enumerate() {
        data[(i % channels) * plane + i / channels] = b as f64 / 255.0;
    }
    Tensor::new(vec![1, channels, height, width], data).map_err(|e| e.to_string())
}

/// Decodes by content: PGM, PPM or an `.nt` tensor (rank 4 with batch 1, or
/// rank 3 C×H×W, or rank 2 H×W).
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = error::read(path)?;
    let decoded = if bytes.starts_with(formats::NT_MAGIC) {
        formats::decode_nt(&bytes).and_then(|t| {
            let s = t.shape().to_vec();
            match s.as_slice() {
                [1, _, _, _] => Ok(t),
                &[c, h, w] => t.reshape(&[1, c, h, w]).map_err(|e| e.to_string()),
                &[h, w] => t.reshape(&[1, 1, h, w]).map_err(|e| e.to_string()),
                _ => Err(format!("tensor of shape {s:?} is not an image")),
            }
        })
    } else {
        decode_pnm(&bytes)
    };
    decoded.map_err(|e| AppError::format(path, e))
}
