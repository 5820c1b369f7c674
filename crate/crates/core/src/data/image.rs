use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Tensor;

/// Decodes a binary PPM (P6) or PNG into a `3×H×W` tensor with values
/// `v / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor, DataError> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err(DataError::Decode("unrecognized image format (expected P6 PPM or PNG)".into()))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Decode("malformed PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Decode("malformed PPM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::Decode("malformed PPM header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(DataError::Decode(format!("PPM has zero size {w}x{h}")));
    }
    if maxval != 255 {
        return Err(DataError::Decode(format!("unsupported PPM maxval {maxval}")));
    }
    let payload = &bytes[pos..];
    if payload.len() < w * h * 3 {
        return Err(DataError::Decode(format!(
            "truncated PPM payload: need {} bytes, have {}",
            w * h * 3,
            payload.len()
        )));
    }
    Ok(from_interleaved(&payload[..w * h * 3], h, w))
}

fn decode_png(bytes: &[u8]) -> Result<Tensor, DataError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Decode(e.to_string()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(from_interleaved(img.as_raw(), h as usize, w as usize))
}

fn from_interleaved(rgb: &[u8], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| rgb[(i % plane) * 3 + i / plane] as f32 / 255.0)
}

/// Encodes a `3×H×W` tensor in `[0, 1]` as P6 PPM, rounding to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    let plane = h * w;
    out.reserve(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize), DataError> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(DataError::Config(format!("expected a 3xHxW image, got shape {s:?}"))),
    }
}

/// Bilinear resize of a `C×H×W` tensor with half-pixel centers: output pixel
/// `i` samples source coordinate `(i + 0.5)·in/out − 0.5`, clamped to the
/// image.
pub fn resize_bilinear(img: &Tensor, h: usize, w: usize) -> Result<Tensor, DataError> {
    let [c, ih, iw] = match *img.shape() {
        [c, ih, iw] => [c, ih, iw],
        ref s => return Err(DataError::Config(format!("expected a CxHxW image, got shape {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(DataError::Config(format!("target size {h}x{w} must be positive")));
    }
    if (h, w) == (ih, iw) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, ih), taps(w, iw));
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * ih * iw..(ch + 1) * ih * iw];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
                let bottom = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out).expect("sizes match"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizationStats {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.std.iter().all(|&s| s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(DataError::Config(format!("normalization std must be positive, got {:?}", self.std)))
        }
    }
}

/// `(v − mean_c) / std_c` per channel.
pub fn normalize(img: &Tensor, stats: &NormalizationStats) -> Result<Tensor, DataError> {
    per_channel(img, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn denormalize(img: &Tensor, stats: &NormalizationStats) -> Result<Tensor, DataError> {
    per_channel(img, |c, v| v * stats.std[c] + stats.mean[c])
}

fn per_channel(img: &Tensor, f: impl Fn(usize, f32) -> f32) -> Result<Tensor, DataError> {
    let (h, w) = image_dims(img)?;
    let plane = h * w;
    let data = img.data().iter().enumerate().map(|(i, &v)| f(i / plane, v)).collect();
    Ok(Tensor::new(img.shape(), data).expect("same shape"))
}
