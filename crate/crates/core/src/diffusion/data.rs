//! Conversions between image/mask pairs and model-space tensors.
//!
//! A sample at resolution `R` is `R * R` pixels in row-major order, each
//! holding `3 + C` channels `[RGB | one-hot class]`, all mapped to `[-1, 1]`.

use crate::error::{Error, Result};
use crate::image::{LabeledMask, RgbImage};

pub fn channels(num_classes: usize) -> usize {
    3 + num_classes
}

pub fn encode_pair(image: &RgbImage, mask: &LabeledMask, num_classes: usize) -> Result<Vec<f64>> {
    let (h, w) = (image.height(), image.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("encode_pair", "image and mask sizes differ"));
    }
    let ch = channels(num_classes);
    let sem = mask.semantic();
    let mut out = vec![-1.0; h * w * ch];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let rgb = image.pixel(r, c);
            for k in 0..3 {
                out[p * ch + k] = 2.0 * rgb[k] - 1.0;
            }
            let class = sem[p] as usize;
            if class > num_classes {
                return Err(Error::InvalidInput(format!("class {class} exceeds {num_classes}")));
            }
            if class > 0 {
                out[p * ch + 2 + class] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Image from the RGB channels; mask from the class channels: a pixel takes
/// the class of its largest channel when that channel is above 0 (the
/// midpoint of the one-hot range), otherwise background. Instances are the
/// 8-connected components per class.
pub fn decode_pair(x: &[f64], res: usize, num_classes: usize) -> Result<(RgbImage, LabeledMask)> {
    let ch = channels(num_classes);
    if x.len() != res * res * ch {
        return Err(Error::shape("decode_pair", format!("{} entries for {res}x{res}x{ch}", x.len())));
    }
    let mut rgb = Vec::with_capacity(res * res * 3);
    let mut sem = vec![0u8; res * res];
    for p in 0..res * res {
        let px = &x[p * ch..(p + 1) * ch];
        for v in &px[..3] {
            rgb.push(((v + 1.0) / 2.0).clamp(0.0, 1.0));
        }
        let (best, val) = px[3..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        if val > 0.0 {
            sem[p] = (best + 1) as u8;
        }
    }
    Ok((RgbImage::new(res, res, rgb)?, LabeledMask::from_semantic(res, res, &sem)?))
}

/// Block-average from `from x from` to `to x to` (`to` divides `from`).
pub fn downsample(x: &[f64], from: usize, to: usize, ch: usize) -> Result<Vec<f64>> {
    if to == 0 || !from.is_multiple_of(to) || x.len() != from * from * ch {
        return Err(Error::shape("downsample", format!("{from} -> {to} with {} entries", x.len())));
    }
    let f = from / to;
    let mut out = vec![0.0; to * to * ch];
    for r in 0..from {
        for c in 0..from {
            let o = ((r / f) * to + c / f) * ch;
            let i = (r * from + c) * ch;
            for k in 0..ch {
                out[o + k] += x[i + k];
            }
        }
    }
    let n = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(x: &[f64], from: usize, to: usize, ch: usize) -> Result<Vec<f64>> {
    if from == 0 || !to.is_multiple_of(from) || x.len() != from * from * ch {
        return Err(Error::shape("upsample", format!("{from} -> {to} with {} entries", x.len())));
    }
    let f = to / from;
    let mut out = Vec::with_capacity(to * to * ch);
    for r in 0..to {
        for c in 0..to {
            let i = ((r / f) * from + c / f) * ch;
            out.extend_from_slice(&x[i..i + ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, SynthConfig};

    #[test]
    fn encode_decode_round_trip() {
        let (img, mask) = generate_sample(4, &SynthConfig::default()).unwrap();
        let x = encode_pair(&img, &mask, 3).unwrap();
        let (img2, mask2) = decode_pair(&x, 32, 3).unwrap();
        assert!(img.data().iter().zip(img2.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(mask.semantic(), mask2.semantic());
        assert_eq!(mask.instance_count(), mask2.instance_count());
    }

    #[test]
    fn up_then_down_is_identity() {
        let x: Vec<f64> = (0..4 * 4 * 2).map(|v| v as f64).collect();
        let up = upsample(&x, 4, 16, 2).unwrap();
        assert_eq!(downsample(&up, 16, 4, 2).unwrap(), x);
        assert_eq!(&up[..2], &x[..2]);
        assert!(downsample(&x, 4, 3, 2).is_err());
    }
}
