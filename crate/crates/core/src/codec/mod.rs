//! End-to-end encoding and decoding of 8-bit images.

mod coding;
mod container;
pub mod ingest;
mod io;
pub mod synth;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use coding::{decode_pyramid, encode_pyramid};
pub use container::{Container, CONTAINER_MAGIC, CONTAINER_VERSION, HEADER_LEN};
pub use io::{load_image, load_image_bytes, save_png, write_pgm};

use crate::lifting::cdf97;
use crate::model::Model;
use crate::nn::kernels::reflect;
use crate::posterior::GaussianField;
use crate::pyramid::{Plane, QuantizedPyramid};
use crate::quant::quantize_hard;
use crate::rangecoder::{Decoder, Encoder};
use crate::sampler::{sample_coefficients, SampleSpec};
use crate::Error;

/// Pixels are centred on this value before the transform.
pub const PIXEL_OFFSET: f64 = 128.0;

/// Interleaved 8-bit raster with one or three channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, Error> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Invalid(format!("{channels} channels; only 1 or 3 are supported")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::Shape(format!("{width}x{height}x{channels} image with {} samples", data.len())));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn gray(plane: &Plane<u8>) -> Self {
        Self { width: plane.width, height: plane.height, channels: 1, data: plane.data.clone() }
    }

    pub fn plane(&self, c: usize) -> Plane<f64> {
        let data = self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect();
        Plane { width: self.width, height: self.height, data }
    }

    pub fn from_planes(planes: &[Plane<u8>]) -> Result<Self, Error> {
        let first = planes.first().ok_or_else(|| Error::Invalid("no planes".into()))?;
        let (w, h, c) = (first.width, first.height, planes.len());
        let mut data = vec![0u8; w * h * c];
        for (ci, p) in planes.iter().enumerate() {
            if (p.width, p.height) != (w, h) {
                return Err(Error::Shape("planes differ in size".into()));
            }
            for (i, &v) in p.data.iter().enumerate() {
                data[i * c + ci] = v;
            }
        }
        Self::new(w, h, c, data)
    }
}

/// Smallest multiple of `2^levels` that is at least `n` (and at least one block).
pub fn padded_len(n: usize, levels: usize) -> usize {
    let m = 1usize << levels;
    n.div_ceil(m).max(1) * m
}

/// Symmetric-reflection padding to `w x h`.
pub fn pad_plane(p: &Plane<f64>, w: usize, h: usize) -> Plane<f64> {
    let mut out = Plane::new(w, h);
    for y in 0..h {
        let sy = reflect(y as isize, p.height);
        for x in 0..w {
            out.data[y * w + x] = p.data[sy * p.width + reflect(x as isize, p.width)];
        }
    }
    out
}

pub fn crop_plane<T: Copy + Default>(p: &Plane<T>, w: usize, h: usize) -> Plane<T> {
    let mut out = Plane::new(w, h);
    for y in 0..h {
        out.data[y * w..(y + 1) * w].copy_from_slice(&p.data[y * p.width..y * p.width + w]);
    }
    out
}

/// Rounded, clamped 8-bit pixels from a centred plane.
pub fn to_pixels(p: &Plane<f64>) -> Plane<u8> {
    p.map(|v| (v + PIXEL_OFFSET).round().clamp(0.0, 255.0) as u8)
}

/// Rounded coefficients of each channel of an image, after padding.
pub fn analyze(image: &Image, model: &Model) -> Result<Vec<QuantizedPyramid>, Error> {
    let k = model.levels();
    let (pw, ph) = (padded_len(image.width, k), padded_len(image.height, k));
    (0..image.channels)
        .map(|c| {
            let plane = pad_plane(&image.plane(c), pw, ph).map(|v| v - PIXEL_OFFSET);
            quantize_hard(&model.forward_transform(&plane)?)
        })
        .collect()
}

pub fn encode(image: &Image, model: &Model) -> Result<Container, Error> {
    Ok(encode_with_coefficients(image, model)?.0)
}

pub fn encode_with_coefficients(image: &Image, model: &Model) -> Result<(Container, Vec<QuantizedPyramid>), Error> {
    let coeffs = analyze(image, model)?;
    let mut enc = Encoder::new();
    for p in &coeffs {
        encode_pyramid(model, &mut enc, p)?;
    }
    log::debug!("encoded coefficients hash {}", hex(&coefficient_hash(&coeffs)));
    let c = Container {
        width: dim32(image.width)?,
        height: dim32(image.height)?,
        channels: image.channels as u8,
        levels: model.levels() as u8,
        fingerprint: model.fingerprint()?,
        payload: enc.finish(),
    };
    Ok((c, coeffs))
}

fn dim32(n: usize) -> Result<u32, Error> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("dimension {n} too large")))
}

/// Checks that `c` was produced with `model`.
pub fn check_model(c: &Container, model: &Model) -> Result<(), Error> {
    if c.fingerprint != model.fingerprint()? || c.levels as usize != model.levels() {
        return Err(Error::ModelMismatch);
    }
    Ok(())
}

/// Entropy-decodes the rounded coefficients of every channel.
pub fn decode_coefficients(c: &Container, model: &Model) -> Result<Vec<QuantizedPyramid>, Error> {
    check_model(c, model)?;
    let k = model.levels();
    let (pw, ph) = (padded_len(c.width as usize, k), padded_len(c.height as usize, k));
    let mut dec = Decoder::new(&c.payload)?;
    let coeffs: Vec<QuantizedPyramid> =
        (0..c.channels).map(|_| decode_pyramid(model, &mut dec, pw, ph)).collect::<Result<_, _>>()?;
    log::debug!("decoded coefficients hash {}", hex(&coefficient_hash(&coeffs)));
    Ok(coeffs)
}

/// Posterior fields of a decoded bitstream, one per channel.
pub fn decode_fields(c: &Container, model: &Model) -> Result<Vec<GaussianField>, Error> {
    decode_coefficients(c, model)?.iter().map(|q| model.posterior_field(q)).collect()
}

/// One draw from the fields as unrounded, centred planes cropped to the
/// image size; `seed` keys the noise.
pub fn reconstruct_planes(
    fields: &[GaussianField],
    model: &Model,
    alpha: f64,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Vec<Plane<f64>>, Error> {
    fields
        .iter()
        .enumerate()
        .map(|(c, f)| {
            let y = sample_coefficients(f, alpha, seed, c as u64);
            Ok(crop_plane(&model.inverse_transform(&y)?, width, height))
        })
        .collect()
}

/// Draws one image from the fields; `seed` keys the noise.
pub fn reconstruct(
    fields: &[GaussianField],
    model: &Model,
    alpha: f64,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Image, Error> {
    let planes = reconstruct_planes(fields, model, alpha, seed, width, height)?;
    Image::from_planes(&planes.iter().map(to_pixels).collect::<Vec<_>>())
}

/// All images requested by `specs`: `count` draws each, with seeds
/// `seed, seed + 1, ...`.
pub fn decode(c: &Container, model: &Model, specs: &[SampleSpec]) -> Result<Vec<Image>, Error> {
    let fields = decode_fields(c, model)?;
    let mut out = Vec::new();
    for s in specs {
        for i in 0..s.count {
            out.push(reconstruct(&fields, model, s.alpha, s.seed.wrapping_add(i as u64), c.width as usize, c.height as usize)?);
        }
    }
    Ok(out)
}

/// SHA-256 over every coefficient, for checking codec symmetry.
pub fn coefficient_hash(coeffs: &[QuantizedPyramid]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in coeffs {
        for v in p.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Gain applied to posterior scales in the debug dumps.
pub const SCALE_DUMP_GAIN: f64 = 7.0;

/// 8-bit view of a scale plane, enlarged by [`SCALE_DUMP_GAIN`].
pub fn scale_image(scale: &Plane<f64>) -> Plane<u8> {
    scale.map(|s| (SCALE_DUMP_GAIN * s).round().clamp(0.0, 255.0) as u8)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn mse(reference: &Image, candidate: &Image) -> Result<f64, Error> {
    if (reference.width, reference.height, reference.channels) != (candidate.width, candidate.height, candidate.channels)
    {
        return Err(Error::Shape(format!(
            "reference is {}x{}x{}, candidate {}x{}x{}",
            reference.width, reference.height, reference.channels, candidate.width, candidate.height, candidate.channels
        )));
    }
    let se: f64 = reference.data.iter().zip(&candidate.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(se / reference.data.len() as f64)
}

/// Infinite for identical images.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Mean squared level-1 detail coefficient of a one-level CDF 9/7 analysis,
/// averaged over channels. Odd edges are trimmed.
pub fn high_frequency_energy(image: &Image) -> f64 {
    let planes: Vec<Plane<f64>> = (0..image.channels).map(|c| image.plane(c)).collect();
    plane_high_frequency_energy(&planes)
}

/// [`high_frequency_energy`] of real-valued planes.
pub fn plane_high_frequency_energy(planes: &[Plane<f64>]) -> f64 {
    let mut total = 0.0;
    for p in planes {
        let (w, h) = (p.width & !1, p.height & !1);
        if w == 0 || h == 0 {
            continue;
        }
        let [_, hl, lh, hh] = cdf97::analyze_level(&crop_plane(p, w, h));
        let e: f64 = [hl, lh, hh].iter().flat_map(|b| b.data.iter()).map(|v| v * v).sum();
        total += e / (3 * hl_len(w, h)) as f64;
    }
    total / planes.len().max(1) as f64
}

fn hl_len(w: usize, h: usize) -> usize {
    (w / 2) * (h / 2)
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateMetrics {
    pub mse: f64,
    /// Number, or the string `"inf"` for a perfect match.
    pub psnr: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub candidates: Vec<CandidateMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpp: Option<f64>,
}

pub fn psnr_json(p: f64) -> serde_json::Value {
    if p.is_finite() {
        serde_json::json!(p)
    } else {
        serde_json::json!("inf")
    }
}

pub fn metrics(reference: &Image, candidates: &[Image], container: Option<&Container>) -> Result<MetricsReport, Error> {
    let candidates = candidates
        .iter()
        .map(|c| {
            let m = mse(reference, c)?;
            Ok(CandidateMetrics { mse: m, psnr: psnr_json(psnr(m)) })
        })
        .collect::<Result<_, Error>>()?;
    Ok(MetricsReport { candidates, bpp: container.map(Container::bpp) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(0.0), f64::INFINITY);
        assert!((psnr(1.0) - 48.130_803_608_679_1).abs() < 1e-9);
        let a = Image::new(2, 2, 1, vec![10, 20, 30, 40]).unwrap();
        let b = Image::new(2, 2, 1, vec![11, 21, 31, 41]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let r = metrics(&a, &[a.clone()], None).unwrap();
        assert_eq!(serde_json::to_value(&r).unwrap()["candidates"][0]["psnr"], "inf");
        assert!(mse(&a, &Image::new(1, 4, 1, vec![0; 4]).unwrap()).is_err());
    }

    #[test]
    fn padding_reflects_and_crop_restores() {
        let p = Plane::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let q = pad_plane(&p, 4, 4);
        assert_eq!(&q.data[..4], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&q.data[8..12], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(crop_plane(&q, 3, 2), p);
        assert_eq!(padded_len(13, 4), 16);
        assert_eq!(padded_len(1, 2), 4);
        assert_eq!(padded_len(32, 4), 32);
    }

    #[test]
    fn interleaved_planes_round_trip() {
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let planes: Vec<Plane<u8>> = (0..3).map(|c| img.plane(c).map(|v| v as u8)).collect();
        assert_eq!(planes[1].data, vec![2, 5]);
        assert_eq!(Image::from_planes(&planes).unwrap(), img);
    }

    #[test]
    fn detail_energy_ignores_flat_images_and_sees_checkerboards() {
        let flat = Image::new(4, 4, 1, vec![90; 16]).unwrap();
        assert!(high_frequency_energy(&flat) < 1e-20);
        let board: Vec<f64> = (0..16).map(|i| if (i % 4 + i / 4) % 2 == 0 { 100.0 } else { 0.0 }).collect();
        let p = Plane::from_vec(4, 4, board.clone()).unwrap();
        let img = Image::new(4, 4, 1, board.iter().map(|&v| v as u8).collect()).unwrap();
        let e = plane_high_frequency_energy(&[p]);
        assert!(e > 100.0);
        assert!((e - high_frequency_energy(&img)).abs() < 1e-9);
    }

}
