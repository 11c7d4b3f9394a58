//! Deterministic encoders from synthesized tensors to viewable frames.
//!
//! Flow video follows the red = horizontal, green = vertical,
//! blue = magnitude convention. One (min, max) pair is taken jointly over
//! the u, v and magnitude planes of the whole sequence, then values map
//! affinely onto 0..=255 with round-half-up; a constant sequence maps to a
//! uniform 128. Frames are written as binary PPM (P6, maxval 255), which is
//! bit-exact across platforms. An HSV encoder (angle to hue, magnitude to
//! value) is available for comparison.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::SpatiotemporalTensor;

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let at = 3 * (y * self.width + x);
        self.data[at..at + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let at = 3 * (y * self.width + x);
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Binary PPM: `P6\n<W> <H>\n255\n` followed by the raw RGB triples.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |off: usize, msg: &str| Error::format_at_offset(path, off as u64, msg);
        // Header is three whitespace-separated fields after the magic.
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(err(0, "missing P6 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected decimal header field"));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
            *field = text
                .parse()
                .map_err(|_| err(start, "header field out of range"))?;
        }
        if fields[0] == 0 || fields[0] > 1 << 20 || fields[1] == 0 || fields[1] > 1 << 20 {
            return Err(err(2, "unreasonable image dimensions"));
        }
        if fields[2] != 255 {
            return Err(err(pos, "maxval must be 255"));
        }
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(err(pos, "missing separator after maxval"));
        }
        pos += 1;
        let (width, height) = (fields[0], fields[1]);
        let need = width * height * 3;
        if bytes.len() - pos != need {
            return Err(err(
                bytes.len(),
                &format!("expected {need} payload bytes, found {}", bytes.len() - pos),
            ));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..].to_vec(),
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_ppm_bytes(&bytes, &path.display().to_string())
    }
}

/// A rendered flow sequence plus the normalization range that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVideo {
    pub frames: Vec<RgbImage>,
    pub scale_min: f64,
    pub scale_max: f64,
}

/// Round-half-up quantization of `v` in [min, max] onto 0..=255; the
/// degenerate max = min range maps everything to 128.
#[inline]
fn quantize(v: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 128;
    }
    let scaled = (v - min) / (max - min) * 255.0;
    let rounded = (scaled + 0.5).floor();
    rounded.clamp(0.0, 255.0) as u8
}

/// Encodes a two-channel motion tensor as an RGB frame sequence with
/// R = horizontal, G = vertical, B = flow magnitude, min-max scaled jointly
/// over u, v and magnitude across the whole sequence.
pub fn encode_flow(x_mot: &SpatiotemporalTensor) -> Result<FlowVideo> {
    let (h, w, t, c) = x_mot.shape();
    if c != 2 {
        return Err(Error::InvalidShape {
            message: format!("flow encoding needs 2 channels (u, v), tensor has {c}"),
        });
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for chunk in x_mot.data().chunks_exact(2) {
        let (u, v) = (chunk[0], chunk[1]);
        let mag = (u * u + v * v).sqrt();
        for value in [u, v, mag] {
            min = min.min(value);
            max = max.max(value);
        }
    }
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let mut frame = RgbImage::new(w, h);
        for i in 0..h {
            for j in 0..w {
                let u = x_mot.get(i, j, k, 0);
                let v = x_mot.get(i, j, k, 1);
                let mag = (u * u + v * v).sqrt();
                frame.set_pixel(
                    j,
                    i,
                    [
                        quantize(u, min, max),
                        quantize(v, min, max),
                        quantize(mag, min, max),
                    ],
                );
            }
        }
        frames.push(frame);
    }
    Ok(FlowVideo {
        frames,
        scale_min: min,
        scale_max: max,
    })
}

/// Alternate flow encoder: hue from the flow angle, full saturation, value
/// from the magnitude min-max scaled over the whole sequence.
pub fn encode_flow_hsv(x_mot: &SpatiotemporalTensor) -> Result<FlowVideo> {
    let (h, w, t, c) = x_mot.shape();
    if c != 2 {
        return Err(Error::InvalidShape {
            message: format!("flow encoding needs 2 channels (u, v), tensor has {c}"),
        });
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for chunk in x_mot.data().chunks_exact(2) {
        let mag = (chunk[0] * chunk[0] + chunk[1] * chunk[1]).sqrt();
        min = min.min(mag);
        max = max.max(mag);
    }
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let mut frame = RgbImage::new(w, h);
        for i in 0..h {
            for j in 0..w {
                let u = x_mot.get(i, j, k, 0);
                let v = x_mot.get(i, j, k, 1);
                let mag = (u * u + v * v).sqrt();
                let value = if max <= min {
                    0.5
                } else {
                    (mag - min) / (max - min)
                };
                let hue = v.atan2(u).rem_euclid(std::f64::consts::TAU)
                    / std::f64::consts::TAU
                    * 360.0;
                frame.set_pixel(j, i, hsv_to_rgb(hue, 1.0, value));
            }
        }
        frames.push(frame);
    }
    Ok(FlowVideo {
        frames,
        scale_min: min,
        scale_max: max,
    })
}

fn hsv_to_rgb(hue_deg: f64, saturation: f64, value: f64) -> [u8; 3] {
    let c = value * saturation;
    let hp = hue_deg / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    let to_byte = |f: f64| ((f + m) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
    [to_byte(r1), to_byte(g1), to_byte(b1)]
}

/// Encodes a single-frame three-channel appearance tensor as an RGB image,
/// min-max scaled over the whole image.
pub fn encode_appearance(x_app: &SpatiotemporalTensor) -> Result<RgbImage> {
    let (h, w, t, c) = x_app.shape();
    if t != 1 || c != 3 {
        return Err(Error::InvalidShape {
            message: format!("appearance encoding needs T=1, C=3, tensor is T={t}, C={c}"),
        });
    }
    let (min, max) = x_app.min_max();
    let mut image = RgbImage::new(w, h);
    for i in 0..h {
        for j in 0..w {
            image.set_pixel(
                j,
                i,
                [
                    quantize(x_app.get(i, j, 0, 0), min, max),
                    quantize(x_app.get(i, j, 0, 1), min, max),
                    quantize(x_app.get(i, j, 0, 2), min, max),
                ],
            );
        }
    }
    Ok(image)
}

/// Writes every frame of a video as `frame0000.ppm`, `frame0001.ppm`, ...
/// under `dir`, creating the directory if needed. Returns the paths written.
pub fn write_frames(video: &FlowVideo, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::with_capacity(video.frames.len());
    for (idx, frame) in video.frames.iter().enumerate() {
        let path = dir.join(format!("frame{idx:04}.ppm"));
        frame.write_ppm(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
