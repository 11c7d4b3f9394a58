//! Dense spatiotemporal tensors and the finite-difference gradient probe.
//!
//! A tensor is an H x W x T x C volume of doubles stored channel-fastest:
//! index (i, j, k, d) lives at offset `d + C*(k + T*(j + W*i))`. Per-position
//! channel vectors are contiguous, which keeps the per-position norms of the
//! energy regularizer and the ball projection on a single cache line.
//!
//! Shapes are fixed at construction. Binary operations require identical
//! shapes and report a [`Error::ShapeMismatch`] otherwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the binary tensor container.
pub const STT_MAGIC: &[u8; 5] = b"STT1\n";

/// Dense H x W x T x C volume of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatiotemporalTensor {
    h: usize,
    w: usize,
    t: usize,
    c: usize,
    data: Vec<f64>,
}

fn check_dims(h: usize, w: usize, t: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 || t == 0 || c == 0 {
        return Err(Error::InvalidShape {
            message: format!("dimensions must be positive, got {h}x{w}x{t}x{c}"),
        });
    }
    Ok(())
}

impl SpatiotemporalTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(h: usize, w: usize, t: usize, c: usize) -> Result<Self> {
        check_dims(h, w, t, c)?;
        Ok(Self {
            h,
            w,
            t,
            c,
            data: vec![0.0; h * w * t * c],
        })
    }

    /// Wraps an existing buffer laid out channel-fastest. Rejects length
    /// mismatches and non-finite entries.
    pub fn from_vec(h: usize, w: usize, t: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(h, w, t, c)?;
        let expected = h * w * t * c;
        if data.len() != expected {
            return Err(Error::InvalidShape {
                message: format!(
                    "buffer length {} does not match {h}x{w}x{t}x{c} = {expected}",
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: format!("tensor construction (flat index {pos})"),
            });
        }
        Ok(Self { h, w, t, c, data })
    }

    /// Fills a tensor from a per-coordinate function.
    pub fn from_fn<F>(h: usize, w: usize, t: usize, c: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, usize) -> f64,
    {
        check_dims(h, w, t, c)?;
        let mut data = Vec::with_capacity(h * w * t * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..t {
                    for d in 0..c {
                        data.push(f(i, j, k, d));
                    }
                }
            }
        }
        Self::from_vec(h, w, t, c, data)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.h, self.w, self.t, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize, d: usize) -> usize {
        debug_assert!(i < self.h && j < self.w && k < self.t && d < self.c);
        d + self.c * (k + self.t * (j + self.w * i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, d: usize) -> f64 {
        self.data[self.offset(i, j, k, d)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, d: usize, value: f64) {
        let at = self.offset(i, j, k, d);
        self.data[at] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    /// The layout makes an H x W x T x C motion tensor and its H x W x 1 x TC
    /// stacked-channel view share bytes, so this is how the network boundary
    /// folds frames into channels and back.
    pub(crate) fn reshaped(&self, h: usize, w: usize, t: usize, c: usize) -> Result<Self> {
        check_dims(h, w, t, c)?;
        if h * w * t * c != self.data.len() {
            return Err(Error::InvalidShape {
                message: format!(
                    "cannot view {}x{}x{}x{} as {h}x{w}x{t}x{c}",
                    self.h, self.w, self.t, self.c
                ),
            });
        }
        Ok(Self {
            h,
            w,
            t,
            c,
            data: self.data.clone(),
        })
    }

    fn require_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: [self.h, self.w, self.t, self.c],
                right: [other.h, other.w, other.t, other.c],
            });
        }
        Ok(())
    }

    /// Sum of one feature channel over all positions and frames.
    pub fn channel_sum(&self, channel: usize) -> Result<f64> {
        if channel >= self.c {
            return Err(Error::ChannelOutOfRange {
                channel,
                channels: self.c,
            });
        }
        Ok(self.data[channel..].iter().step_by(self.c).sum())
    }

    /// Spatial rotation by (dy, dx), wrapping around both borders:
    /// `result(i, j, k, d) = self((i - dy) mod H, (j - dx) mod W, k, d)`.
    /// Exactly invertible by shifting back with (-dy, -dx).
    pub fn circular_shift(&self, dy: i64, dx: i64) -> Self {
        let run = self.t * self.c;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.h {
            let src_i = (i as i64 - dy).rem_euclid(self.h as i64) as usize;
            for j in 0..self.w {
                let src_j = (j as i64 - dx).rem_euclid(self.w as i64) as usize;
                let dst = run * (j + self.w * i);
                let src = run * (src_j + self.w * src_i);
                data[dst..dst + run].copy_from_slice(&self.data[src..src + run]);
            }
        }
        Self {
            h: self.h,
            w: self.w,
            t: self.t,
            c: self.c,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            t: self.t,
            c: self.c,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.require_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            h: self.h,
            w: self.w,
            t: self.t,
            c: self.c,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.require_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            h: self.h,
            w: self.w,
            t: self.t,
            c: self.c,
            data,
        })
    }

    /// In-place `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) -> Result<()> {
        self.require_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest per-position channel-vector norm; the quantity the energy
    /// barrier and the ball projection constrain.
    pub fn max_position_channel_norm(&self) -> f64 {
        let mut worst = 0.0f64;
        for chunk in self.data.chunks_exact(self.c) {
            let sq: f64 = chunk.iter().map(|v| v * v).sum();
            worst = worst.max(sq);
        }
        worst.sqrt()
    }

    /// Serializes to the binary container: `STT1\n`, an ASCII `H W T C\n`
    /// header, then the raw buffer as little-endian doubles.
    pub fn to_stt_bytes(&self) -> Vec<u8> {
        let header = format!("{} {} {} {}\n", self.h, self.w, self.t, self.c);
        let mut out = Vec::with_capacity(STT_MAGIC.len() + header.len() + self.data.len() * 8);
        out.extend_from_slice(STT_MAGIC);
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary container. Errors carry the byte offset of the
    /// first malformed content.
    pub fn from_stt_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        if bytes.len() < STT_MAGIC.len() || &bytes[..STT_MAGIC.len()] != STT_MAGIC {
            return Err(Error::format_at_offset(path, 0, "missing STT1 magic"));
        }
        let header_start = STT_MAGIC.len();
        let header_end = bytes[header_start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| header_start + p)
            .ok_or_else(|| {
                Error::format_at_offset(path, header_start as u64, "unterminated shape header")
            })?;
        let header = std::str::from_utf8(&bytes[header_start..header_end]).map_err(|_| {
            Error::format_at_offset(path, header_start as u64, "shape header is not ASCII")
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    Error::format_at_offset(
                        path,
                        header_start as u64,
                        format!("bad shape token '{tok}'"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(Error::format_at_offset(
                path,
                header_start as u64,
                format!("expected 4 shape fields, found {}", dims.len()),
            ));
        }
        let (h, w, t, c) = (dims[0], dims[1], dims[2], dims[3]);
        check_dims(h, w, t, c).map_err(|_| {
            Error::format_at_offset(path, header_start as u64, "zero dimension in shape header")
        })?;
        let count = h * w * t * c;
        let data_start = header_end + 1;
        let need = count * 8;
        if bytes.len() - data_start < need {
            return Err(Error::format_at_offset(
                path,
                bytes.len() as u64,
                format!(
                    "truncated payload: need {need} bytes of data, found {}",
                    bytes.len() - data_start
                ),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for idx in 0..count {
            let at = data_start + idx * 8;
            let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format_at_offset(
                    path,
                    at as u64,
                    format!("non-finite value {v} in payload"),
                ));
            }
            data.push(v);
        }
        Ok(Self { h, w, t, c, data })
    }

    pub fn write_stt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_stt_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_stt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_stt_bytes(&bytes, &path.display().to_string())
    }
}

/// Central-difference gradient of a scalar function of the tensor, probed at
/// every coordinate: `(f(x + h e) - f(x - h e)) / 2h`.
///
/// This is the reference every analytic gradient in the crate is checked
/// against; it never shares code with the backward passes.
pub fn finite_difference_gradient<F>(
    mut f: F,
    at: &SpatiotemporalTensor,
    step: f64,
) -> Result<SpatiotemporalTensor>
where
    F: FnMut(&SpatiotemporalTensor) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::config(format!(
            "finite-difference step must be positive and finite, got {step}"
        )));
    }
    let mut probe = at.clone();
    let mut grad = vec![0.0; at.len()];
    for idx in 0..at.len() {
        let base = at.data[idx];
        probe.data[idx] = base + step;
        let plus = f(&probe);
        probe.data[idx] = base - step;
        let minus = f(&probe);
        probe.data[idx] = base;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue {
                context: format!("finite-difference probe at flat index {idx}"),
            });
        }
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    SpatiotemporalTensor::from_vec(at.h, at.w, at.t, at.c, grad)
}
