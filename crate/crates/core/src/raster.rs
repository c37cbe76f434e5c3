//! Calibrated channel intensities and their on-disk format.
//!
//! File layout (little-endian):
//!
//! ```text
//! b"QSRI"            magic
//! u32                JSON header length in bytes
//! [u8]               JSON header {format, version, height, width, channels}
//! [f64; H*W*C]       intensities, pixel-interleaved
//! [u8; H*W]          mask (1 = valid)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

const MAGIC: &[u8; 4] = b"QSRI";
const FORMAT: &str = "quasispec-raster";
pub const RASTER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    channels: usize,
}

/// Calibrated multi-channel intensities with a participation mask.
///
/// Intensities are pixel-interleaved, row-major. A `true` mask entry means
/// the pixel takes part in reconstruction and analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    intensities: Vec<f64>,
    mask: Plane<bool>,
}

impl RasterImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        intensities: Vec<f64>,
        mask: Plane<bool>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("image needs at least one channel"));
        }
        if intensities.len() != height * width * channels {
            return Err(Error::contract(format!(
                "{} intensities for a {height}x{width}x{channels} image",
                intensities.len()
            )));
        }
        if mask.height() != height || mask.width() != width {
            return Err(Error::contract("mask dimensions differ from the image"));
        }
        if intensities.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract("intensities must be finite and non-negative"));
        }
        Ok(Self {
            height,
            width,
            channels,
            intensities,
            mask,
        })
    }

    /// Every pixel unmasked.
    pub fn unmasked(height: usize, width: usize, channels: usize, intensities: Vec<f64>) -> Result<Self> {
        Self::new(height, width, channels, intensities, Plane::filled(height, width, true))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::unmasked(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    /// Channel vector of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.intensities[start..start + self.channels]
    }

    pub fn pixel_at(&self, index: usize) -> &[f64] {
        let start = index * self.channels;
        &self.intensities[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.intensities[start..start + self.channels]
    }

    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.intensities[(y * self.width + x) * self.channels + c]
    }

    pub fn mask(&self) -> &Plane<bool> {
        &self.mask
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        *self.mask.get(y, x)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|m| **m).count()
    }

    pub fn with_mask(mut self, mask: Plane<bool>) -> Result<Self> {
        if !self.mask.same_shape(&mask) {
            return Err(Error::contract("mask dimensions differ from the image"));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn mask_mut(&mut self) -> &mut Plane<bool> {
        &mut self.mask
    }

    /// One channel as a plane.
    pub fn channel_plane(&self, c: usize) -> Plane<f64> {
        Plane::from_fn(self.height, self.width, |y, x| self.value(y, x, c))
    }

    /// Mean over channels per pixel.
    pub fn channel_mean(&self) -> Plane<f64> {
        Plane::from_fn(self.height, self.width, |y, x| {
            self.pixel(y, x).iter().sum::<f64>() / self.channels as f64
        })
    }

    pub(crate) fn intensities_mut(&mut self) -> &mut [f64] {
        &mut self.intensities
    }

    /// Intensities are stored as f64 so a saved image reloads bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = RasterHeader {
            format: FORMAT.to_string(),
            version: RASTER_FORMAT_VERSION,
            height: self.height,
            width: self.width,
            channels: self.channels,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(8 + json.len() + self.intensities.len() * 8 + self.pixel_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &self.intensities {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.mask.as_slice().iter().map(|m| *m as u8));
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("raster image", reason.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes.get(8 + header_len..).ok_or_else(|| bad("truncated header"))?;
        let header: RasterHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
        if header.format != FORMAT {
            return Err(bad("unexpected format tag"));
        }
        if header.version != RASTER_FORMAT_VERSION {
            return Err(Error::format(
                "raster image",
                format!("unsupported version {}", header.version),
            ));
        }
        let n = header.height * header.width;
        let values = n * header.channels;
        if body.len() != values * 8 + n {
            return Err(Error::format(
                "raster image",
                format!("payload is {} bytes, expected {}", body.len(), values * 8 + n),
            ));
        }
        let intensities = body[..values * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = body[values * 8..].iter().map(|b| *b != 0).collect();
        Self::new(
            header.height,
            header.width,
            header.channels,
            intensities,
            Plane::from_vec(header.height, header.width, mask),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
