//! Per-pixel spectra with cost and mask, plus the on-disk cube format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! b"QSCB"            magic
//! u32                JSON header length in bytes
//! [u8]               JSON header {format, version, height, width, grid, iteration}
//! [f32; H*W*w]       spectra, row-major, samples contiguous per pixel
//! [u8; H*W]          mask (1 = valid)
//! [f32; H*W]         per-pixel cost
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::spectral::{GridSpec, Spectrum, WavelengthGrid};

const MAGIC: &[u8; 4] = b"QSCB";
const FORMAT: &str = "quasispec-cube";
pub const CUBE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    grid: WavelengthGrid,
    spectra: Vec<f64>,
    cost: Plane<f64>,
    mask: Plane<bool>,
    iteration: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeHeader {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    grid: GridSpec,
    iteration: usize,
}

impl SpectralCube {
    /// Every pixel set to `fill`, unmasked, with zero cost.
    pub fn filled(height: usize, width: usize, grid: WavelengthGrid, fill: &Spectrum) -> Result<Self> {
        if fill.len() != grid.len() {
            return Err(Error::contract("fill spectrum length differs from the grid"));
        }
        let spectra = fill
            .values()
            .iter()
            .copied()
            .cycle()
            .take(height * width * grid.len())
            .collect();
        Ok(Self {
            height,
            width,
            grid,
            spectra,
            cost: Plane::filled(height, width, 0.0),
            mask: Plane::filled(height, width, true),
            iteration: 0,
        })
    }

    pub fn from_parts(
        grid: WavelengthGrid,
        spectra: Vec<f64>,
        cost: Plane<f64>,
        mask: Plane<bool>,
        iteration: usize,
    ) -> Result<Self> {
        let (height, width) = (mask.height(), mask.width());
        if !cost.same_shape(&mask) {
            return Err(Error::contract("cost and mask dimensions differ"));
        }
        if spectra.len() != height * width * grid.len() {
            return Err(Error::contract(format!(
                "{} spectral samples for {height}x{width}x{}",
                spectra.len(),
                grid.len()
            )));
        }
        for (i, chunk) in spectra.chunks(grid.len()).enumerate() {
            if mask.as_slice()[i] && chunk.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("spectrum of pixel {i} leaves [0, 1]")));
            }
        }
        Ok(Self {
            height,
            width,
            grid,
            spectra,
            cost,
            mask,
            iteration,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    /// Samples per spectrum.
    pub fn samples(&self) -> usize {
        self.grid.len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    pub fn spectrum(&self, y: usize, x: usize) -> &[f64] {
        self.spectrum_at(y * self.width + x)
    }

    pub fn spectrum_at(&self, index: usize) -> &[f64] {
        let w = self.grid.len();
        &self.spectra[index * w..(index + 1) * w]
    }

    pub fn set_spectrum(&mut self, index: usize, spectrum: &Spectrum) {
        let w = self.grid.len();
        self.spectra[index * w..(index + 1) * w].copy_from_slice(spectrum.values());
    }

    pub fn spectra(&self) -> &[f64] {
        &self.spectra
    }

    pub fn cost(&self) -> &Plane<f64> {
        &self.cost
    }

    pub fn cost_mut(&mut self) -> &mut Plane<f64> {
        &mut self.cost
    }

    pub fn mask(&self) -> &Plane<bool> {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut Plane<bool> {
        &mut self.mask
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_slice()[index]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|m| **m).count()
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = CubeHeader {
            format: FORMAT.to_string(),
            version: CUBE_FORMAT_VERSION,
            height: self.height,
            width: self.width,
            grid: self.grid.spec(),
            iteration: self.iteration,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + self.spectra.len() * 4 + self.pixel_count() * 5);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (i, chunk) in self.spectra.chunks(self.grid.len()).enumerate() {
            let valid = self.mask.as_slice()[i];
            for v in chunk {
                let v = if valid { *v as f32 } else { 0.0 };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend(self.mask.as_slice().iter().map(|m| *m as u8));
        for c in self.cost.as_slice() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::format("cube", e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("cube", reason.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes.get(8 + header_len..).ok_or_else(|| bad("truncated header"))?;
        let header: CubeHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
        if header.format != FORMAT {
            return Err(bad("unexpected format tag"));
        }
        if header.version != CUBE_FORMAT_VERSION {
            return Err(Error::format("cube", format!("unsupported version {}", header.version)));
        }
        let grid = WavelengthGrid::try_from(header.grid)?;
        let n = header.height * header.width;
        let w = grid.len();
        let expected = n * w * 4 + n + n * 4;
        if body.len() != expected {
            return Err(Error::format(
                "cube",
                format!("payload is {} bytes, expected {expected}", body.len()),
            ));
        }
        let read_f32 = |chunk: &[u8]| f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let spectra: Vec<f64> = body[..n * w * 4].chunks_exact(4).map(read_f32).collect();
        let mask: Vec<bool> = body[n * w * 4..n * w * 4 + n].iter().map(|b| *b != 0).collect();
        let cost: Vec<f64> = body[n * w * 4 + n..].chunks_exact(4).map(read_f32).collect();
        Self::from_parts(
            grid,
            spectra,
            Plane::from_vec(header.height, header.width, cost),
            Plane::from_vec(header.height, header.width, mask),
            header.iteration,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
