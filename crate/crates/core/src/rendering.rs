//! Re-illumination of a spectral cube and conversion to display RGB.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::image_io;
use crate::plane::Plane;
use crate::spectral::{simpson_integrate, CurveTable, WavelengthGrid};

const CIE_1931_2DEG: &str = include_str!("../assets/cie1931_2deg.csv");

const PLANCK: f64 = 6.626_070_15e-34;
const LIGHT_SPEED: f64 = 299_792_458.0;
const BOLTZMANN: f64 = 1.380_649e-23;

/// Wien displacement constant in nm·K.
pub const WIEN_NM_K: f64 = 2.897_771_955e6;

/// Linear sRGB from XYZ, D65 white.
const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

/// Light source spectrum sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Illuminant {
    pub name: String,
    values: Vec<f64>,
}

impl Illuminant {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract("illuminant values must be finite and non-negative"));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::contract("illuminant is identically zero"));
        }
        Ok(Self { name: name.into(), values })
    }

    /// First value column of a curve CSV, resampled onto `grid`.
    pub fn from_csv(path: impl AsRef<Path>, grid: &WavelengthGrid) -> Result<Self> {
        let table = CurveTable::load_csv(path)?;
        Self::new(table.columns[0].0.clone(), table.resample(0, grid))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Black-body spectral radiance at `lambda_nm`, SI units per metre of wavelength.
pub fn planck_radiance(lambda_nm: f64, temperature_k: f64) -> f64 {
    let l = lambda_nm * 1e-9;
    2.0 * PLANCK * LIGHT_SPEED * LIGHT_SPEED
        / l.powi(5)
        / ((PLANCK * LIGHT_SPEED / (l * BOLTZMANN * temperature_k)).exp_m1())
}

/// Black-body spectrum on `grid`, scaled to a maximum of 1.
pub fn planck_spectrum(temperature_k: f64, grid: &WavelengthGrid) -> Result<Illuminant> {
    if !(temperature_k > 0.0 && temperature_k.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature_k}")));
    }
    let raw = grid.sample(|l| planck_radiance(l, temperature_k));
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateData(format!("black body at {temperature_k} K vanishes on the grid")));
    }
    Illuminant::new(format!("planck-{temperature_k}K"), raw.into_iter().map(|v| v / max).collect())
}

/// CIE colour matching functions on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMatching {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl ColorMatching {
    /// The bundled 1 nm CIE 1931 2° observer table.
    pub fn table() -> CurveTable {
        CurveTable::parse_csv(CIE_1931_2DEG).expect("bundled CIE table parses")
    }

    /// CIE 1931 2° observer linearly resampled onto `grid`.
    pub fn cie1931(grid: &WavelengthGrid) -> Self {
        let table = Self::table();
        Self {
            x: table.resample(0, grid),
            y: table.resample(1, grid),
            z: table.resample(2, grid),
        }
    }
}

/// `(x, y)` chromaticity of a tristimulus value.
pub fn chromaticity(xyz: [f64; 3]) -> (f64, f64) {
    let sum = xyz[0] + xyz[1] + xyz[2];
    if sum == 0.0 {
        return (0.0, 0.0);
    }
    (xyz[0] / sum, xyz[1] / sum)
}

/// Tristimulus values per pixel, scaled so a fully transparent pixel has `Y = 1`.
/// Masked pixels are `None`.
pub fn render_xyz(
    cube: &SpectralCube,
    illuminant: &Illuminant,
    matching: &ColorMatching,
) -> Result<Plane<Option<[f64; 3]>>> {
    let grid = cube.grid();
    let w = grid.len();
    if illuminant.values.len() != w || matching.x.len() != w || matching.y.len() != w || matching.z.len() != w {
        return Err(Error::contract("illuminant or matching curves are not on the cube's grid"));
    }
    // Fold illuminant and quadrature weights into one row per coordinate.
    let rows: Vec<Vec<f64>> = [&matching.x, &matching.y, &matching.z]
        .iter()
        .map(|cmf| {
            let weighted: Vec<f64> = cmf.iter().zip(&illuminant.values).map(|(c, e)| c * e).collect();
            weighted
                .iter()
                .zip(grid.quadrature_weights())
                .map(|(v, q)| v * q)
                .collect()
        })
        .collect();
    let white_integrand: Vec<f64> = matching.y.iter().zip(&illuminant.values).map(|(c, e)| c * e).collect();
    let white_y = simpson_integrate(&white_integrand, grid)?;
    if !(white_y > 0.0) {
        return Err(Error::DegenerateData("illuminant has no luminance on this grid".into()));
    }
    Ok(Plane::from_fn(cube.height(), cube.width(), |y, x| {
        if !cube.mask()[(y, x)] {
            return None;
        }
        let t = cube.spectrum(y, x);
        let mut xyz = [0.0; 3];
        for (out, row) in xyz.iter_mut().zip(&rows) {
            *out = row.iter().zip(t).map(|(r, v)| r * v).sum::<f64>() / white_y;
        }
        Some(xyz)
    }))
}

fn srgb_encode(linear: f64) -> f64 {
    let v = linear.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Gamma-encoded 8-bit sRGB of one tristimulus value.
pub fn xyz_to_srgb8(xyz: [f64; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(XYZ_TO_SRGB.iter()) {
        let linear = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        *o = (srgb_encode(linear) * 255.0).round() as u8;
    }
    out
}

/// 8-bit RGB, pixel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image_io::write_rgb8(path, self.height, self.width, &self.data)
    }
}

/// Renders the cube as seen under `illuminant`; masked pixels are black.
pub fn render(cube: &SpectralCube, illuminant: &Illuminant, matching: &ColorMatching) -> Result<RgbImage> {
    let xyz = render_xyz(cube, illuminant, matching)?;
    let data = xyz
        .as_slice()
        .iter()
        .flat_map(|p| p.map_or([0, 0, 0], xyz_to_srgb8))
        .collect();
    Ok(RgbImage {
        height: cube.height(),
        width: cube.width(),
        data,
    })
}
