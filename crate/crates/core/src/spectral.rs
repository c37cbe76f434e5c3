//! Wavelength sampling, spectra and the linear forward measurement model.
//!
//! A pixel with transparency spectrum `T` observed through channel `c` records
//! `I_c = ∫ L_c(λ) T(λ) dλ`, where `L_c` is the effective incoming light of the
//! channel (source spectrum times channel quantum efficiency). Sensor gain and
//! exposure are folded into calibration, so the relation is used as-is. All
//! predictions are divided by the white level `∫ L_c dλ`, which maps a fully
//! transparent medium to intensity 1.0 on every channel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_MIN: f64 = 450.0;
pub const DEFAULT_LAMBDA_MAX: f64 = 775.0;
pub const DEFAULT_SAMPLES: usize = 48;

/// Uniform wavelength sampling with inclusive endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct WavelengthGrid {
    lambda_min: f64,
    lambda_max: f64,
    samples: Vec<f64>,
    weights: Vec<f64>,
    simpson: Vec<f64>,
    closing: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub w: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lambda_min: DEFAULT_LAMBDA_MIN,
            lambda_max: DEFAULT_LAMBDA_MAX,
            w: DEFAULT_SAMPLES,
        }
    }
}

impl TryFrom<GridSpec> for WavelengthGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        WavelengthGrid::new(spec.lambda_min, spec.lambda_max, spec.w)
    }
}

impl From<WavelengthGrid> for GridSpec {
    fn from(grid: WavelengthGrid) -> Self {
        grid.spec()
    }
}

impl Default for WavelengthGrid {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA_MIN, DEFAULT_LAMBDA_MAX, DEFAULT_SAMPLES)
            .expect("default grid is valid")
    }
}

impl PartialEq for WavelengthGrid {
    fn eq(&self, other: &Self) -> bool {
        self.spec() == other.spec()
    }
}

impl WavelengthGrid {
    pub fn new(lambda_min: f64, lambda_max: f64, w: usize) -> Result<Self> {
        if w < 3 {
            return Err(Error::contract(format!("grid needs at least 3 samples, got {w}")));
        }
        if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) {
            return Err(Error::contract(format!(
                "grid range [{lambda_min}, {lambda_max}] is empty"
            )));
        }
        let step = (lambda_max - lambda_min) / (w - 1) as f64;
        let mut samples: Vec<f64> = (0..w).map(|i| lambda_min + step * i as f64).collect();
        samples[w - 1] = lambda_max;
        let (simpson, closing) = simpson_coefficients(w);
        let weights = simpson
            .iter()
            .zip(&closing)
            .map(|(s, c)| s * step / 3.0 + c * 3.0 * step / 8.0)
            .collect();
        Ok(Self {
            lambda_min,
            lambda_max,
            samples,
            weights,
            simpson,
            closing,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            w: self.samples.len(),
        }
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Number of samples `w`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / (self.len() - 1) as f64
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Per-sample weights equivalent to [`simpson_integrate`].
    pub fn quadrature_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Samples `f` at every grid wavelength.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.samples.iter().map(|&l| f(l)).collect()
    }
}

/// Composite Simpson coefficients for `w` uniformly spaced samples, as
/// `(simpson, three_eighths)` integer patterns; the integral is
/// `h/3 · Σ simpson·f + 3h/8 · Σ three_eighths·f`.
///
/// An odd interval count closes with the 3/8 rule over the last three
/// intervals, so every supported `w` stays exact for cubics.
fn simpson_coefficients(w: usize) -> (Vec<f64>, Vec<f64>) {
    let intervals = w - 1;
    let mut simpson = vec![0.0; w];
    let mut closing = vec![0.0; w];
    let simpson_intervals = if intervals % 2 == 0 {
        intervals
    } else {
        intervals - 3
    };
    for k in (0..simpson_intervals).step_by(2) {
        simpson[k] += 1.0;
        simpson[k + 1] += 4.0;
        simpson[k + 2] += 1.0;
    }
    if intervals % 2 == 1 {
        let s = simpson_intervals;
        closing[s] = 1.0;
        closing[s + 1] = 3.0;
        closing[s + 2] = 3.0;
        closing[s + 3] = 1.0;
    }
    (simpson, closing)
}

/// Integrates grid-sampled `values` over `[lambda_min, lambda_max]`.
pub fn simpson_integrate(values: &[f64], grid: &WavelengthGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::contract(format!(
            "{} values on a {}-sample grid",
            values.len(),
            grid.len()
        )));
    }
    let h = grid.step();
    Ok(h * dot(values, &grid.simpson) / 3.0 + 3.0 * h * dot(values, &grid.closing) / 8.0)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Transparency samples on a wavelength grid, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::contract(format!(
                "transparency sample {i} = {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    /// Clamps every sample into `[0, 1]`; NaN becomes 0.
    pub fn clamped(mut values: Vec<f64>) -> Self {
        for v in &mut values {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(values)
    }

    pub fn constant(value: f64, w: usize) -> Self {
        Self::clamped(vec![value; w])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Spectrum {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Spectrum::new(values)
    }
}

impl From<Spectrum> for Vec<f64> {
    fn from(s: Spectrum) -> Self {
        s.0
    }
}

impl AsRef<[f64]> for Spectrum {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-channel effective incoming light `L_c` sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLight {
    names: Vec<String>,
    channels: Vec<Vec<f64>>,
}

impl EffectiveLight {
    pub fn new(names: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::contract("effective light needs at least one channel"));
        }
        if names.len() != channels.len() {
            return Err(Error::contract(format!(
                "{} channel names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        let w = channels[0].len();
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != w {
                return Err(Error::contract(format!(
                    "channel {c} has {} samples, expected {w}",
                    ch.len()
                )));
            }
            if ch.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::contract(format!("channel {c} has negative samples")));
            }
            if !ch.iter().any(|v| *v > 0.0) {
                return Err(Error::DegenerateLight { channel: c });
            }
        }
        Ok(Self { names, channels })
    }

    /// Source spectrum multiplied by each channel's quantum efficiency.
    pub fn from_source(source: &[f64], qe: &[(String, Vec<f64>)]) -> Result<Self> {
        let (names, channels) = qe
            .iter()
            .map(|(name, curve)| {
                let ch = curve.iter().zip(source).map(|(q, s)| q * s).collect();
                (name.clone(), ch)
            })
            .unzip();
        if qe.iter().any(|(_, curve)| curve.len() != source.len()) {
            return Err(Error::contract("quantum efficiency and source lengths differ"));
        }
        Self::new(names, channels)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_grid(&self, grid: &WavelengthGrid) -> Result<()> {
        if self.len() != grid.len() {
            return Err(Error::contract(format!(
                "effective light has {} samples, grid has {}",
                self.len(),
                grid.len()
            )));
        }
        Ok(())
    }
}

/// White level per channel: `∫ L_c dλ`.
pub fn normalize_white(light: &EffectiveLight, grid: &WavelengthGrid) -> Result<Vec<f64>> {
    light.check_grid(grid)?;
    light
        .channels()
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            let white = simpson_integrate(ch, grid)?;
            if white > 0.0 {
                Ok(white)
            } else {
                Err(Error::DegenerateLight { channel: c })
            }
        })
        .collect()
}

/// White-normalized channel predictions for `spectrum`.
pub fn forward_predict(
    spectrum: &Spectrum,
    light: &EffectiveLight,
    grid: &WavelengthGrid,
) -> Result<Vec<f64>> {
    if spectrum.len() != grid.len() {
        return Err(Error::contract(format!(
            "spectrum has {} samples, grid has {}",
            spectrum.len(),
            grid.len()
        )));
    }
    let white = normalize_white(light, grid)?;
    light
        .channels()
        .iter()
        .zip(&white)
        .map(|(ch, w)| {
            let product: Vec<f64> = ch.iter().zip(spectrum.values()).map(|(l, t)| l * t).collect();
            Ok(simpson_integrate(&product, grid)? / w)
        })
        .collect()
}

/// The forward model with quadrature weights and white levels folded into
/// one row per channel, so a prediction is `C` dot products of length `w`.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    rows: Vec<Vec<f64>>,
    white: Vec<f64>,
}

impl ForwardModel {
    pub fn new(light: &EffectiveLight, grid: &WavelengthGrid) -> Result<Self> {
        let white = normalize_white(light, grid)?;
        let rows = light
            .channels()
            .iter()
            .zip(&white)
            .map(|(ch, wl)| {
                ch.iter()
                    .zip(grid.quadrature_weights())
                    .map(|(l, q)| l * q / wl)
                    .collect()
            })
            .collect();
        Ok(Self { rows, white })
    }

    pub fn channels(&self) -> usize {
        self.rows.len()
    }

    pub fn samples(&self) -> usize {
        self.rows[0].len()
    }

    pub fn white_levels(&self) -> &[f64] {
        &self.white
    }

    /// Row `c`: prediction of channel `c` is `row · T`.
    pub fn row(&self, c: usize) -> &[f64] {
        &self.rows[c]
    }

    #[inline]
    pub fn predict_channel(&self, c: usize, t: &[f64]) -> f64 {
        dot(&self.rows[c], t)
    }

    pub fn predict(&self, t: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(r, t)).collect()
    }
}

/// Tabulated curves: one wavelength column followed by named value columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub wavelengths: Vec<f64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl CurveTable {
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::format("curve CSV", "missing header row"))?;
        let names: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        if names.is_empty() {
            return Err(Error::format("curve CSV", "needs at least one value column"));
        }
        let mut wavelengths = Vec::new();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != names.len() + 1 {
                return Err(Error::format(
                    "curve CSV",
                    format!("row {} has {} fields, expected {}", row + 2, fields.len(), names.len() + 1),
                ));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::format("curve CSV", format!("row {}: {s:?}: {e}", row + 2)))
            };
            let lambda = parse(fields[0])?;
            if let Some(&prev) = wavelengths.last() {
                if lambda <= prev {
                    return Err(Error::format("curve CSV", "wavelengths must strictly increase"));
                }
            }
            wavelengths.push(lambda);
            for (col, field) in columns.iter_mut().zip(&fields[1..]) {
                col.push(parse(field)?);
            }
        }
        if wavelengths.len() < 2 {
            return Err(Error::format("curve CSV", "needs at least two rows"));
        }
        Ok(Self {
            wavelengths,
            columns: names.into_iter().zip(columns).collect(),
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("wavelength_nm");
        for (name, _) in &self.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, l) in self.wavelengths.iter().enumerate() {
            out.push_str(&format!("{l}"));
            for (_, col) in &self.columns {
                out.push_str(&format!(",{}", col[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Linearly interpolates column `index` onto `grid`; zero outside the table.
    pub fn resample(&self, index: usize, grid: &WavelengthGrid) -> Vec<f64> {
        let col = &self.columns[index].1;
        grid.sample(|l| interpolate(&self.wavelengths, col, l))
    }

    pub fn resample_all(&self, grid: &WavelengthGrid) -> Vec<(String, Vec<f64>)> {
        (0..self.columns.len())
            .map(|i| (self.columns[i].0.clone(), self.resample(i, grid)))
            .collect()
    }
}

pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x < xs[0] || x > xs[xs.len() - 1] {
        return 0.0;
    }
    let hi = xs.partition_point(|&v| v < x).min(xs.len() - 1);
    if hi == 0 {
        return ys[0];
    }
    let (x0, x1) = (xs[hi - 1], xs[hi]);
    let t = (x - x0) / (x1 - x0);
    ys[hi - 1] + t * (ys[hi] - ys[hi - 1])
}

/// Smooth synthetic curves resembling a phosphor white LED and a colour
/// sensor's RGB quantum efficiencies. Used for phantoms and defaults when no
/// measured curves are supplied.
pub mod presets {
    use super::*;

    fn gauss(l: f64, mu: f64, sigma: f64) -> f64 {
        (-0.5 * ((l - mu) / sigma).powi(2)).exp()
    }

    /// Blue pump plus broad phosphor emission.
    pub fn white_led(lambda: f64) -> f64 {
        0.9 * gauss(lambda, 452.0, 11.0) + 0.75 * gauss(lambda, 560.0, 55.0)
    }

    pub fn quantum_efficiency(channel: usize, lambda: f64) -> f64 {
        match channel {
            0 => 0.55 * gauss(lambda, 605.0, 38.0) + 0.08 * gauss(lambda, 720.0, 40.0),
            1 => 0.65 * gauss(lambda, 535.0, 40.0),
            2 => 0.60 * gauss(lambda, 465.0, 30.0),
            _ => panic!("synthetic sensor has three channels"),
        }
    }

    pub fn rgb_quantum_efficiency(grid: &WavelengthGrid) -> Vec<(String, Vec<f64>)> {
        ["R", "G", "B"]
            .iter()
            .enumerate()
            .map(|(c, name)| (name.to_string(), grid.sample(|l| quantum_efficiency(c, l))))
            .collect()
    }

    pub fn led_rgb_light(grid: &WavelengthGrid) -> EffectiveLight {
        EffectiveLight::from_source(&grid.sample(white_led), &rgb_quantum_efficiency(grid))
            .expect("preset curves are positive")
    }
}
