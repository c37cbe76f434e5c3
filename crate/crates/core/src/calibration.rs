//! Per-pixel response curves from gray-filter calibration stacks.
//!
//! Each calibration level `j` is an exposure of the empty field through a
//! gray filter, recorded alongside a spectrometer reading of the light. For
//! a pixel of channel `c` the level contributes one point `(M, S)`: `M` is the
//! pixel's mean raw value over the level's exposures and `S` is the measured
//! spectrum integrated against the channel's quantum efficiency. Correction
//! maps a raw value through the pixel's piecewise-linear `S(M)`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::plane::Plane;
use crate::raster::RasterImage;
use crate::spectral::{simpson_integrate, WavelengthGrid};

pub const DEFAULT_BRIGHT_PERCENTILE: f64 = 0.99;

/// Colour filter layout of the sensor, named by its top-left 2×2 block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
    /// No colour filter; every pixel is channel 0.
    Mono,
}

impl BayerPattern {
    pub fn channel_count(self) -> usize {
        match self {
            BayerPattern::Mono => 1,
            _ => 3,
        }
    }

    /// Channel index (0 = R, 1 = G, 2 = B) of sensor pixel `(y, x)`.
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        let cell = (y % 2) * 2 + x % 2;
        let layout: [usize; 4] = match self {
            BayerPattern::Rggb => [0, 1, 1, 2],
            BayerPattern::Bggr => [2, 1, 1, 0],
            BayerPattern::Grbg => [1, 0, 2, 1],
            BayerPattern::Gbrg => [1, 2, 0, 1],
            BayerPattern::Mono => return 0,
        };
        layout[cell]
    }
}

/// One sensor readout in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub pattern: BayerPattern,
    pub values: Plane<f64>,
}

/// Sidecar describing a flat little-endian `u16` frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub height: usize,
    pub width: usize,
    pub bit_depth: u32,
    pub bayer_pattern: BayerPattern,
}

impl RawFrame {
    pub fn new(pattern: BayerPattern, values: Plane<f64>) -> Self {
        Self { pattern, values }
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    /// Reads a 16-bit grayscale PNG, or a `.raw`/`.bin` file described by a
    /// sibling `<file>.json` sidecar. PNGs carry no pattern, so `pattern` is used.
    pub fn load(path: impl AsRef<Path>, pattern: BayerPattern) -> Result<Self> {
        let path = path.as_ref();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let (h, w, data) = image_io::read_gray16(path)?;
            return Ok(Self::new(
                pattern,
                Plane::from_vec(h, w, data.into_iter().map(f64::from).collect()),
            ));
        }
        let sidecar_path = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: RawSidecar = serde_json::from_str(&text)?;
        if !(1..=16).contains(&sidecar.bit_depth) {
            return Err(Error::format("raw sidecar", "bit depth must lie in 1..=16"));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = sidecar.height * sidecar.width;
        if bytes.len() != 2 * n {
            return Err(Error::format(
                "raw frame",
                format!("{} bytes for {}x{} u16 pixels", bytes.len(), sidecar.height, sidecar.width),
            ));
        }
        let limit = (1u32 << sidecar.bit_depth) - 1;
        let mut values = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(2) {
            let v = u16::from_le_bytes([chunk[0], chunk[1]]);
            if u32::from(v) > limit {
                return Err(Error::format("raw frame", format!("value {v} exceeds the bit depth")));
            }
            values.push(f64::from(v));
        }
        Ok(Self::new(
            sidecar.bayer_pattern,
            Plane::from_vec(sidecar.height, sidecar.width, values),
        ))
    }

    /// Writes the flat binary form plus its sidecar. Values are rounded to `u16`.
    pub fn save_raw(&self, path: impl AsRef<Path>, bit_depth: u32) -> Result<()> {
        let path = path.as_ref();
        let sidecar = RawSidecar {
            height: self.height(),
            width: self.width(),
            bit_depth,
            bayer_pattern: self.pattern,
        };
        let bytes: Vec<u8> = self
            .values
            .as_slice()
            .iter()
            .flat_map(|v| (v.round().clamp(0.0, u16::MAX as f64) as u16).to_le_bytes())
            .collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar_path = sidecar_path(path);
        std::fs::write(&sidecar_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&sidecar_path, e))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Per-channel QE-weighted integrals `S[level][channel]` of the measured spectra.
///
/// All curves are sampled on `grid`.
pub fn level_integrals(spectra: &[Vec<f64>], qe: &[Vec<f64>], grid: &WavelengthGrid) -> Result<Vec<Vec<f64>>> {
    spectra
        .iter()
        .map(|spectrum| {
            qe.iter()
                .map(|q| {
                    if q.len() != spectrum.len() {
                        return Err(Error::contract("spectrum and efficiency curve lengths differ"));
                    }
                    let weighted: Vec<f64> = spectrum.iter().zip(q).map(|(s, e)| s * e).collect();
                    simpson_integrate(&weighted, grid)
                })
                .collect()
        })
        .collect()
}

const TABLE_MAGIC: &[u8; 4] = b"QSCT";
const TABLE_FORMAT: &str = "quasispec-calibration";
pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    levels: usize,
    bayer_pattern: BayerPattern,
}

/// Per-pixel `(M, S)` nodes, sorted by `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    height: usize,
    width: usize,
    levels: usize,
    pattern: BayerPattern,
    m: Vec<f64>,
    s: Vec<f64>,
    valid: Plane<bool>,
}

impl CalibrationTable {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn pattern(&self) -> BayerPattern {
        self.pattern
    }

    pub fn valid(&self) -> &Plane<bool> {
        &self.valid
    }

    /// `(M, S)` nodes of pixel `(y, x)`.
    pub fn points(&self, y: usize, x: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let start = (y * self.width + x) * self.levels;
        self.m[start..start + self.levels]
            .iter()
            .copied()
            .zip(self.s[start..start + self.levels].iter().copied())
    }

    /// Largest `S` over valid pixels; the rescale constant of [`correct_frame`].
    pub fn max_s(&self) -> f64 {
        (0..self.height * self.width)
            .filter(|i| self.valid.as_slice()[*i])
            .flat_map(|i| self.s[i * self.levels..(i + 1) * self.levels].iter().copied())
            .fold(0.0, f64::max)
    }

    /// `S(M)` of pixel `(y, x)` and whether `m` lay inside the covered range.
    pub fn evaluate(&self, y: usize, x: usize, m: f64) -> (f64, bool) {
        let start = (y * self.width + x) * self.levels;
        let ms = &self.m[start..start + self.levels];
        let ss = &self.s[start..start + self.levels];
        let last = self.levels - 1;
        let inside = m >= ms[0] && m <= ms[last];
        let seg = match ms.partition_point(|v| *v <= m) {
            0 => 0,
            k if k > last => last - 1,
            k => k - 1,
        };
        if m == ms[seg] {
            return (ss[seg], inside);
        }
        let t = (m - ms[seg]) / (ms[seg + 1] - ms[seg]);
        (ss[seg] + t * (ss[seg + 1] - ss[seg]), inside)
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = TableHeader {
            format: TABLE_FORMAT.to_string(),
            version: TABLE_FORMAT_VERSION,
            height: self.height,
            width: self.width,
            levels: self.levels,
            bayer_pattern: self.pattern,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + 16 * self.m.len() + self.valid.len());
        buf.extend_from_slice(TABLE_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in self.m.iter().chain(&self.s) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.valid.as_slice().iter().map(|v| *v as u8));
        out.write_all(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("calibration table", reason);
        if bytes.len() < 8 || &bytes[..4] != TABLE_MAGIC {
            return Err(bad("missing magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8 + header_len..)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: TableHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
        if header.format != TABLE_FORMAT || header.version != TABLE_FORMAT_VERSION {
            return Err(bad(format!("unsupported {} version {}", header.format, header.version)));
        }
        let n = header.height * header.width;
        let k = n * header.levels;
        if body.len() != 16 * k + n {
            return Err(bad(format!("payload is {} bytes, expected {}", body.len(), 16 * k + n)));
        }
        let floats: Vec<f64> = body[..16 * k]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let valid = body[16 * k..].iter().map(|b| *b != 0).collect();
        let table = Self {
            height: header.height,
            width: header.width,
            levels: header.levels,
            pattern: header.bayer_pattern,
            m: floats[..k].to_vec(),
            s: floats[k..].to_vec(),
            valid: Plane::from_vec(header.height, header.width, valid),
        };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::contract("calibration needs at least two levels"));
        }
        for i in 0..self.height * self.width {
            if !self.valid.as_slice()[i] {
                continue;
            }
            let ms = &self.m[i * self.levels..(i + 1) * self.levels];
            let ss = &self.s[i * self.levels..(i + 1) * self.levels];
            if ms.windows(2).any(|p| !(p[0] < p[1])) || ss.windows(2).any(|p| p[0] > p[1]) {
                return Err(Error::format(
                    "calibration table",
                    format!("pixel {i} is flagged valid but not monotone"),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Builds the table from one exposure stack per calibration level.
///
/// `integrals[level][channel]` comes from [`level_integrals`]. Pixels whose
/// mean raw value does not rise strictly with `S` are flagged invalid.
pub fn build_table(stacks: &[Vec<RawFrame>], integrals: &[Vec<f64>], pattern: BayerPattern) -> Result<CalibrationTable> {
    let levels = stacks.len();
    if levels < 2 {
        return Err(Error::contract("calibration needs at least two levels"));
    }
    if integrals.len() != levels {
        return Err(Error::contract("need one measured spectrum per calibration level"));
    }
    if integrals.iter().any(|s| s.len() < pattern.channel_count()) {
        return Err(Error::contract("missing efficiency curve for a channel of the pattern"));
    }
    let first = stacks
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::contract("calibration level without frames"))?;
    let (h, w) = (first.height(), first.width());
    for stack in stacks {
        if stack.is_empty() {
            return Err(Error::contract("calibration level without frames"));
        }
        if stack.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::contract("calibration frames differ in size"));
        }
    }
    let means: Vec<Vec<f64>> = stacks
        .iter()
        .map(|stack| {
            let mut acc = vec![0.0; h * w];
            for frame in stack {
                for (a, v) in acc.iter_mut().zip(frame.values.as_slice()) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / stack.len() as f64).collect()
        })
        .collect();

    let mut m = Vec::with_capacity(h * w * levels);
    let mut s = Vec::with_capacity(h * w * levels);
    let mut valid = Plane::filled(h, w, true);
    let mut nodes: Vec<(f64, f64)> = Vec::with_capacity(levels);
    for y in 0..h {
        for x in 0..w {
            let c = pattern.channel_at(y, x);
            let i = y * w + x;
            nodes.clear();
            nodes.extend((0..levels).map(|j| (means[j][i], integrals[j][c])));
            // Order by light level; the raw response must follow it strictly.
            nodes.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
            let monotone = nodes.windows(2).all(|p| p[0].0 < p[1].0 && p[0].1 < p[1].1);
            if !monotone {
                valid[(y, x)] = false;
                nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            m.extend(nodes.iter().map(|n| n.0));
            s.extend(nodes.iter().map(|n| n.1));
        }
    }
    Ok(CalibrationTable {
        height: h,
        width: w,
        levels,
        pattern,
        m,
        s,
        valid,
    })
}

/// Corrected single-channel mosaic, divided by the table's largest `S`.
///
/// Values outside a pixel's calibrated range are extrapolated along the
/// nearest segment and masked; invalid table pixels are masked and set to 0.
pub fn correct_frame(raw: &RawFrame, table: &CalibrationTable) -> Result<RasterImage> {
    if raw.height() != table.height || raw.width() != table.width {
        return Err(Error::contract("frame and calibration table sizes differ"));
    }
    let scale = table.max_s();
    if !(scale > 0.0) {
        return Err(Error::DegenerateData("calibration table has no positive S".into()));
    }
    let (h, w) = (table.height, table.width);
    let mut mask = Plane::filled(h, w, true);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if !table.valid[(y, x)] {
                mask[(y, x)] = false;
                values.push(0.0);
                continue;
            }
            let (v, inside) = table.evaluate(y, x, raw.values[(y, x)]);
            if !inside || v < 0.0 {
                mask[(y, x)] = false;
            }
            values.push((v / scale).max(0.0));
        }
    }
    RasterImage::new(h, w, 1, values, mask)
}

/// Averages each 2×2 Bayer cell into one RGB pixel (the two greens are averaged).
///
/// A superpixel is masked if any of its four sensor pixels is. Odd trailing
/// rows and columns are dropped.
pub fn superpixel_rgb(mosaic: &RasterImage, pattern: BayerPattern) -> Result<RasterImage> {
    if pattern == BayerPattern::Mono {
        return Err(Error::contract("a monochrome sensor has no colour cells"));
    }
    if mosaic.channels() != 1 {
        return Err(Error::contract("superpixels need a single-channel mosaic"));
    }
    let (h, w) = (mosaic.height() / 2, mosaic.width() / 2);
    if h == 0 || w == 0 {
        return Err(Error::contract("mosaic smaller than one Bayer cell"));
    }
    let mut values = Vec::with_capacity(h * w * 3);
    let mut mask = Plane::filled(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            let mut count = [0usize; 3];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (sy, sx) = (2 * y + dy, 2 * x + dx);
                let c = pattern.channel_at(sy, sx);
                acc[c] += mosaic.value(sy, sx, 0);
                count[c] += 1;
                if !mosaic.is_valid(sy, sx) {
                    mask[(y, x)] = false;
                }
            }
            values.extend((0..3).map(|c| acc[c] / count[c] as f64));
        }
    }
    RasterImage::new(h, w, 3, values, mask)
}

/// Lower-interpolated quantile of an unsorted sample.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Masks pixels with any channel above that channel's `percentile`
/// quantile, then stretches each channel so the largest surviving value
/// returns to the channel's original maximum.
pub fn mask_bright_pixels(image: &RasterImage, percentile_q: f64) -> Result<RasterImage> {
    if !(percentile_q > 0.0 && percentile_q < 1.0) {
        return Err(Error::contract(format!("percentile must lie in (0, 1), got {percentile_q}")));
    }
    let valid: Vec<usize> = (0..image.pixel_count())
        .filter(|i| image.mask().as_slice()[*i])
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let channels = image.channels();
    let mut thresholds = Vec::with_capacity(channels);
    let mut original_max = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut column: Vec<f64> = valid.iter().map(|i| image.pixel_at(*i)[c]).collect();
        thresholds.push(percentile(&mut column, percentile_q));
        original_max.push(*column.last().unwrap());
    }
    let mut out = image.clone();
    for &i in &valid {
        if image.pixel_at(i).iter().zip(&thresholds).any(|(v, t)| v > t) {
            out.mask_mut().as_mut_slice()[i] = false;
        }
    }
    let survivors: Vec<usize> = valid.into_iter().filter(|i| out.mask().as_slice()[*i]).collect();
    for c in 0..channels {
        let kept_max = survivors.iter().map(|i| image.pixel_at(*i)[c]).fold(0.0, f64::max);
        if kept_max > 0.0 {
            let factor = original_max[c] / kept_max;
            for v in out.intensities_mut().iter_mut().skip(c).step_by(channels) {
                *v *= factor;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Affine sensor `M = g·E + o` per pixel, E from `integrals[level][channel]`.
    fn affine_stack(
        gain: &Plane<f64>,
        offset: &Plane<f64>,
        pattern: BayerPattern,
        exposure: impl Fn(usize) -> f64,
    ) -> RawFrame {
        let values = Plane::from_fn(gain.height(), gain.width(), |y, x| {
            gain[(y, x)] * exposure(pattern.channel_at(y, x)) + offset[(y, x)]
        });
        RawFrame::new(pattern, values)
    }

    fn random_sensor(h: usize, w: usize, seed: u64) -> (Plane<f64>, Plane<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = Plane::from_fn(h, w, |_, _| rng.random_range(200.0..900.0));
        let offset = Plane::from_fn(h, w, |_, _| rng.random_range(10.0..300.0));
        (gain, offset)
    }

    #[test]
    fn bayer_layouts() {
        assert_eq!(
            [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(y, x)| BayerPattern::Rggb.channel_at(y, x)),
            [0, 1, 1, 2]
        );
        assert_eq!(BayerPattern::Bggr.channel_at(3, 3), 0);
        assert_eq!(BayerPattern::Grbg.channel_at(0, 1), 0);
        assert_eq!(BayerPattern::Gbrg.channel_at(1, 0), 0);
        assert_eq!(BayerPattern::Mono.channel_at(1, 1), 0);
    }

    #[test]
    fn qe_weighting_changes_blue_integral_for_non_flat_light() {
        let grid = WavelengthGrid::new(380.0, 780.0, 401).unwrap();
        let spectrum = grid.sample(|l| (l - 380.0) / 400.0);
        let blue = grid.sample(|l| (-((l - 465.0) / 30.0f64).powi(2) / 2.0).exp());
        let weighted = level_integrals(&[spectrum.clone()], &[blue.clone()], &grid).unwrap()[0][0];
        // Oracle: the unweighted integral scaled by the blue curve's own mass.
        let unweighted = simpson_integrate(&spectrum, &grid).unwrap();
        let qe_mass = simpson_integrate(&blue, &grid).unwrap();
        let flat_equivalent = unweighted / 400.0 * qe_mass;
        assert!((weighted - flat_equivalent).abs() > 0.1 * weighted);
        // Flat light: weighting equals the flat level times the QE mass.
        let flat = level_integrals(&[vec![0.5; 401]], &[blue], &grid).unwrap()[0][0];
        assert!((flat - 0.5 * qe_mass).abs() < 1e-12);
    }

    #[test]
    fn two_level_linear_pixel_is_a_line() {
        let frames = vec![
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, 100.0))],
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, 300.0))],
        ];
        let table = build_table(&frames, &[vec![1.0], vec![3.0]], BayerPattern::Mono).unwrap();
        assert_eq!(table.points(0, 0).collect::<Vec<_>>(), vec![(100.0, 1.0), (300.0, 3.0)]);
        for m in [100.0, 150.0, 200.0, 300.0] {
            assert!((table.evaluate(0, 0, m).0 - m / 100.0).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_sensor_nodes_match_the_simulation() {
        let pattern = BayerPattern::Rggb;
        let (gain, offset) = random_sensor(4, 6, 1);
        let integrals: Vec<Vec<f64>> = (1..=5).map(|j| vec![0.8 * j as f64, 1.1 * j as f64, 0.6 * j as f64]).collect();
        let stacks: Vec<Vec<RawFrame>> = integrals
            .iter()
            .rev()
            .map(|e| vec![affine_stack(&gain, &offset, pattern, |c| e[c])])
            .collect();
        let table = build_table(&stacks, &integrals.iter().rev().cloned().collect::<Vec<_>>(), pattern).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let c = pattern.channel_at(y, x);
                let pts: Vec<_> = table.points(y, x).collect();
                for (j, (m, s)) in pts.iter().enumerate() {
                    let e = integrals[j][c];
                    assert_eq!(*s, e);
                    assert!((m - (gain[(y, x)] * e + offset[(y, x)])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn correction_hits_nodes_and_midpoints() {
        let frames = vec![
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 2, 10.0))],
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 2, 30.0))],
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 2, 70.0))],
        ];
        let table = build_table(&frames, &[vec![1.0], vec![2.0], vec![8.0]], BayerPattern::Mono).unwrap();
        let raw = RawFrame::new(BayerPattern::Mono, Plane::from_vec(1, 2, vec![30.0, 50.0]));
        let img = correct_frame(&raw, &table).unwrap();
        assert_eq!(img.value(0, 0, 0), 2.0 / 8.0);
        assert_eq!(img.value(0, 1, 0), 5.0 / 8.0);
        assert_eq!(img.valid_count(), 2);
    }

    #[test]
    fn out_of_range_values_are_extrapolated_and_masked() {
        let frames = vec![
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 2, 10.0))],
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 2, 30.0))],
        ];
        let table = build_table(&frames, &[vec![1.0], vec![2.0]], BayerPattern::Mono).unwrap();
        let raw = RawFrame::new(BayerPattern::Mono, Plane::from_vec(1, 2, vec![50.0, 20.0]));
        let img = correct_frame(&raw, &table).unwrap();
        assert_eq!(img.value(0, 0, 0), 3.0 / 2.0);
        assert!(!img.is_valid(0, 0));
        assert!(img.is_valid(0, 1));
    }

    #[test]
    fn non_monotone_pixel_is_flagged_and_masked() {
        let level = |a: f64, b: f64| vec![RawFrame::new(BayerPattern::Mono, Plane::from_vec(1, 2, vec![a, b]))];
        let frames = vec![level(10.0, 10.0), level(20.0, 40.0), level(30.0, 35.0)];
        let table = build_table(&frames, &[vec![1.0], vec![2.0], vec![3.0]], BayerPattern::Mono).unwrap();
        assert!(table.valid()[(0, 0)]);
        assert!(!table.valid()[(0, 1)]);
        let raw = RawFrame::new(BayerPattern::Mono, Plane::from_vec(1, 2, vec![15.0, 15.0]));
        let img = correct_frame(&raw, &table).unwrap();
        assert!(!img.is_valid(0, 1));
        assert_eq!(img.value(0, 1, 0), 0.0);
    }

    #[test]
    fn affine_sensor_flat_field_is_homogenized() {
        let pattern = BayerPattern::Rggb;
        let (gain, offset) = random_sensor(16, 16, 7);
        let levels: Vec<Vec<f64>> = [0.1, 0.3, 0.55, 0.8, 1.0]
            .iter()
            .map(|a| vec![a * 1.3, a * 2.0, a * 0.9])
            .collect();
        let stacks: Vec<Vec<RawFrame>> = levels
            .iter()
            .map(|e| vec![affine_stack(&gain, &offset, pattern, |c| e[c])])
            .collect();
        let table = build_table(&stacks, &levels, pattern).unwrap();
        let flat = [0.67 * 1.3, 0.67 * 2.0, 0.67 * 0.9];
        let img = correct_frame(&affine_stack(&gain, &offset, pattern, |c| flat[c]), &table).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..16)
                .flat_map(|y| (0..16).map(move |x| (y, x)))
                .filter(|(y, x)| pattern.channel_at(*y, *x) == c)
                .map(|(y, x)| img.value(y, x, 0))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(sd / mean < 1e-9, "channel {c}: cv {}", sd / mean);
            assert!((mean - flat[c] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_sensor_correction_is_a_global_rescale() {
        let levels: Vec<Vec<f64>> = [1.0, 2.0, 4.0].iter().map(|v| vec![*v]).collect();
        let stacks: Vec<Vec<RawFrame>> = levels
            .iter()
            .map(|e| vec![RawFrame::new(BayerPattern::Mono, Plane::filled(2, 2, e[0]))])
            .collect();
        let table = build_table(&stacks, &levels, BayerPattern::Mono).unwrap();
        let raw = RawFrame::new(BayerPattern::Mono, Plane::from_vec(2, 2, vec![1.0, 1.5, 3.0, 4.0]));
        let img = correct_frame(&raw, &table).unwrap();
        assert_eq!(img.intensities(), &[0.25, 0.375, 0.75, 1.0]);
    }

    #[test]
    fn temporal_stack_is_averaged() {
        let stacks = vec![
            vec![
                RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, 9.0)),
                RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, 11.0)),
            ],
            vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, 20.0))],
        ];
        let table = build_table(&stacks, &[vec![1.0], vec![2.0]], BayerPattern::Mono).unwrap();
        assert_eq!(table.points(0, 0).next(), Some((10.0, 1.0)));
    }

    #[test]
    fn table_file_round_trip() {
        let (gain, offset) = random_sensor(3, 4, 2);
        let levels: Vec<Vec<f64>> = (1..=3).map(|j| vec![j as f64; 3]).collect();
        let stacks: Vec<Vec<RawFrame>> = levels
            .iter()
            .map(|e| vec![affine_stack(&gain, &offset, BayerPattern::Grbg, |c| e[c])])
            .collect();
        let table = build_table(&stacks, &levels, BayerPattern::Grbg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qsct");
        table.save(&path).unwrap();
        assert_eq!(CalibrationTable::load(&path).unwrap(), table);
        let bytes = std::fs::read(&path).unwrap();
        assert!(CalibrationTable::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn raw_frame_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values = Plane::from_vec(2, 3, vec![0.0, 1.0, 513.0, 4095.0, 7.0, 100.0]);
        let frame = RawFrame::new(BayerPattern::Bggr, values.clone());
        let bin = dir.path().join("f.raw");
        frame.save_raw(&bin, 12).unwrap();
        assert_eq!(RawFrame::load(&bin, BayerPattern::Mono).unwrap(), frame);

        let png = dir.path().join("f.png");
        let words: Vec<u16> = values.as_slice().iter().map(|v| *v as u16).collect();
        image_io::write_gray16(&png, 2, 3, &words).unwrap();
        assert_eq!(RawFrame::load(&png, BayerPattern::Bggr).unwrap(), frame);

        frame.save_raw(&bin, 8).unwrap();
        assert!(RawFrame::load(&bin, BayerPattern::Mono).is_err());
    }

    #[test]
    fn superpixels_average_the_greens() {
        let mosaic = RasterImage::unmasked(2, 4, 1, vec![0.9, 0.4, 0.8, 0.2, 0.6, 0.1, 0.4, 0.3]).unwrap();
        let rgb = superpixel_rgb(&mosaic, BayerPattern::Rggb).unwrap();
        assert_eq!((rgb.height(), rgb.width()), (1, 2));
        assert_eq!(rgb.pixel(0, 0), &[0.9, 0.5, 0.1]);
        let masked = mosaic.with_mask(Plane::from_vec(2, 4, vec![true, true, true, true, true, true, true, false])).unwrap();
        let rgb = superpixel_rgb(&masked, BayerPattern::Rggb).unwrap();
        assert!(rgb.is_valid(0, 0) && !rgb.is_valid(0, 1));
    }

    #[test]
    fn flat_image_is_untouched_by_bright_masking() {
        let img = RasterImage::unmasked(4, 4, 3, vec![0.5; 48]).unwrap();
        assert_eq!(mask_bright_pixels(&img, 0.99).unwrap(), img);
    }

    #[test]
    fn single_hot_pixel_is_masked() {
        let mut values = vec![0.1; 10 * 10 * 3];
        values[3 * 37..3 * 37 + 3].fill(1.0);
        let img = RasterImage::unmasked(10, 10, 3, values).unwrap();
        let out = mask_bright_pixels(&img, 0.99).unwrap();
        assert!(!out.mask().as_slice()[37]);
        assert_eq!(out.valid_count(), 99);
        // Survivors stretched so their maximum returns to the original one.
        assert!((out.pixel_at(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_noise_loses_about_one_percent_per_channel_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = RasterImage::from_fn(256, 256, 1, |_, _, _| rng.random::<f64>()).unwrap();
        let out = mask_bright_pixels(&img, 0.99).unwrap();
        let frac = 1.0 - out.valid_count() as f64 / 65536.0;
        assert!((frac - 0.01).abs() < 0.003, "{frac}");
    }

    #[test]
    fn percentile_must_be_open_unit() {
        let img = RasterImage::unmasked(1, 1, 1, vec![0.5]).unwrap();
        for q in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(mask_bright_pixels(&img, q), Err(Error::Contract(_))));
        }
    }

    proptest! {
        #[test]
        fn interpolation_preserves_monotonicity(
            steps in proptest::collection::vec((0.5f64..50.0, 0.0f64..2.0), 2..7),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let mut m = 0.0;
            let mut s = 0.0;
            let mut stacks = Vec::new();
            let mut integrals = Vec::new();
            for (dm, ds) in &steps {
                m += dm;
                s += ds + 1e-3;
                stacks.push(vec![RawFrame::new(BayerPattern::Mono, Plane::filled(1, 1, m))]);
                integrals.push(vec![s]);
            }
            let table = build_table(&stacks, &integrals, BayerPattern::Mono).unwrap();
            prop_assert!(table.valid()[(0, 0)]);
            let (lo, hi) = (steps[0].0, m);
            let (x1, x2) = if a <= b { (a, b) } else { (b, a) };
            let v1 = table.evaluate(0, 0, lo + x1 * (hi - lo)).0;
            let v2 = table.evaluate(0, 0, lo + x2 * (hi - lo)).0;
            prop_assert!(v1 <= v2 + 1e-12);
        }
    }
}
