//! Synthetic scenes with known spectra, rendered through the forward model.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::raster::RasterImage;
use crate::spectral::{forward_predict, EffectiveLight, ForwardModel, GridSpec, Spectrum, WavelengthGrid};

/// How the label map is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Nearest-seed regions around uniformly placed seeds.
    Voronoi,
    /// Vertical bands of equal width.
    Stripes,
}

/// Random-walk prototype generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeParams {
    /// Range of the walk's starting level.
    pub level_min: f64,
    pub level_max: f64,
    /// Standard deviation of each walk step.
    pub step_std: f64,
    /// Width of the moving-average window applied to the walk.
    pub smoothing: usize,
    /// Minimum L2 distance between any two prototypes.
    pub separation: f64,
}

impl Default for PrototypeParams {
    fn default() -> Self {
        Self {
            level_min: 0.3,
            level_max: 0.8,
            step_std: 0.05,
            smoothing: 7,
            separation: 0.3,
        }
    }
}

/// Scene description as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub grid: GridSpec,
    pub regions: usize,
    pub layout: Layout,
    pub prototypes: PrototypeParams,
    /// Explicit prototypes; overrides the generator when non-empty.
    pub prototype_spectra: Vec<Vec<f64>>,
    /// Std of the per-sample Gaussian perturbation added to each pixel's prototype.
    pub spectral_noise: f64,
    /// Std of the additive Gaussian noise on rendered intensities.
    pub sensor_noise: f64,
    /// Number of light-condensing pixels placed at random.
    pub micro_lenses: usize,
    /// Intensity of a light-condensing pixel as a multiple of the white level.
    pub micro_lens_gain: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            grid: GridSpec::default(),
            regions: 5,
            layout: Layout::Voronoi,
            prototypes: PrototypeParams::default(),
            prototype_spectra: Vec::new(),
            spectral_noise: 0.0,
            sensor_noise: 0.0,
            micro_lenses: 0,
            micro_lens_gain: 1.2,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("phantom must have at least one pixel"));
        }
        if self.regions == 0 || self.regions > self.height * self.width {
            return Err(Error::contract("region count must lie in 1..=pixel count"));
        }
        if !self.prototype_spectra.is_empty() && self.prototype_spectra.len() != self.regions {
            return Err(Error::contract("need one explicit prototype per region"));
        }
        let p = &self.prototypes;
        if !(0.0 <= p.level_min && p.level_min <= p.level_max && p.level_max <= 1.0) {
            return Err(Error::contract("prototype levels must satisfy 0 <= min <= max <= 1"));
        }
        if p.step_std < 0.0 || p.separation < 0.0 || p.smoothing == 0 {
            return Err(Error::contract("prototype step, separation and smoothing must be non-negative/positive"));
        }
        if self.spectral_noise < 0.0 || self.sensor_noise < 0.0 {
            return Err(Error::contract("noise levels must be non-negative"));
        }
        if self.micro_lenses > self.height * self.width {
            return Err(Error::contract("more micro-lens pixels than pixels"));
        }
        if self.micro_lenses > 0 && !(self.micro_lens_gain > 1.0) {
            return Err(Error::contract("micro-lens gain must exceed 1"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A materialized scene: labels, prototypes and the light-condensing pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub labels: Plane<usize>,
    pub prototypes: Vec<Spectrum>,
    pub spectral_noise: f64,
    pub sensor_noise: f64,
    /// Flat indices of light-condensing pixels, ascending.
    pub micro_lenses: Vec<usize>,
    pub micro_lens_gain: f64,
}

/// Output of [`generate_scene`].
#[derive(Debug, Clone)]
pub struct Phantom {
    pub scene: PhantomScene,
    /// Ground truth; light-condensing pixels are masked.
    pub truth: SpectralCube,
    /// Rendered, white-normalized intensities with every pixel unmasked.
    pub image: RasterImage,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_PROTOTYPES: u64 = 2;
const STREAM_LENSES: u64 = 3;
const STREAM_PIXELS: u64 = 1 << 32;

fn label_map(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Plane<usize> {
    let (h, w, k) = (spec.height, spec.width, spec.regions);
    match spec.layout {
        Layout::Stripes => Plane::from_fn(h, w, |_, x| x * k / w),
        Layout::Voronoi => {
            // Distinct seed pixels, so every region owns at least its seed.
            let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(k);
            for index in rand::seq::index::sample(rng, h * w, k).into_iter() {
                seeds.push(((index / w) as f64, (index % w) as f64));
            }
            Plane::from_fn(h, w, |y, x| {
                let (y, x) = (y as f64, x as f64);
                let mut best = (f64::INFINITY, 0);
                for (i, (sy, sx)) in seeds.iter().enumerate() {
                    let d = (y - sy).powi(2) + (x - sx).powi(2);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
        }
    }
}

fn random_walk(params: &PrototypeParams, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = Normal::new(0.0, params.step_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut level = if params.level_max > params.level_min {
        rng.random_range(params.level_min..=params.level_max)
    } else {
        params.level_min
    };
    let mut walk = Vec::with_capacity(w);
    for _ in 0..w {
        walk.push(level);
        level = (level + step.sample(rng)).clamp(params.level_min, params.level_max);
    }
    let half = params.smoothing / 2;
    (0..w)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(w);
            (walk[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).clamp(0.0, 1.0)
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn prototypes(spec: &PhantomSpec, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Spectrum>> {
    if !spec.prototype_spectra.is_empty() {
        return spec
            .prototype_spectra
            .iter()
            .map(|p| {
                if p.len() != w {
                    return Err(Error::contract("explicit prototype length differs from the grid"));
                }
                Spectrum::new(p.clone())
            })
            .collect();
    }
    const ATTEMPTS: usize = 10_000;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.regions);
    for _ in 0..ATTEMPTS {
        if out.len() == spec.regions {
            break;
        }
        let candidate = random_walk(&spec.prototypes, w, rng);
        if out.iter().all(|p| l2(p, &candidate) >= spec.prototypes.separation) {
            out.push(candidate);
        }
    }
    if out.len() < spec.regions {
        return Err(Error::contract(format!(
            "could not draw {} prototypes separated by {}",
            spec.regions, spec.prototypes.separation
        )));
    }
    Ok(out.into_iter().map(Spectrum::clamped).collect())
}

/// Builds the scene described by `spec` and renders it through `light`.
pub fn generate_scene(spec: &PhantomSpec, light: &EffectiveLight, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let grid = WavelengthGrid::try_from(spec.grid)?;
    ForwardModel::new(light, &grid)?;
    let w = grid.len();
    let (h, wd) = (spec.height, spec.width);

    let labels = label_map(spec, &mut rng_for(seed, STREAM_LAYOUT));
    let prototypes = prototypes(spec, w, &mut rng_for(seed, STREAM_PROTOTYPES))?;
    let mut micro_lenses: Vec<usize> =
        rand::seq::index::sample(&mut rng_for(seed, STREAM_LENSES), h * wd, spec.micro_lenses).into_vec();
    micro_lenses.sort_unstable();

    let mut spectra = Vec::with_capacity(h * wd * w);
    let mut intensities = Vec::with_capacity(h * wd * light.channel_count());
    let mut mask = Plane::filled(h, wd, true);
    let spectral = Normal::new(0.0, spec.spectral_noise).map_err(|e| Error::contract(e.to_string()))?;
    let sensor = Normal::new(0.0, spec.sensor_noise).map_err(|e| Error::contract(e.to_string()))?;
    for i in 0..h * wd {
        let mut rng = rng_for(seed, STREAM_PIXELS + i as u64);
        let base = prototypes[labels.as_slice()[i]].values();
        let t: Vec<f64> = if spec.spectral_noise > 0.0 {
            base.iter().map(|v| (v + spectral.sample(&mut rng)).clamp(0.0, 1.0)).collect()
        } else {
            base.to_vec()
        };
        if micro_lenses.binary_search(&i).is_ok() {
            mask.as_mut_slice()[i] = false;
            intensities.extend(std::iter::repeat_n(spec.micro_lens_gain, light.channel_count()));
        } else {
            let pred = forward_predict(&Spectrum::clamped(t.clone()), light, &grid)?;
            if spec.sensor_noise > 0.0 {
                intensities.extend(pred.into_iter().map(|v| v + sensor.sample(&mut rng)));
            } else {
                intensities.extend(pred);
            }
        }
        spectra.extend(t);
        // Keep per-pixel streams aligned whatever the branch took.
        rng.next_u32();
    }

    let truth = SpectralCube::from_parts(grid, spectra, Plane::filled(h, wd, 0.0), mask, 0)?;
    let image = RasterImage::unmasked(h, wd, light.channel_count(), intensities)?;
    Ok(Phantom {
        scene: PhantomScene {
            labels,
            prototypes,
            spectral_noise: spec.spectral_noise,
            sensor_noise: spec.sensor_noise,
            micro_lenses,
            micro_lens_gain: spec.micro_lens_gain,
        },
        truth,
        image,
    })
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Largest per-channel absolute residual over unmasked pixels.
    pub max: f64,
    /// 99th percentile of the per-pixel worst-channel residual.
    pub p99: f64,
    /// Fraction of unmasked pixels whose every channel residual is below `threshold`.
    pub fraction_below: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Pixels masked in the estimate.
    pub masked: usize,
    /// Pixels masked in the truth.
    pub expected: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Pixels unmasked in both cubes.
    pub compared: usize,
    pub median_cosine: f64,
    pub p05_cosine: f64,
    pub mean_cosine: f64,
    pub mask: MaskStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ResidualStats>,
}

/// Compares a reconstruction with ground truth.
///
/// Similarities are taken over pixels unmasked in both cubes. The mask
/// statistics treat the truth's masked pixels as the positive class.
pub fn score_reconstruction(truth: &SpectralCube, estimate: &SpectralCube) -> Result<ScoreReport> {
    if truth.height() != estimate.height() || truth.width() != estimate.width() {
        return Err(Error::contract("truth and estimate dimensions differ"));
    }
    if truth.samples() != estimate.samples() {
        return Err(Error::contract("truth and estimate sample counts differ"));
    }
    let n = truth.pixel_count();
    let mut cosines = Vec::with_capacity(n);
    let (mut masked, mut expected, mut tp) = (0, 0, 0);
    for i in 0..n {
        let (t_ok, e_ok) = (truth.is_valid(i), estimate.is_valid(i));
        masked += !e_ok as usize;
        expected += !t_ok as usize;
        tp += (!e_ok && !t_ok) as usize;
        if t_ok && e_ok {
            cosines.push(cosine_similarity(truth.spectrum_at(i), estimate.spectrum_at(i)));
        }
    }
    let mean_cosine = cosines.iter().sum::<f64>() / cosines.len().max(1) as f64;
    cosines.sort_by(f64::total_cmp);
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(ScoreReport {
        compared: cosines.len(),
        median_cosine: quantile(&cosines, 0.5),
        p05_cosine: quantile(&cosines, 0.05),
        mean_cosine,
        mask: MaskStats {
            masked,
            expected,
            true_positives: tp,
            precision: ratio(tp, masked),
            recall: ratio(tp, expected),
        },
        residuals: None,
    })
}

/// Forward residuals of `estimate` against the intensities it was fit to.
pub fn residual_stats(
    estimate: &SpectralCube,
    image: &RasterImage,
    light: &EffectiveLight,
    threshold: f64,
) -> Result<ResidualStats> {
    if estimate.height() != image.height() || estimate.width() != image.width() {
        return Err(Error::contract("cube and image dimensions differ"));
    }
    if image.channels() != light.channel_count() {
        return Err(Error::contract("image and light channel counts differ"));
    }
    let model = ForwardModel::new(light, estimate.grid())?;
    let mut worst = Vec::with_capacity(estimate.valid_count());
    for i in (0..estimate.pixel_count()).filter(|i| estimate.is_valid(*i)) {
        let pred = model.predict(estimate.spectrum_at(i));
        let r = pred
            .iter()
            .zip(image.pixel_at(i))
            .map(|(p, o)| (p - o).abs())
            .fold(0.0, f64::max);
        worst.push(r);
    }
    let below = worst.iter().filter(|r| **r < threshold).count();
    let fraction_below = if worst.is_empty() { 1.0 } else { below as f64 / worst.len() as f64 };
    worst.sort_by(f64::total_cmp);
    Ok(ResidualStats {
        max: worst.last().copied().unwrap_or(0.0),
        p99: quantile(&worst, 0.99),
        fraction_below,
        threshold,
    })
}
