use crate::cube::SpectralCube;
use crate::linalg::PrincipalAxes;
use crate::plane::Plane;
use crate::raster::RasterImage;

/// Horizontal (`dx`, along columns) and vertical (`dy`, along rows) components.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientComponents {
    pub dx: Plane<f64>,
    pub dy: Plane<f64>,
}

impl GradientComponents {
    /// Euclidean merge of both axes.
    pub fn magnitude(&self) -> Plane<f64> {
        Plane::from_vec(
            self.dx.height(),
            self.dx.width(),
            self.dx
                .as_slice()
                .iter()
                .zip(self.dy.as_slice())
                .map(|(a, b)| a.hypot(*b))
                .collect(),
        )
    }
}

/// Grayscale projection onto the first principal component of the unmasked
/// pixels' channel vectors, rescaled to `[0, 1]`.
///
/// The axis sign is chosen so that brighter pixels map higher. A single
/// channel is rescaled directly; a flat image yields its channel mean.
pub fn pca_grayscale(image: &RasterImage) -> Plane<f64> {
    let mask = image.mask().as_slice();
    let valid = |i: &usize| mask[*i];
    let fallback = || image.channel_mean();
    let projected = if image.channels() == 1 {
        image.channel_plane(0)
    } else {
        let rows = (0..image.pixel_count()).filter(valid).map(|i| image.pixel_at(i));
        let Some(mut pca) = PrincipalAxes::fit(rows, image.channels()) else {
            return fallback();
        };
        let scale: f64 = pca.mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
        if pca.variances[0] <= 1e-24 * scale {
            return fallback();
        }
        let cov_with_mean: f64 = pca.axes[0].iter().sum();
        if cov_with_mean < 0.0 {
            for a in &mut pca.axes[0] {
                *a = -*a;
            }
        }
        Plane::from_fn(image.height(), image.width(), |y, x| pca.project(image.pixel(y, x), 0))
    };
    rescale_unit(&projected, image.mask()).unwrap_or_else(fallback)
}

/// Affine map of the unmasked range onto `[0, 1]`; masked values are clamped.
/// `None` when the unmasked range is empty or flat.
fn rescale_unit(field: &Plane<f64>, mask: &Plane<bool>) -> Option<Plane<f64>> {
    let (lo, hi) = field
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, m)| **m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return None;
    }
    Some(field.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
}

/// Normalized 1D Gaussian kernel of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - 1 - r }) as usize
}

/// Separable Gaussian blur with reflective borders.
///
/// # Panics
/// If `sigma` is not strictly positive.
pub fn gaussian_smooth(field: &Plane<f64>, sigma: f64) -> Plane<f64> {
    assert!(sigma > 0.0, "sigma must be positive, got {sigma}");
    let (h, w) = (field.height(), field.width());
    if field.is_empty() {
        return field.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let rows = Plane::from_fn(h, w, |y, x| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(k, weight)| weight * field[(y, reflect(x as i64 + k as i64 - radius, w))])
            .sum()
    });
    Plane::from_fn(h, w, |y, x| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(k, weight)| weight * rows[(reflect(y as i64 + k as i64 - radius, h), x)])
            .sum()
    })
}

/// Central differences `(f(x+1) − f(x−1)) / 2` per axis, one-sided at borders.
pub fn central_differences(field: &Plane<f64>) -> GradientComponents {
    let (h, w) = (field.height(), field.width());
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
    let dx = Plane::from_fn(h, w, |y, x| {
        let (a, b) = (x.saturating_sub(1), (x + 1).min(w - 1));
        diff(field[(y, a)], field[(y, b)], b - a)
    });
    let dy = Plane::from_fn(h, w, |y, x| {
        let (a, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
        diff(field[(a, x)], field[(b, x)], b - a)
    });
    GradientComponents { dx, dy }
}

/// Central-difference gradient magnitude scaled so its maximum is 1.
pub fn central_gradient(field: &Plane<f64>) -> Plane<f64> {
    normalize_max(&central_differences(field).magnitude(), None)
}

/// Divides by the maximum over `mask` (all pixels when `None`); an
/// all-zero field stays zero.
pub fn normalize_max(field: &Plane<f64>, mask: Option<&Plane<bool>>) -> Plane<f64> {
    let max = field
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.as_slice()[*i]))
        .fold(0.0f64, |acc, (_, v)| acc.max(*v));
    if max > 0.0 {
        field.map(|v| (v / max).min(1.0))
    } else {
        field.map(|_| 0.0)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        1.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Per-axis spectral dissimilarity `1 − cos(T_{k−1}, T_{k+1})`.
///
/// At borders the pixel itself stands in for the missing neighbour. A masked
/// neighbour contributes no evidence of an edge.
pub fn spectral_differences(cube: &SpectralCube) -> GradientComponents {
    let (h, w) = (cube.height(), cube.width());
    let mask = cube.mask();
    let dissimilarity = |a: (usize, usize), b: (usize, usize)| {
        if a == b || !mask[a] || !mask[b] {
            0.0
        } else {
            let d = 1.0 - cosine(cube.spectrum(a.0, a.1), cube.spectrum(b.0, b.1));
            // rounding leaves ~1e-16 for parallel spectra
            if d < 1e-12 { 0.0 } else { d }
        }
    };
    let dx = Plane::from_fn(h, w, |y, x| {
        dissimilarity((y, x.saturating_sub(1)), (y, (x + 1).min(w - 1)))
    });
    let dy = Plane::from_fn(h, w, |y, x| {
        dissimilarity((y.saturating_sub(1), x), ((y + 1).min(h - 1), x))
    });
    GradientComponents { dx, dy }
}

/// Merged spectral dissimilarity, normalized to `[0, 1]` over unmasked pixels.
pub fn spectral_gradient(cube: &SpectralCube) -> Plane<f64> {
    let merged = spectral_differences(cube).magnitude();
    let masked = Plane::from_vec(
        merged.height(),
        merged.width(),
        merged
            .as_slice()
            .iter()
            .zip(cube.mask().as_slice())
            .map(|(v, m)| if *m { *v } else { 0.0 })
            .collect(),
    );
    normalize_max(&masked, Some(cube.mask()))
}
