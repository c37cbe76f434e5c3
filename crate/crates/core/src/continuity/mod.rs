//! Edge-aware coupling between neighbouring pixels.
//!
//! The smoothness penalty between pixels `m` and `n` is weighted by a
//! discontinuousness measure built from two maps: a normalized gradient
//! magnitude `D` and a binary edge map `E`. On the first pass both come from
//! the PCA grayscale of the input image; later passes derive them from the
//! current spectral estimate, where `D` is the spectral dissimilarity of the
//! two axis neighbours of each pixel.

mod bresenham;
mod canny;
mod filters;
mod graph;

pub use bresenham::{bresenham_line, Pixel};
pub use canny::{canny_edges, edges_from_gradient, DEFAULT_CANNY_HIGH, DEFAULT_CANNY_LOW};
pub use filters::{
    central_differences, central_gradient, gaussian_kernel, gaussian_smooth, normalize_max,
    pca_grayscale, spectral_differences, spectral_gradient, GradientComponents,
};
pub use graph::{
    discontinuousness, Neighbor, NeighborGraph, StencilEntry, DEFAULT_EDGE_BIAS,
    DEFAULT_NEIGHBOR_RADIUS,
};

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::plane::Plane;
use crate::raster::RasterImage;

pub const DEFAULT_SMOOTHING_SIGMA: f64 = 0.5;

/// Edge detection parameters shared by both gradient sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeParams {
    pub sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SMOOTHING_SIGMA,
            canny_low: DEFAULT_CANNY_LOW,
            canny_high: DEFAULT_CANNY_HIGH,
        }
    }
}

/// Gradient magnitude `D` in `[0, 1]` and edge classification `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub d: Plane<f64>,
    pub edges: Plane<bool>,
}

impl GradientField {
    /// First-pass field: PCA grayscale, Gaussian smoothing, central
    /// gradient and Canny edges.
    pub fn from_image(image: &RasterImage, params: &EdgeParams) -> Self {
        let gray = gaussian_smooth(&pca_grayscale(image), params.sigma);
        let d = normalize_max(&central_differences(&gray).magnitude(), Some(image.mask()));
        let edges = canny_edges(&gray, params.canny_low, params.canny_high);
        Self::masked(d, edges, image.mask())
    }

    /// Later-pass field from the current spectral estimate. Edges come from
    /// the smoothed per-axis dissimilarities treated as gradient components.
    pub fn from_cube(cube: &SpectralCube, params: &EdgeParams) -> Self {
        let d = spectral_gradient(cube);
        let parts = spectral_differences(cube);
        let smoothed = GradientComponents {
            dx: gaussian_smooth(&parts.dx, params.sigma),
            dy: gaussian_smooth(&parts.dy, params.sigma),
        };
        let edges = edges_from_gradient(&smoothed, params.canny_low, params.canny_high, Some(cube.mask()));
        Self::masked(d, edges, cube.mask())
    }

    fn masked(d: Plane<f64>, mut edges: Plane<bool>, mask: &Plane<bool>) -> Self {
        for (e, m) in edges.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *e &= *m;
        }
        Self { d, edges }
    }
}
