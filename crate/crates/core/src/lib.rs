//! Per-pixel quasi-transparency spectra from bright-field colour images.

pub mod analysis;
pub mod calibration;
pub mod cmaes;
pub mod continuity;
pub mod cube;
pub mod error;
pub mod image_io;
pub mod linalg;
pub mod phantom;
pub mod plane;
pub mod raster;
pub mod reconstruction;
pub mod rendering;
pub mod spectral;

pub use cube::SpectralCube;
pub use error::{Error, Result};
pub use plane::Plane;
pub use raster::RasterImage;
pub use spectral::{EffectiveLight, Spectrum, WavelengthGrid};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
