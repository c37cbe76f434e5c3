use crate::error::{Error, Result};
use crate::plane::Plane;

use super::bresenham::bresenham_line;
use super::GradientField;

pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 1.0;
pub const DEFAULT_EDGE_BIAS: f64 = 0.9;

/// One relative neighbour of the translation-invariant stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilEntry {
    /// `(dy, dx)` from the centre pixel to the neighbour.
    pub offset: (i64, i64),
    /// Euclidean distance between the two pixel centres.
    pub length: f64,
    /// Bresenham interior pixels as offsets from the centre pixel.
    pub between: Vec<(i64, i64)>,
}

/// Neighbourhoods within Euclidean distance `radius` on an `H×W` raster,
/// restricted to unmasked pixels.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    height: usize,
    width: usize,
    radius: f64,
    stencil: Vec<StencilEntry>,
    mask: Plane<bool>,
}

/// A neighbour `n` of pixel `m`, resolved to flat indices.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub index: usize,
    pub entry: &'a StencilEntry,
}

impl NeighborGraph {
    pub fn new(mask: &Plane<bool>, radius: f64) -> Result<Self> {
        if !(radius >= 1.0) {
            return Err(Error::contract(format!("neighbour radius {radius} below 1")));
        }
        let r = radius.floor() as i64;
        let mut stencil = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let length = ((dy * dy + dx * dx) as f64).sqrt();
                if (dy, dx) == (0, 0) || length > radius {
                    continue;
                }
                // Points are (x, y); offsets are relative to the centre at the origin.
                let between = bresenham_line((0, 0), (dx, dy))
                    .into_iter()
                    .map(|(x, y)| (y, x))
                    .collect();
                stencil.push(StencilEntry {
                    offset: (dy, dx),
                    length,
                    between,
                });
            }
        }
        Ok(Self {
            height: mask.height(),
            width: mask.width(),
            radius,
            stencil,
            mask: mask.clone(),
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn stencil(&self) -> &[StencilEntry] {
        &self.stencil
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn resolve(&self, m: usize, (dy, dx): (i64, i64)) -> Option<usize> {
        let y = (m / self.width) as i64 + dy;
        let x = (m % self.width) as i64 + dx;
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            return None;
        }
        Some(y as usize * self.width + x as usize)
    }

    /// Unmasked neighbours of pixel `m` (flat index).
    pub fn neighbors(&self, m: usize) -> impl Iterator<Item = Neighbor<'_>> + '_ {
        self.stencil.iter().filter_map(move |entry| {
            let index = self.resolve(m, entry.offset)?;
            self.mask.as_slice()[index].then_some(Neighbor { index, entry })
        })
    }

    pub fn contains(&self, m: usize, n: usize) -> bool {
        self.neighbors(m).any(|nb| nb.index == n)
    }

    /// Flat indices of the line pixels strictly between `m` and `n`.
    pub fn between(&self, m: usize, entry: &StencilEntry) -> Vec<usize> {
        entry
            .between
            .iter()
            .filter_map(|off| self.resolve(m, *off))
            .collect()
    }

    /// Edge-aware coupling weight `G_mn` for a resolved neighbour.
    pub fn coupling(&self, m: usize, entry: &StencilEntry, field: &GradientField, edge_bias: f64) -> f64 {
        let d = field.d.as_slice();
        let e = field.edges.as_slice();
        let product: f64 = entry
            .between
            .iter()
            .filter_map(|off| self.resolve(m, *off))
            .map(|k| if e[k] { (1.0 - edge_bias) * (1.0 - d[k]) } else { 1.0 })
            .product();
        product / entry.length
    }
}

/// Discontinuousness between pixels `m` and `n` (flat indices):
/// `(1 / L_mn) · Π_k ([not edge] + [edge]·(1 − T_b)·(1 − D_k))` over the line
/// pixels `k` strictly between them.
pub fn discontinuousness(
    m: usize,
    n: usize,
    graph: &NeighborGraph,
    field: &GradientField,
    edge_bias: f64,
) -> Result<f64> {
    let nb = graph
        .neighbors(m)
        .find(|nb| nb.index == n)
        .ok_or_else(|| Error::contract(format!("pixel {n} is not a neighbour of {m}")))?;
    Ok(graph.coupling(m, nb.entry, field, edge_bias))
}
