use std::collections::VecDeque;

use crate::plane::Plane;

use super::filters::GradientComponents;

pub const DEFAULT_CANNY_LOW: f64 = 0.1;
pub const DEFAULT_CANNY_HIGH: f64 = 0.3;

/// Canny edges of an intensity field.
///
/// Sobel gradient, non-maximum suppression along four quantized directions,
/// double threshold on the max-normalized magnitude and 8-connected
/// hysteresis from the strong pixels.
///
/// # Panics
/// Unless `0 < low < high <= 1`.
pub fn canny_edges(field: &Plane<f64>, low: f64, high: f64) -> Plane<bool> {
    edges_from_gradient(&sobel(field), low, high, None)
}

fn sobel(field: &Plane<f64>) -> GradientComponents {
    let (h, w) = (field.height(), field.width());
    let at = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        field[(y, x)]
    };
    let dx = Plane::from_fn(h, w, |y, x| {
        let (y, x) = (y as i64, x as i64);
        (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1))
    });
    let dy = Plane::from_fn(h, w, |y, x| {
        let (y, x) = (y as i64, x as i64);
        (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1))
    });
    GradientComponents { dx, dy }
}

/// Suppression, thresholding and hysteresis on precomputed gradient
/// components. Pixels outside `mask` are never edges.
pub fn edges_from_gradient(
    gradient: &GradientComponents,
    low: f64,
    high: f64,
    mask: Option<&Plane<bool>>,
) -> Plane<bool> {
    assert!(
        0.0 < low && low < high && high <= 1.0,
        "canny thresholds must satisfy 0 < low < high <= 1, got {low}, {high}"
    );
    let (h, w) = (gradient.dx.height(), gradient.dx.width());
    let magnitude = gradient.magnitude();
    let max = magnitude.as_slice().iter().fold(0.0f64, |a, v| a.max(*v));
    let mut edges = Plane::filled(h, w, false);
    if max <= 0.0 {
        return edges;
    }
    let mag = |y: i64, x: i64| magnitude.get_checked(y, x).copied().unwrap_or(0.0) / max;

    // 0 = strong, 1 = weak, 2 = suppressed
    let mut class = Plane::filled(h, w, 2u8);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[(y, x)]) {
                continue;
            }
            let m = mag(y as i64, x as i64);
            if m < low {
                continue;
            }
            let (oy, ox) = direction(gradient.dx[(y, x)], gradient.dy[(y, x)]);
            let (yi, xi) = (y as i64, x as i64);
            let ahead = mag(yi + oy, xi + ox);
            let behind = mag(yi - oy, xi - ox);
            // Strict on one side so a two-pixel plateau keeps exactly one pixel.
            if m >= ahead && m > behind {
                class[(y, x)] = if m >= high { 0 } else { 1 };
            }
        }
    }

    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if class[(y, x)] == 0 {
                edges[(y, x)] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if class.get_checked(ny, nx) == Some(&1) {
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !edges[(ny, nx)] {
                        edges[(ny, nx)] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    edges
}

/// Neighbour offset `(dy, dx)` along the gradient direction, quantized to
/// 0°, 45°, 90° or 135°.
fn direction(gx: f64, gy: f64) -> (i64, i64) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}
