/// Pixel coordinate as `(x, y)`.
pub type Pixel = (i64, i64);

/// Interior pixels of the integer Bresenham line from `m` to `n`.
///
/// Both endpoints are excluded. The line is always traced from the
/// lexicographically smaller endpoint so that `m → n` and `n → m` cover the
/// same pixels; the result is then ordered from `m` towards `n`.
pub fn bresenham_line(m: Pixel, n: Pixel) -> Vec<Pixel> {
    if m == n {
        return Vec::new();
    }
    let (start, end, reversed) = if m <= n { (m, n, false) } else { (n, m, true) };
    let mut line = trace(start, end);
    line.pop();
    if !line.is_empty() {
        line.remove(0);
    }
    if reversed {
        line.reverse();
    }
    line
}

fn trace((mut x, mut y): Pixel, (x1, y1): Pixel) -> Vec<Pixel> {
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut points = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        points.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    points
}
