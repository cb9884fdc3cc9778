//! Planar quad predicates shared by the renderer and the compositor.

use crate::frame::Point;

#[inline]
fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Whether `p` lies inside the quad or on its boundary. Works for either
/// winding as long as the quad is convex.
pub fn quad_contains(corners: &[Point; 4], p: Point) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let c = cross(corners[i], corners[(i + 1) % 4], p);
        if c > 0.0 {
            pos = true;
        } else if c < 0.0 {
            neg = true;
        }
        if pos && neg {
            return false;
        }
    }
    true
}

/// Strict convexity: every turn has the same sign and none is zero.
pub fn is_strictly_convex(corners: &[Point; 4]) -> bool {
    let turns: Vec<f64> = (0..4)
        .map(|i| cross(corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]))
        .collect();
    turns.iter().all(|&t| t > 0.0) || turns.iter().all(|&t| t < 0.0)
}

/// True when some three corners are collinear within a relative tolerance.
pub fn has_collinear_corners(corners: &[Point; 4]) -> bool {
    let scale = corners
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0f64, f64::max);
    let tol = 1e-12 * scale * scale;
    for skip in 0..4 {
        let pts: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| corners[i]).collect();
        if cross(pts[0], pts[1], pts[2]).abs() <= tol {
            return true;
        }
    }
    false
}

/// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
pub fn bounds(corners: &[Point; 4]) -> (f64, f64, f64, f64) {
    corners.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
    )
}
