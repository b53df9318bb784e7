//! Convex hulls and point-coverage tests for mask rasterization.
//!
//! All tests are written division- and sqrt-free (sign checks on cross and
//! dot products, squared distances) so that coordinates on a dyadic grid are
//! handled exactly — horizontal flips then commute with rasterization
//! bit-for-bit instead of merely approximately.

use crate::error::{Error, Result};

/// 2-D point in pixel coordinates (x right, y down across the image, but all
/// geometry here is orientation-agnostic).
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Cross product of `(a − o) × (b − o)`: positive when `o → a → b` turns
/// counter-clockwise (with respect to the x/y axes).
#[inline]
pub fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    dx * dx + dy * dy
}

/// Convex hull of a point set.
///
/// A proper hull lists its vertices counter-clockwise (positive signed
/// area), with collinear points excluded. Inputs that span no area — a
/// single distinct point, or all points collinear — come back `degenerate`
/// with one or two vertices (the extremes); rasterization dilates those to a
/// small disk or stadium so every annotated part produces a usable mask.
#[derive(Clone, Debug)]
pub struct Hull {
    pub vertices: Vec<Point>,
    pub degenerate: bool,
}

/// Monotone-chain convex hull. Errors on an empty input.
pub fn convex_hull(points: &[Point]) -> Result<Hull> {
    if points.is_empty() {
        return Err(Error::Data("convex hull of an empty point set".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.x == b.x && a.y == b.y);
    if pts.len() == 1 {
        return Ok(Hull {
            vertices: pts,
            degenerate: true,
        });
    }

    // Strict left turns only (`cross ≤ 0` pops), so collinear points never
    // survive as vertices.
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);

    if lower.len() < 3 {
        // Everything collinear: the sorted extremes are the segment ends.
        Ok(Hull {
            vertices: vec![pts[0], pts[pts.len() - 1]],
            degenerate: true,
        })
    } else {
        Ok(Hull {
            vertices: lower,
            degenerate: false,
        })
    }
}

/// Radius (in pixels) to which degenerate hulls are dilated before
/// rasterization, guaranteeing a non-empty mask.
pub const DEGENERATE_DILATION_RADIUS: f64 = 2.0;

/// Is `p` inside `[a, b]` dilated by radius `r` (a stadium; a disk when
/// `a == b`)? Division-free.
fn in_capsule(p: Point, a: Point, b: Point, r: f64) -> bool {
    let r2 = r * r;
    if dist2(p, a) <= r2 || dist2(p, b) <= r2 {
        return true;
    }
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let (apx, apy) = (p.x - a.x, p.y - a.y);
    let dot = abx * apx + aby * apy;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 || dot < 0.0 || dot > len2 {
        // A zero-length segment is fully handled by the endpoint checks.
        return false;
    }
    let cr = abx * apy - aby * apx;
    cr * cr <= r2 * len2
}

/// Does the hull cover the point (boundary inclusive)? Degenerate hulls are
/// dilated by [`DEGENERATE_DILATION_RADIUS`]. Works for either vertex
/// orientation: the polygon's own signed area picks the inside sign.
pub fn hull_covers(hull: &Hull, p: Point) -> bool {
    if hull.degenerate {
        let a = hull.vertices[0];
        let b = *hull.vertices.last().expect("degenerate hull has vertices");
        return in_capsule(p, a, b, DEGENERATE_DILATION_RADIUS);
    }
    let verts = &hull.vertices;
    let mut area2 = 0.0;
    for i in 0..verts.len() {
        let j = (i + 1) % verts.len();
        area2 += verts[i].x * verts[j].y - verts[j].x * verts[i].y;
    }
    let sign = if area2 >= 0.0 { 1.0 } else { -1.0 };
    for i in 0..verts.len() {
        let j = (i + 1) % verts.len();
        if sign * cross(verts[i], verts[j], p) < 0.0 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use rand::Rng;

    fn pt(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    /// Gift-wrapping (Jarvis march) hull as an independent oracle: start at
    /// the lowest point and repeatedly wrap to the most counter-clockwise
    /// neighbor, preferring the farther point on collinear ties.
    fn gift_wrap(points: &[Point]) -> Vec<Point> {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
        pts.dedup_by(|a, b| a.x == b.x && a.y == b.y);
        let start = pts[0];
        let mut hull = vec![start];
        let mut current = start;
        loop {
            let mut candidate = pts[0];
            for &p in &pts[1..] {
                if p == current {
                    continue;
                }
                if candidate == current {
                    candidate = p;
                    continue;
                }
                let c = cross(current, candidate, p);
                if c > 0.0 || (c == 0.0 && dist2(current, p) > dist2(current, candidate)) {
                    candidate = p;
                }
            }
            if candidate == start {
                break;
            }
            hull.push(candidate);
            current = candidate;
            assert!(hull.len() <= pts.len(), "gift wrapping failed to close");
        }
        hull
    }

    fn as_sorted_pairs(h: &[Point]) -> Vec<(u64, u64)> {
        let mut v: Vec<(u64, u64)> = h.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn square_with_interior_center_keeps_only_the_corners() {
        let pts = [pt(0.0, 0.0), pt(1.0, 0.0), pt(1.0, 1.0), pt(0.0, 1.0), pt(0.5, 0.5)];
        let hull = convex_hull(&pts).unwrap();
        assert!(!hull.degenerate);
        assert_eq!(hull.vertices.len(), 4);
        assert_eq!(
            as_sorted_pairs(&hull.vertices),
            as_sorted_pairs(&pts[..4])
        );
    }

    #[test]
    fn triangle_comes_back_counter_clockwise() {
        // Given clockwise, returned counter-clockwise (positive area).
        let hull = convex_hull(&[pt(0.0, 0.0), pt(0.0, 2.0), pt(2.0, 0.0)]).unwrap();
        assert_eq!(hull.vertices.len(), 3);
        let v = &hull.vertices;
        assert!(cross(v[0], v[1], v[2]) > 0.0);
    }

    #[test]
    fn collinear_points_collapse_to_the_extreme_segment() {
        let pts = [pt(1.0, 1.0), pt(3.0, 3.0), pt(2.0, 2.0), pt(5.0, 5.0)];
        let hull = convex_hull(&pts).unwrap();
        assert!(hull.degenerate);
        assert_eq!(hull.vertices, vec![pt(1.0, 1.0), pt(5.0, 5.0)]);
    }

    #[test]
    fn single_and_duplicate_points_are_a_degenerate_point() {
        let hull = convex_hull(&[pt(4.0, 7.0), pt(4.0, 7.0)]).unwrap();
        assert!(hull.degenerate);
        assert_eq!(hull.vertices, vec![pt(4.0, 7.0)]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(convex_hull(&[]).is_err());
    }

    #[test]
    fn matches_gift_wrapping_oracle_on_random_point_sets() {
        for seed in 0..200u64 {
            let mut rng = seeded_rng(3000 + seed);
            let n = rng.gen_range(3..60);
            let pts: Vec<Point> = (0..n)
                .map(|_| pt(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
                .collect();
            let hull = convex_hull(&pts).unwrap();
            assert!(!hull.degenerate, "random reals are never collinear");
            let oracle = gift_wrap(&pts);
            assert_eq!(
                as_sorted_pairs(&hull.vertices),
                as_sorted_pairs(&oracle),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn hull_is_convex_and_contains_every_input_point() {
        for seed in 0..1000u64 {
            let mut rng = seeded_rng(4000 + seed);
            let n = rng.gen_range(1..40);
            let pts: Vec<Point> = (0..n)
                .map(|_| pt(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)))
                .collect();
            let hull = convex_hull(&pts).unwrap();
            if hull.degenerate {
                continue; // 1- and 2-point draws
            }
            let v = &hull.vertices;
            // Convexity: every consecutive edge turn is strictly CCW.
            for i in 0..v.len() {
                let (a, b, c) = (v[i], v[(i + 1) % v.len()], v[(i + 2) % v.len()]);
                assert!(cross(a, b, c) > 0.0, "seed {seed}: non-convex at vertex {i}");
            }
            // Containment: all inputs pass every half-plane test (tolerance
            // for the inputs that sit exactly on an edge).
            for &p in &pts {
                for i in 0..v.len() {
                    let e = cross(v[i], v[(i + 1) % v.len()], p);
                    assert!(e >= -1e-6, "seed {seed}: point escapes hull ({e})");
                }
            }
        }
    }

    #[test]
    fn coverage_test_is_orientation_agnostic() {
        let ccw = Hull {
            vertices: vec![pt(0.0, 0.0), pt(4.0, 0.0), pt(4.0, 4.0), pt(0.0, 4.0)],
            degenerate: false,
        };
        let cw = Hull {
            vertices: ccw.vertices.iter().rev().copied().collect(),
            degenerate: false,
        };
        for (x, y, want) in [
            (2.0, 2.0, true),
            (0.0, 0.0, true),  // vertex: boundary inclusive
            (2.0, 0.0, true),  // edge
            (4.1, 2.0, false),
            (-0.1, 2.0, false),
        ] {
            assert_eq!(hull_covers(&ccw, pt(x, y)), want, "ccw ({x}, {y})");
            assert_eq!(hull_covers(&cw, pt(x, y)), want, "cw ({x}, {y})");
        }
    }

    #[test]
    fn degenerate_point_covers_a_radius_two_disk() {
        let hull = convex_hull(&[pt(10.0, 10.0)]).unwrap();
        assert!(hull_covers(&hull, pt(10.0, 12.0))); // on the rim
        assert!(hull_covers(&hull, pt(11.0, 11.0)));
        assert!(!hull_covers(&hull, pt(10.0, 12.001)));
        assert!(!hull_covers(&hull, pt(11.5, 11.5))); // dist² = 4.5 > 4
    }

    #[test]
    fn degenerate_segment_covers_a_stadium() {
        let hull = convex_hull(&[pt(2.0, 5.0), pt(8.0, 5.0)]).unwrap();
        assert!(hull.degenerate);
        // Independent distance-to-segment oracle (explicit projection).
        let dist = |px: f64, py: f64| -> f64 {
            let (ax, ay, bx, by) = (2.0, 5.0, 8.0, 5.0);
            let (abx, aby) = (bx - ax, by - ay);
            let t = (((px - ax) * abx + (py - ay) * aby) / (abx * abx + aby * aby))
                .clamp(0.0, 1.0);
            let (cx, cy) = (ax + t * abx, ay + t * aby);
            ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
        };
        let mut rng = seeded_rng(99);
        for _ in 0..500 {
            let (x, y) = (rng.gen_range(-2.0..12.0), rng.gen_range(0.0..10.0));
            assert_eq!(
                hull_covers(&hull, pt(x, y)),
                dist(x, y) <= DEGENERATE_DILATION_RADIUS,
                "({x}, {y}), dist {}",
                dist(x, y)
            );
        }
    }
}
