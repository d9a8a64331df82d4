//! Planar geometry shared by the world, the planning loss and the metrics.
//!
//! Frame convention: x forward, y left, headings in radians counter-clockwise
//! from +x.

use std::f64::consts::PI;

pub type Point = [f64; 2];

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

pub fn point_polyline_distance(p: Point, line: &[Point]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [only] => dist(p, *only),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// A rectangle of `length` along its heading and `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    /// Coordinates of `p` in the rectangle's own frame.
    pub fn to_local(&self, p: Point) -> Point {
        rotate([p[0] - self.center[0], p[1] - self.center[1]], -self.heading)
    }

    pub fn contains(&self, p: Point) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.length && l[1].abs() <= 0.5 * self.width
    }

    pub fn corners(&self) -> [Point; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| {
            let r = rotate(c, self.heading);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Point, Point) {
        let cs = self.corners();
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            lo = [lo[0].min(c[0]), lo[1].min(c[1])];
            hi = [hi[0].max(c[0]), hi[1].max(c[1])];
        }
        (lo, hi)
    }

    /// Signed distance from `p` to the rectangle boundary (negative inside)
    /// together with its gradient with respect to `p`.
    pub fn signed_distance(&self, p: Point) -> (f64, Point) {
        let l = self.to_local(p);
        let dx = l[0].abs() - 0.5 * self.length;
        let dy = l[1].abs() - 0.5 * self.width;
        let sx = if l[0] >= 0.0 { 1.0 } else { -1.0 };
        let sy = if l[1] >= 0.0 { 1.0 } else { -1.0 };
        let (d, g_local) = if dx > 0.0 && dy > 0.0 {
            let d = (dx * dx + dy * dy).sqrt();
            (d, [sx * dx / d, sy * dy / d])
        } else if dx >= dy {
            (dx, [sx, 0.0])
        } else {
            (dy, [0.0, sy])
        };
        (d, rotate(g_local, self.heading))
    }

    /// Separating-axis overlap test; touching edges count as overlap.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            rotate([1.0, 0.0], self.heading),
            rotate([0.0, 1.0], self.heading),
            rotate([1.0, 0.0], other.heading),
            rotate([0.0, 1.0], other.heading),
        ];
        axes.iter().all(|ax| {
            let proj = |cs: &[Point; 4]| {
                cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                    let v = c[0] * ax[0] + c[1] * ax[1];
                    (lo.min(v), hi.max(v))
                })
            };
            let (alo, ahi) = proj(&a);
            let (blo, bhi) = proj(&b);
            ahi >= blo && bhi >= alo
        })
    }

    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        }
    }
}
