//! Planar geometry helpers. Points are `[x, y]`.

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to segment `ab`, with the clamped parameter along it.
pub fn point_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (dist(p, q), t)
}

fn segments_cross(p: Point, q: Point, a: Point, b: Point) -> bool {
    let d1 = cross(sub(q, p), sub(a, p));
    let d2 = cross(sub(q, p), sub(b, p));
    let d3 = cross(sub(b, a), sub(p, a));
    let d4 = cross(sub(b, a), sub(q, a));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

pub fn segment_segment(p: Point, q: Point, a: Point, b: Point) -> f64 {
    if segments_cross(p, q, a, b) {
        return 0.0;
    }
    point_segment(p, a, b)
        .0
        .min(point_segment(q, a, b).0)
        .min(point_segment(a, p, q).0)
        .min(point_segment(b, p, q).0)
}

/// Distance along the ray `origin + s * dir` (unit `dir`) to segment `ab`.
pub fn ray_segment(origin: Point, dir: Point, a: Point, b: Point) -> Option<f64> {
    let e = sub(b, a);
    let denom = cross(dir, e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = sub(a, origin);
    let s = cross(w, e) / denom;
    let u = cross(w, dir) / denom;
    (s >= 0.0 && (0.0..=1.0).contains(&u)).then_some(s)
}

pub fn ray_circle(origin: Point, dir: Point, center: Point, radius: f64) -> Option<f64> {
    let w = sub(origin, center);
    let b = dot(w, dir);
    let c = dot(w, w) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = -b - disc.sqrt();
    if s >= 0.0 {
        Some(s)
    } else if c <= 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// A polyline with arc-length parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline<'a> {
    pub points: &'a [Point],
}

impl Polyline<'_> {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// `(distance, arc length)` of the closest point to `p`.
    pub fn project(&self, p: Point) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        let mut base = 0.0;
        for w in self.points.windows(2) {
            let (d, t) = point_segment(p, w[0], w[1]);
            let len = dist(w[0], w[1]);
            if d < best.0 {
                best = (d, base + t * len);
            }
            base += len;
        }
        best
    }

    pub fn point_at(&self, s: f64) -> Point {
        let mut rest = s.max(0.0);
        for w in self.points.windows(2) {
            let len = dist(w[0], w[1]);
            if rest <= len && len > 0.0 {
                let t = rest / len;
                return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
            }
            rest -= len;
        }
        *self.points.last().expect("polyline has points")
    }

    /// Unit direction of the segment containing arc length `s`.
    pub fn direction_at(&self, s: f64) -> Point {
        let mut rest = s.max(0.0);
        let n = self.points.len();
        for (i, w) in self.points.windows(2).enumerate() {
            let len = dist(w[0], w[1]);
            if (rest <= len || i + 2 == n) && len > 0.0 {
                return [(w[1][0] - w[0][0]) / len, (w[1][1] - w[0][1]) / len];
            }
            rest -= len;
        }
        [1.0, 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances() {
        assert_eq!(point_segment([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]).0, 1.0);
        assert_eq!(point_segment([3.0, 0.0], [-1.0, 0.0], [1.0, 0.0]).0, 2.0);
        assert_eq!(segment_segment([0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]), 0.0);
        assert_eq!(segment_segment([0.0, 1.0], [0.0, 2.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
    }

    #[test]
    fn rays() {
        assert_eq!(ray_segment([0.0, 0.0], [1.0, 0.0], [2.0, -1.0], [2.0, 1.0]), Some(2.0));
        assert_eq!(ray_segment([0.0, 0.0], [-1.0, 0.0], [2.0, -1.0], [2.0, 1.0]), None);
        let s = ray_circle([0.0, 0.0], [1.0, 0.0], [3.0, 0.0], 0.5).unwrap();
        assert!((s - 2.5).abs() < 1e-12);
        assert_eq!(ray_circle([0.0, 0.0], [0.0, 1.0], [3.0, 0.0], 0.5), None);
    }

    #[test]
    fn polyline_projection() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0]];
        let line = Polyline { points: &pts };
        assert_eq!(line.length(), 4.0);
        let (d, s) = line.project([1.0, 0.5]);
        assert_eq!((d, s), (0.5, 1.0));
        assert_eq!(line.point_at(3.0), [2.0, 1.0]);
        assert_eq!(line.direction_at(3.0), [0.0, 1.0]);
        assert_eq!(line.point_at(10.0), [2.0, 2.0]);
    }
}
