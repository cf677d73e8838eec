//! Planar helpers for display geometry: convex hulls and areas over
//! `(longitude, latitude)` points.

use thiserror::Error;

pub type Point = (f64, f64);

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("no points")]
    Empty,
}

/// Twice the signed area of `o, a, b`; positive for a left turn.
pub fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counterclockwise hull without collinear vertices (monotone chain).
/// One distinct point gives a single vertex, collinear input a segment.
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return Ok(pts);
    }

    let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() == 2 && lower[0] == lower[1] {
        lower.pop();
    }
    Ok(lower)
}

/// Whether `p` lies inside or on a hull produced by [`convex_hull`].
pub fn hull_contains(hull: &[Point], p: Point, tolerance: f64) -> bool {
    match hull.len() {
        0 => false,
        1 => (hull[0].0 - p.0).abs() <= tolerance && (hull[0].1 - p.1).abs() <= tolerance,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let within = |lo: f64, hi: f64, v: f64| v >= lo.min(hi) - tolerance && v <= lo.max(hi) + tolerance;
            cross(a, b, p).abs() <= tolerance && within(a.0, b.0, p.0) && within(a.1, b.1, p.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= -tolerance),
    }
}

/// Equirectangular projection to kilometres around `ref_lat` degrees.
pub fn project_km(p: Point, ref_lat: f64) -> Point {
    let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    (p.0 * k * ref_lat.to_radians().cos(), p.1 * k)
}

/// Polygon area in km², planar approximation around `ref_lat`.
pub fn area_km2(polygon: &[Point], ref_lat: f64) -> f64 {
    if polygon.len() < 3 {
        return 0.0;
    }
    let proj: Vec<Point> = polygon.iter().map(|&p| project_km(p, ref_lat)).collect();
    let twice: f64 = (0..proj.len())
        .map(|i| {
            let (a, b) = (proj[i], proj[(i + 1) % proj.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

pub fn distance_km(a: Point, b: Point, ref_lat: f64) -> f64 {
    let (pa, pb) = (project_km(a, ref_lat), project_km(b, ref_lat));
    ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_with_center() {
        let hull = convex_hull(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]).unwrap();
        assert_eq!(hull, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
    }

    #[test]
    fn triangle() {
        let hull = convex_hull(&[(0.0, 0.0), (2.0, 1.0), (0.0, 3.0)]).unwrap();
        assert_eq!(hull.len(), 3);
        let area2: f64 = (0..3).map(|i| cross((0.0, 0.0), hull[i], hull[(i + 1) % 3])).sum();
        assert!(area2 > 0.0, "counterclockwise");
    }

    #[test]
    fn collinear_points_excluded() {
        let hull = convex_hull(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0), (1.0, 2.0)]).unwrap();
        assert_eq!(hull.len(), 4);
        let line = convex_hull(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert_eq!(line, vec![(0.0, 0.0), (2.0, 2.0)]);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(convex_hull(&[]), Err(GeometryError::Empty));
        assert_eq!(convex_hull(&[(1.0, 1.0), (1.0, 1.0)]).unwrap(), vec![(1.0, 1.0)]);
        assert_eq!(area_km2(&[(1.0, 1.0)], 0.0), 0.0);
    }

    #[test]
    fn one_degree_square_at_equator() {
        let a = area_km2(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)], 0.0);
        assert!((a - 111.195f64.powi(2)).abs() < 1.0, "{a}");
    }

    #[test]
    fn random_disc_hull_contains_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point> = (0..1000)
            .map(|_| {
                let r = rng.gen::<f64>().sqrt();
                let th = rng.gen::<f64>() * std::f64::consts::TAU;
                (r * th.cos(), r * th.sin())
            })
            .collect();
        let hull = convex_hull(&pts).unwrap();
        assert!(hull.len() >= 3);
        for &p in &pts {
            assert!(hull_contains(&hull, p, 1e-12));
        }
        // every hull vertex is an input point with all others on one side
        for (i, &v) in hull.iter().enumerate() {
            assert!(pts.contains(&v));
            let next = hull[(i + 1) % hull.len()];
            assert!(pts.iter().all(|&p| cross(v, next, p) >= -1e-12));
        }
    }
}
