use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `normal · x + offset = 0` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Normalizes `normal` and orients it so that `normal.z >= 0`.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        let (mut normal, mut offset) = (normal / n, offset / n);
        if normal.z < 0.0 {
            normal = -normal;
            offset = -offset;
        }
        Self {
            normal: normal.into(),
            offset,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    #[inline]
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z + self.offset
    }

    /// Angle between the normal and +z, in degrees.
    pub fn tilt_deg(&self) -> f64 {
        self.normal[2].abs().clamp(0.0, 1.0).acos().to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    /// Indices into the input slice, ascending.
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Hypotheses tilted further than this from vertical are not scored.
    pub max_tilt_deg: Option<f64>,
}

/// Least-squares plane through `points` (smallest principal axis).
pub fn fit_plane_lsq(points: &[Point3<f64>], ids: &[usize]) -> Option<Plane> {
    if ids.len() < 3 {
        return None;
    }
    let inv = 1.0 / ids.len() as f64;
    let centroid = ids.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords) * inv;
    let mut cov = Matrix3::zeros();
    for &i in ids {
        let d = points[i].coords - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov * inv);
    let (k, _) = eig.eigenvalues.argmin();
    let normal = eig.eigenvectors.column(k).into_owned();
    if !(normal.norm() > 0.5) {
        return None;
    }
    Some(Plane::new(normal, -normal.dot(&centroid)))
}

fn inliers_of(points: &[Point3<f64>], plane: &Plane, threshold: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| plane.signed_distance(&points[i]).abs() <= threshold)
        .collect()
}

/// RANSAC plane fit with deterministic tie-breaking.
///
/// The winning hypothesis has the most inliers; ties go to the lower mean
/// absolute residual and then to the earlier iteration. The winner is refit by
/// least squares over its inliers and the inlier set is recomputed against the
/// refit plane.
pub fn ransac_plane_with(points: &[Point3<f64>], params: &RansacParams) -> Result<PlaneFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("{n} points, need at least 3")));
    }
    let cos_gate = params.max_tilt_deg.map(|d| d.to_radians().cos());
    let scale = points
        .iter()
        .map(|p| (p - points[0]).norm_squared())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // (inliers, residual sum, plane)
    let mut best: Option<(usize, f64, Plane)> = None;
    for _ in 0..params.iterations {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for taken in [a.min(b), a.max(b)] {
            if c >= taken {
                c += 1;
            }
        }
        let (pa, pb, pc) = (points[a], points[b], points[c]);
        let normal = (pb - pa).cross(&(pc - pa));
        if normal.norm_squared() <= 1e-18 * scale * scale {
            continue;
        }
        let plane = Plane::new(normal, -normal.dot(&pa.coords));
        if let Some(cg) = cos_gate {
            if plane.normal[2].abs() < cg {
                continue;
            }
        }
        let mut count = 0;
        let mut resid = 0.0;
        for p in points {
            let r = plane.signed_distance(p).abs();
            if r <= params.threshold {
                count += 1;
                resid += r;
            }
        }
        let better = match &best {
            None => true,
            Some((bc, br, _)) => {
                count > *bc || (count == *bc && resid * (*bc as f64) < *br * (count as f64))
            }
        };
        if better {
            best = Some((count, resid, plane));
        }
    }
    let (_, _, hypothesis) = best.ok_or_else(|| {
        Error::DegenerateGeometry(format!(
            "no admissible plane among {} samples of {n} points",
            params.iterations
        ))
    })?;
    let hyp_inliers = inliers_of(points, &hypothesis, params.threshold);
    let plane = fit_plane_lsq(points, &hyp_inliers).unwrap_or(hypothesis);
    let inliers = inliers_of(points, &plane, params.threshold);
    Ok(PlaneFit { plane, inliers })
}

/// RANSAC plane fit without orientation constraints.
pub fn ransac_plane(points: &[Point3<f64>], threshold: f64, iterations: usize, seed: u64) -> Result<PlaneFit> {
    ransac_plane_with(
        points,
        &RansacParams {
            threshold,
            iterations,
            seed,
            max_tilt_deg: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_horizontal_plane() {
        let pts: Vec<_> = (0..100)
            .map(|i| Point3::new((i % 10) as f64 * 0.3, (i / 10) as f64 * 0.4, 1.0))
            .collect();
        let fit = ransac_plane(&pts, 0.2, 200, 7).unwrap();
        assert_eq!(fit.inliers.len(), 100);
        assert!((fit.plane.normal[2].abs() - 1.0).abs() < 1e-9);
        assert!((fit.plane.offset * fit.plane.normal[2].signum() + 1.0).abs() < 1e-9);
        assert!((fit.plane.normal().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn outliers_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Tilted plane z = 0.1 x - 0.05 y + 2.
        let mut pts: Vec<_> = (0..80)
            .map(|_| {
                let x: f64 = rng.random_range(-5.0..5.0);
                let y: f64 = rng.random_range(-5.0..5.0);
                Point3::new(x, y, 0.1 * x - 0.05 * y + 2.0)
            })
            .collect();
        while pts.len() < 100 {
            let x: f64 = rng.random_range(-5.0..5.0);
            let y: f64 = rng.random_range(-5.0..5.0);
            let z: f64 = rng.random_range(-3.0..7.0);
            let plane_z = 0.1 * x - 0.05 * y + 2.0;
            // Keep outliers well clear of the threshold band (vertical offset
            // of 0.5 is > 0.2 along the normal for this slope).
            if (z - plane_z).abs() > 0.5 {
                pts.push(Point3::new(x, y, z));
            }
        }
        let fit = ransac_plane(&pts, 0.2, 200, 11).unwrap();
        assert_eq!(fit.inliers, (0..80).collect::<Vec<_>>());
        for &i in &fit.inliers {
            assert!(fit.plane.signed_distance(&pts[i]).abs() <= 0.2);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..60)
            .map(|_| Point3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..0.3)))
            .collect();
        let a = ransac_plane(&pts, 0.05, 100, 42).unwrap();
        let b = ransac_plane(&pts, 0.05, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.plane.normal.map(f64::to_bits), b.plane.normal.map(f64::to_bits));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(ransac_plane(&pts, 0.1, 50, 1), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(ransac_plane(&pts[..2], 0.1, 50, 1), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn tilt_gate_skips_walls() {
        // A wall (x = 0) with many points and a small floor patch.
        let mut pts: Vec<_> = (0..200)
            .map(|i| Point3::new(0.0, (i % 20) as f64 * 0.1, (i / 20) as f64 * 0.2 + 0.5))
            .collect();
        pts.extend((0..80).map(|i| Point3::new(0.5 + (i % 10) as f64 * 0.2, (i / 10) as f64 * 0.25, 0.0)));
        let gated = ransac_plane_with(
            &pts,
            &RansacParams { threshold: 0.05, iterations: 2000, seed: 2, max_tilt_deg: Some(30.0) },
        )
        .unwrap();
        assert!(gated.plane.tilt_deg() < 1e-6);
        assert_eq!(gated.inliers, (200..280).collect::<Vec<_>>());
    }
}
