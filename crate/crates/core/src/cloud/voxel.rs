use nalgebra::Point3;
use rustc_hash::FxHashSet;

use super::FusedCloud;

#[inline]
fn voxel_key(p: &Point3<f64>, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Lowest point id of every occupied voxel of edge `size`, ascending.
pub fn occupied_voxel_representatives(points: &[Point3<f64>], size: f64) -> Vec<usize> {
    let mut seen = FxHashSet::default();
    (0..points.len())
        .filter(|&i| seen.insert(voxel_key(&points[i], size)))
        .collect()
}

fn occupied_count(points: &[Point3<f64>], size: f64) -> usize {
    let mut seen = FxHashSet::default();
    seen.reserve(points.len().min(1 << 20));
    points.iter().filter(|p| seen.insert(voxel_key(p, size))).count()
}

/// Point ids retained by [`voxel_downsample`].
///
/// The voxel edge is found by geometric bisection on the occupied-voxel
/// count; the grid is anchored at the origin.
pub fn voxel_downsample_ids(points: &[Point3<f64>], target_count: usize) -> Vec<usize> {
    let n = points.len();
    let target = target_count.max(1);
    if n <= target {
        return (0..n).collect();
    }
    let (mut lo_p, mut hi_p) = (points[0], points[0]);
    for p in points {
        lo_p = lo_p.inf(p);
        hi_p = hi_p.sup(p);
    }
    let extent = (hi_p - lo_p).amax();
    if !(extent > 0.0) || !extent.is_finite() {
        return (0..n).collect();
    }
    // Small edges give many voxels, large edges few.
    let mut small = extent * 1e-7;
    let mut large = extent * 2.0;
    let mut best = (usize::MAX, large);
    for _ in 0..80 {
        let mid = (small * large).sqrt();
        let count = occupied_count(points, mid);
        let err = count.abs_diff(target);
        if err < best.0 {
            best = (err, mid);
        }
        if err * 200 <= target {
            break;
        }
        if count > target {
            small = mid;
        } else {
            large = mid;
        }
        if large / small < 1.0 + 1e-12 {
            break;
        }
    }
    occupied_voxel_representatives(points, best.1)
}

/// Subsamples to roughly `target_count` points, one per occupied voxel.
pub fn voxel_downsample(cloud: &FusedCloud, target_count: usize) -> FusedCloud {
    if cloud.len() <= target_count.max(1) {
        return cloud.clone();
    }
    cloud.select(&voxel_downsample_ids(&cloud.points, target_count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, pitch: f64) -> Vec<Point3<f64>> {
        (0..n * n)
            .map(|i| Point3::new((i % n) as f64 * pitch, (i / n) as f64 * pitch, 0.0))
            .collect()
    }

    /// Linear scan over edge sizes; the first edge whose count lands within
    /// tolerance.
    fn brute_force_edge(points: &[Point3<f64>], target: usize) -> f64 {
        (1..4000)
            .map(|k| k as f64 * 0.001)
            .find(|&s| occupied_count(points, s).abs_diff(target) * 20 <= target)
            .unwrap()
    }

    #[test]
    fn identity_below_target() {
        let pts = grid(10, 0.5);
        assert_eq!(voxel_downsample_ids(&pts, 100), (0..100).collect::<Vec<_>>());
        assert_eq!(voxel_downsample_ids(&pts, 1000).len(), 100);
    }

    #[test]
    fn uniform_grid_edge_is_twice_pitch() {
        let pitch = 0.1;
        let pts = grid(100, pitch);
        let ids = voxel_downsample_ids(&pts, 2500);
        assert!((2375..=2625).contains(&ids.len()), "{}", ids.len());
        let oracle = brute_force_edge(&pts, 2500);
        assert!((oracle / pitch - 2.0).abs() < 0.1, "oracle edge {oracle}");
    }

    #[test]
    fn one_point_per_voxel_lowest_id() {
        let pts = vec![
            Point3::new(0.1, 0.1, 0.1),
            Point3::new(0.2, 0.2, 0.2),
            Point3::new(1.5, 0.1, 0.1),
        ];
        assert_eq!(occupied_voxel_representatives(&pts, 1.0), vec![0, 2]);
    }

    #[test]
    fn degenerate_duplicates_pass_through() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 50];
        assert_eq!(voxel_downsample_ids(&pts, 10).len(), 50);
    }
}
