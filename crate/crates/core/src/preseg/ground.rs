use std::collections::BTreeMap;

use nalgebra::Point3;

use super::ransac::{ransac_plane_with, RansacParams};
use super::{Component, ComponentKind, PresegConfig};
use crate::cloud::FusedCloud;

/// xy cell of a point on a grid of pitch `size` anchored at the origin.
#[inline]
pub fn cell_of(p: &Point3<f64>, size: f64) -> (i64, i64) {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64)
}

fn cell_seed(seed: u64, cell: (i64, i64)) -> u64 {
    // splitmix64 over the cell coordinates
    let mut z = seed
        ^ (cell.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (cell.1 as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits the cloud into one ground component per xy cell plus the remaining
/// (non-ground) point ids.
///
/// Each cell gets its own RANSAC plane. Cells with fewer than three points, a
/// degenerate sample set, a plane tilted beyond `max_ground_tilt_deg`, or fewer
/// than `min_ground_inliers` inliers contribute no ground.
pub fn detect_ground(cloud: &FusedCloud, config: &PresegConfig) -> (Vec<Component>, Vec<u32>) {
    let mut cells: BTreeMap<(i64, i64), Vec<u32>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        cells.entry(cell_of(p, config.cell_size)).or_default().push(i as u32);
    }
    let mut ground = Vec::new();
    let mut nonground = Vec::new();
    for (cell, ids) in cells {
        let fit = if ids.len() >= 3 {
            let pts: Vec<Point3<f64>> = ids.iter().map(|&i| cloud.points[i as usize]).collect();
            let params = RansacParams {
                threshold: config.ransac_threshold,
                iterations: config.ransac_iterations,
                seed: cell_seed(config.rng_seed, cell),
                max_tilt_deg: None,
            };
            ransac_plane_with(&pts, &params).ok().filter(|f| {
                f.inliers.len() >= config.min_ground_inliers.max(3)
                    && f.plane.tilt_deg() <= config.max_ground_tilt_deg
            })
        } else {
            None
        };
        match fit {
            Some(fit) => {
                let mut is_inlier = vec![false; ids.len()];
                fit.inliers.iter().for_each(|&k| is_inlier[k] = true);
                let mut comp_ids = Vec::with_capacity(fit.inliers.len());
                for (k, &id) in ids.iter().enumerate() {
                    if is_inlier[k] {
                        comp_ids.push(id);
                    } else {
                        nonground.push(id);
                    }
                }
                ground.push(Component {
                    point_ids: comp_ids,
                    kind: ComponentKind::Ground,
                    cell: Some(cell),
                });
            }
            None => nonground.extend_from_slice(&ids),
        }
    }
    nonground.sort_unstable();
    (ground, nonground)
}
