//! Hand-crafted per-point input features.

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::spatial::SpatialGrid;

pub const NUM_FEATURES: usize = 13;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "x", "y", "z", "range", "intensity", "offset_x", "offset_y", "offset_z", "eig_1", "eig_2", "eig_3",
    "knn_distance", "time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Neighbours used for the local statistics.
    pub k: usize,
    /// Hash grid pitch for the neighbour search (m).
    pub grid_cell: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { k: 16, grid_cell: 0.5 }
    }
}

/// Points of one model input, expressed in the reference sensor frame.
#[derive(Debug, Clone, Copy)]
pub struct FeatureInput<'a> {
    pub points: &'a [Point3<f64>],
    pub intensity: &'a [f32],
    pub range: &'a [f64],
    /// Scan offset from the reference scan; 0 for single-scan input.
    pub time: &'a [i32],
}

/// One feature row per query id:
/// position, range, intensity, mean neighbour offset, descending eigenvalues of
/// the neighbourhood covariance, mean neighbour distance and time offset.
///
/// Neighbours are the `k` nearest other points of the same input.
pub fn compute_features(input: &FeatureInput, queries: &[usize], config: &FeatureConfig) -> Array2<f64> {
    let grid = SpatialGrid::new(input.points, None, config.grid_cell);
    let rows: Vec<[f64; NUM_FEATURES]> = queries
        .par_iter()
        .map(|&i| {
            let p = input.points[i];
            let nn = grid.knn(&p, config.k, Some(i as u32));
            let mut row = [0.0; NUM_FEATURES];
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
            row[3] = input.range[i];
            row[4] = f64::from(input.intensity[i]);
            row[12] = f64::from(input.time[i]);
            if nn.is_empty() {
                return row;
            }
            let inv = 1.0 / nn.len() as f64;
            let mean = nn
                .iter()
                .fold(Vector3::zeros(), |acc, &(_, j)| acc + input.points[j as usize].coords)
                * inv;
            let mut cov = Matrix3::zeros();
            for &(_, j) in &nn {
                let d = input.points[j as usize].coords - mean;
                cov += d * d.transpose();
            }
            let mut eig: Vec<f64> = SymmetricEigen::new(cov * inv).eigenvalues.iter().map(|v| v.max(0.0)).collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let offset = mean - p.coords;
            row[5..8].copy_from_slice(offset.as_slice());
            row[8..11].copy_from_slice(&eig);
            row[11] = nn.iter().map(|&(d2, _)| d2.sqrt()).sum::<f64>() * inv;
            row
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((queries.len(), NUM_FEATURES), flat).expect("row length is NUM_FEATURES")
}
