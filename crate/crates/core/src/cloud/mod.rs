//! Point cloud containers, KITTI-style sequence I/O, temporal fusion,
//! voxel subsampling and synthetic scene generation.

mod fuse;
pub mod kitti;
pub mod synth;
mod voxel;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::ClassId;

pub use fuse::fuse_scans;
pub use voxel::{occupied_voxel_representatives, voxel_downsample, voxel_downsample_ids};

/// One return as stored in a velodyne `.bin` record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl ScanPoint {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// A single sweep in its sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub points: Vec<ScanPoint>,
    /// Raw `.label` words; the semantic class is the low 16 bits.
    pub labels: Option<Vec<u32>>,
    pub scan_index: usize,
    pub timestamp: f64,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn semantic_labels(&self) -> Option<Vec<ClassId>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&v| (v & 0xFFFF) as ClassId).collect())
    }
}

/// Points from one or more scans expressed in a common world frame.
///
/// `range` is measured in the originating scan's sensor frame, so it stays
/// meaningful after fusion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedCloud {
    pub points: Vec<Point3<f64>>,
    pub intensity: Vec<f32>,
    pub range: Vec<f64>,
    pub scan_index: Vec<u32>,
    pub time_offset: Vec<i32>,
    pub gt_label: Option<Vec<ClassId>>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud with the given point ids, in the given order.
    pub fn select(&self, ids: &[usize]) -> FusedCloud {
        FusedCloud {
            points: ids.iter().map(|&i| self.points[i]).collect(),
            intensity: ids.iter().map(|&i| self.intensity[i]).collect(),
            range: ids.iter().map(|&i| self.range[i]).collect(),
            scan_index: ids.iter().map(|&i| self.scan_index[i]).collect(),
            time_offset: ids.iter().map(|&i| self.time_offset[i]).collect(),
            gt_label: self
                .gt_label
                .as_ref()
                .map(|g| ids.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Appends `other`; ground truth survives only if both sides carry it.
    pub fn extend(&mut self, other: &FusedCloud) {
        let had_gt = self.gt_label.is_some() || self.is_empty();
        self.points.extend_from_slice(&other.points);
        self.intensity.extend_from_slice(&other.intensity);
        self.range.extend_from_slice(&other.range);
        self.scan_index.extend_from_slice(&other.scan_index);
        self.time_offset.extend_from_slice(&other.time_offset);
        self.gt_label = match (had_gt, self.gt_label.take(), &other.gt_label) {
            (true, Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (true, None, Some(b)) => Some(b.clone()),
            _ => None,
        };
    }

    /// Rewrites ground-truth ids, e.g. raw SemanticKITTI ids to training ids.
    pub fn map_labels(&mut self, f: impl Fn(ClassId) -> ClassId) {
        if let Some(g) = self.gt_label.as_mut() {
            g.iter_mut().for_each(|c| *c = f(*c));
        }
    }

    /// Point ids whose time offset equals `offset`.
    pub fn ids_at_offset(&self, offset: i32) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.time_offset[i] == offset)
            .collect()
    }
}
