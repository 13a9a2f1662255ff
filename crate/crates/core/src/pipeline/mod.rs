//! Glue between sequences, labels and the model: windows, multi-scan inputs,
//! per-frame training rows and the ablation benchmark.

mod benchmark;

use std::ops::Range;
use std::path::Path;

use nalgebra::Point3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::synth::SyntheticSequence;
use crate::cloud::{fuse_scans, kitti, occupied_voxel_representatives, FusedCloud, Scan};
use crate::geom::Pose;
use crate::labeling::{class_weights, LabelBundle};
use crate::losses::ClassWeightSet;
use crate::model::FeatureInput;
use crate::{ClassId, Error, Result, UNLABELED};

pub use benchmark::{run_steps, StepSummary, 
    prepare_benchmark, run_benchmark, AblationStep, BenchmarkConfig, BenchmarkReport, PreparedBenchmark, RunResult,
};

/// Consecutive scans `first..first + len` of a sequence with world poses.
/// Scan indices passed to methods are absolute.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub first: usize,
    pub scans: Vec<Scan>,
    pub poses: Vec<Pose>,
}

impl Sequence {
    /// Loads the scans of `range` that exist on disk; the range must start
    /// inside the sequence.
    pub fn load(dir: &Path, range: Range<usize>) -> Result<Self> {
        let total = kitti::list_scans(dir)?.len();
        let ids: Vec<usize> = (range.start..range.end.min(total)).collect();
        if ids.is_empty() {
            return Err(Error::Argument(format!("scans {range:?} outside the {total}-scan sequence")));
        }
        let (scans, poses) = kitti::load_sequence(dir, Some(&ids))?.into_iter().unzip();
        Ok(Self {
            first: range.start,
            scans,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Absolute index range of the loaded scans.
    pub fn span(&self) -> Range<usize> {
        self.first..self.first + self.len()
    }

    pub fn scan(&self, k: usize) -> &Scan {
        &self.scans[k - self.first]
    }

    pub fn pose(&self, k: usize) -> &Pose {
        &self.poses[k - self.first]
    }

    fn check(&self, range: &Range<usize>) -> Result<()> {
        let span = self.span();
        if range.is_empty() || range.start < span.start || range.end > span.end {
            return Err(Error::Argument(format!("scans {range:?} outside loaded scans {span:?}")));
        }
        Ok(())
    }

    /// Fused cloud of consecutive scans.
    pub fn fuse(&self, range: Range<usize>) -> Result<FusedCloud> {
        self.check(&range)?;
        let r = range.start - self.first..range.end - self.first;
        fuse_scans(&self.scans[r.clone()], &self.poses[r], 0)
    }

    /// Offset of scan `k`'s first point inside the fused cloud of `window`.
    pub fn offset_in_window(&self, window: &Range<usize>, k: usize) -> usize {
        (window.start..k).map(|j| self.scan(j).len()).sum()
    }

    /// Ground truth of scan `k`, mapped through `map`.
    pub fn labels(&self, k: usize, map: impl Fn(ClassId) -> ClassId) -> Result<Vec<ClassId>> {
        self.scan(k)
            .semantic_labels()
            .map(|l| l.into_iter().map(map).collect())
            .ok_or_else(|| Error::Consistency(format!("scan {k} has no labels")))
    }
}

impl From<SyntheticSequence> for Sequence {
    fn from(s: SyntheticSequence) -> Self {
        Self {
            first: s.scans.first().map_or(0, |s| s.scan_index),
            scans: s.scans,
            poses: s.poses,
        }
    }
}

/// Consecutive scans fused for pre-segmentation and annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub size: usize,
    /// First scan of each window; `None` tiles the whole sequence.
    pub starts: Option<Vec<usize>>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { size: 5, starts: None }
    }
}

impl WindowConfig {
    /// Windows within a sequence of `num_scans`; a trailing partial tile is kept.
    pub fn windows(&self, num_scans: usize) -> Result<Vec<Range<usize>>> {
        if self.size == 0 {
            return Err(Error::Argument("window size must be positive".into()));
        }
        match &self.starts {
            Some(starts) => starts
                .iter()
                .map(|&s| {
                    if s + self.size <= num_scans {
                        Ok(s..s + self.size)
                    } else {
                        Err(Error::Argument(format!(
                            "window at scan {s} of size {} exceeds {num_scans} scans",
                            self.size
                        )))
                    }
                })
                .collect(),
            None => Ok((0..num_scans)
                .step_by(self.size)
                .map(|s| s..(s + self.size).min(num_scans))
                .collect()),
        }
    }
}

/// Multi-scan teacher input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Time offsets `i`; scans at `t + i·interval` are fused.
    pub offsets: Vec<i32>,
    /// Seconds between fused scans.
    pub interval: f64,
    pub scan_rate_hz: f64,
    /// Voxel edge used to thin the scans at `i ≠ 0` (m); 0 keeps every point.
    pub context_voxel: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            offsets: vec![-2, -1, 0, 1, 2],
            interval: 0.5,
            scan_rate_hz: 10.0,
            context_voxel: 0.3,
        }
    }
}

impl FusionConfig {
    pub fn interval_scans(&self) -> usize {
        (self.interval * self.scan_rate_hz).round().max(1.0) as usize
    }
}

/// Points of one model input in the reference scan's sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputCloud {
    pub points: Vec<Point3<f64>>,
    pub intensity: Vec<f32>,
    pub range: Vec<f64>,
    pub time: Vec<i32>,
}

impl InputCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_input(&self) -> FeatureInput<'_> {
        FeatureInput {
            points: &self.points,
            intensity: &self.intensity,
            range: &self.range,
            time: &self.time,
        }
    }

    fn push_scan(&mut self, scan: &Scan, to_reference: Option<&Pose>, time: i32, keep: Option<&[usize]>) {
        let all: Vec<usize>;
        let ids = match keep {
            Some(k) => k,
            None => {
                all = (0..scan.len()).collect();
                &all
            }
        };
        for &i in ids {
            let p = scan.points[i].position();
            self.range.push(p.coords.norm());
            self.points.push(match to_reference {
                Some(t) => Point3::from(t.apply(&p.coords)),
                None => p,
            });
            self.intensity.push(scan.points[i].intensity);
            self.time.push(time);
        }
    }
}

/// Which input a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Scan `k` alone.
    #[default]
    Single,
    /// Scan `k` with fused context scans and a time channel.
    Multi,
}

/// Input of scan `k` for the given mode.
pub fn model_input(seq: &Sequence, k: usize, mode: InputMode, fusion: &FusionConfig) -> InputCloud {
    match mode {
        InputMode::Single => student_input(seq, k),
        InputMode::Multi => teacher_input(seq, k, fusion),
    }
}

/// Scans that must be loaded to build `mode` inputs for `range`.
pub fn required_scans(range: &Range<usize>, mode: InputMode, fusion: &FusionConfig) -> Range<usize> {
    match mode {
        InputMode::Single => range.clone(),
        InputMode::Multi => context_range(range, fusion),
    }
}

/// Single-scan input of scan `k`.
pub fn student_input(seq: &Sequence, k: usize) -> InputCloud {
    let mut out = InputCloud::default();
    out.push_scan(seq.scan(k), None, 0, None);
    out
}

/// Multi-scan input of scan `k`: scan `k` first and untouched, then the
/// voxel-thinned scans at the configured offsets that exist in the sequence,
/// all in scan `k`'s sensor frame.
pub fn teacher_input(seq: &Sequence, k: usize, fusion: &FusionConfig) -> InputCloud {
    let mut out = InputCloud::default();
    out.push_scan(seq.scan(k), None, 0, None);
    let world_to_k = seq.pose(k).inverse();
    let step = fusion.interval_scans() as i64;
    let span = seq.span();
    for &i in &fusion.offsets {
        let j = k as i64 + i as i64 * step;
        if i == 0 || j < span.start as i64 || j >= span.end as i64 {
            continue;
        }
        let j = j as usize;
        let to_k = world_to_k.compose(seq.pose(j));
        let keep = (fusion.context_voxel > 0.0).then(|| {
            let local: Vec<Point3<f64>> = seq
                .scan(j)
                .points
                .iter()
                .map(|p| Point3::from(to_k.apply(&p.position().coords)))
                .collect();
            occupied_voxel_representatives(&local, fusion.context_voxel)
        });
        out.push_scan(seq.scan(j), Some(&to_k), i, keep.as_deref());
    }
    out
}

/// Labels of a frame's candidate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub sparse: Vec<ClassId>,
    /// Excludes clicked rows.
    pub propagated: Vec<ClassId>,
    pub weak: Vec<u32>,
    pub sparse_rows: Vec<usize>,
}

/// Looks up labels for rows that map to `fused_ids` of the bundle's cloud.
pub fn frame_labels(bundle: &LabelBundle, fused_ids: &[u32]) -> FrameLabels {
    let sparse_dense = bundle.sparse_dense();
    let propagated = bundle.propagated_without_sparse();
    let sparse: Vec<ClassId> = fused_ids.iter().map(|&p| sparse_dense[p as usize]).collect();
    let sparse_rows = (0..sparse.len()).filter(|&r| sparse[r] != UNLABELED).collect();
    FrameLabels {
        propagated: fused_ids.iter().map(|&p| propagated[p as usize]).collect(),
        weak: fused_ids.iter().map(|&p| bundle.weak_mask(p as usize)).collect(),
        sparse,
        sparse_rows,
    }
}

/// Label counts per type over a training set, for class weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub sparse: Vec<usize>,
    pub propagated: Vec<usize>,
}

impl LabelCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            sparse: vec![0; num_classes],
            propagated: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, bundle: &LabelBundle) {
        for &(_, c) in &bundle.sparse {
            self.sparse[c as usize] += 1;
        }
        for c in bundle.propagated_without_sparse() {
            if c != UNLABELED {
                self.propagated[c as usize] += 1;
            }
        }
    }

    /// Inverse-square-root weights per label type; a type without labels gets
    /// unit weights (it contributes no loss anyway).
    pub fn weights(&self) -> ClassWeightSet {
        let w = |counts: &[usize]| class_weights(counts).unwrap_or_else(|_| vec![1.0; counts.len()]);
        let union: Vec<usize> = self.sparse.iter().zip(&self.propagated).map(|(a, b)| a + b).collect();
        ClassWeightSet {
            sparse: w(&self.sparse),
            propagated: w(&self.propagated),
            proto: w(&union),
        }
    }
}

/// Training rows of scan `k` in `window`: a dense sample plus every clicked
/// point of the scan, as scan-local rows and as ids into the window's cloud.
pub fn candidate_rows(
    seq: &Sequence,
    window: &Range<usize>,
    k: usize,
    clicked: &std::collections::BTreeSet<u32>,
    dense_samples: usize,
    seed: u64,
) -> (Vec<usize>, Vec<u32>) {
    let offset = seq.offset_in_window(window, k);
    let n = seq.scan(k).len();
    let mut rows: std::collections::BTreeSet<usize> = sample_rows(n, dense_samples, seed).into_iter().collect();
    rows.extend(clicked.range(offset as u32..(offset + n) as u32).map(|&p| p as usize - offset));
    let rows: Vec<usize> = rows.into_iter().collect();
    let fused = rows.iter().map(|&r| (r + offset) as u32).collect();
    (rows, fused)
}

/// `count` distinct row ids below `n`, ascending.
pub fn sample_rows(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, n, count.min(n)).into_vec();
    rows.sort_unstable();
    rows
}

/// Context needed around scans `range` for teacher inputs.
pub fn context_range(range: &Range<usize>, fusion: &FusionConfig) -> Range<usize> {
    let step = fusion.interval_scans();
    let lo = fusion.offsets.iter().copied().min().unwrap_or(0).min(0).unsigned_abs() as usize * step;
    let hi = fusion.offsets.iter().copied().max().unwrap_or(0).max(0) as usize * step;
    range.start.saturating_sub(lo)..range.end + hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::synth::{generate_scans, SyntheticSceneSpec};
    use crate::labeling::derive_labels;
    use crate::preseg::{Component, ComponentKind};

    fn small_sequence() -> Sequence {
        let mut spec = SyntheticSceneSpec::default().with_seed(3);
        spec.sensor.rings = 8;
        spec.sensor.azimuth_steps = 180;
        generate_scans(&spec, &(0..12).collect::<Vec<_>>()).unwrap().into()
    }

    #[test]
    fn context_covers_the_fused_offsets() {
        let f = FusionConfig::default();
        assert_eq!(context_range(&(10..15), &f), 0..25);
        assert_eq!(context_range(&(3..8), &f), 0..18);
        let forward = FusionConfig {
            offsets: vec![0, 1],
            ..f
        };
        assert_eq!(context_range(&(3..8), &forward), 3..13);
    }

    #[test]
    fn windows_tile_or_follow_starts() {
        let w = WindowConfig::default();
        assert_eq!(w.windows(12).unwrap(), vec![0..5, 5..10, 10..12]);
        let w = WindowConfig {
            size: 5,
            starts: Some(vec![10]),
        };
        assert_eq!(w.windows(25).unwrap(), vec![10..15]);
        assert!(w.windows(12).is_err());
    }

    #[test]
    fn teacher_input_starts_with_the_student_scan() {
        let seq = small_sequence();
        let fusion = FusionConfig {
            interval: 0.2,
            ..Default::default()
        };
        let s = student_input(&seq, 6);
        let t = teacher_input(&seq, 6, &fusion);
        assert!(t.len() > s.len());
        assert_eq!(&t.points[..s.len()], &s.points[..]);
        assert_eq!(&t.range[..s.len()], &s.range[..]);
        assert!(t.time[..s.len()].iter().all(|&v| v == 0));
        assert!(t.time[s.len()..].iter().all(|&v| v != 0));
        // offsets ±2 at interval 2 reach scans 2 and 10, all present
        let offsets: std::collections::BTreeSet<_> = t.time.iter().copied().collect();
        assert_eq!(offsets.into_iter().collect::<Vec<_>>(), vec![-2, -1, 0, 1, 2]);
        // at the sequence start only forward offsets exist
        let t0 = teacher_input(&seq, 0, &fusion);
        assert!(t0.time.iter().all(|&v| v >= 0));
    }

    #[test]
    fn frame_labels_follow_the_bundle() {
        let comps = [Component {
            point_ids: (0..6).collect(),
            kind: ComponentKind::Object,
            cell: None,
        }];
        let bundle = derive_labels(8, &comps, &[(2, 1)], 3).unwrap();
        let fl = frame_labels(&bundle, &[7, 2, 4]);
        assert_eq!(fl.sparse, vec![UNLABELED, 1, UNLABELED]);
        assert_eq!(fl.propagated, vec![UNLABELED, UNLABELED, 1]);
        assert_eq!(fl.weak, vec![0, 0b10, 0b10]);
        assert_eq!(fl.sparse_rows, vec![1]);
        let mut counts = LabelCounts::new(3);
        counts.add(&bundle);
        assert_eq!(counts.sparse, vec![0, 1, 0]);
        assert_eq!(counts.propagated, vec![0, 5, 0]);
        let w = counts.weights();
        assert_eq!(w.sparse, vec![0.0, 1.0, 0.0]);
    }
}
