use nalgebra::Point3;

use super::{FusedCloud, Scan};
use crate::geom::Pose;
use crate::{Error, Result};

/// Expresses every scan in the world frame.
///
/// The range of each point is its norm in the sensor frame, taken before the
/// pose is applied. `time_offset` is the scan's position in the window minus
/// `time_origin`, so passing the index of the anchor scan gives signed
/// offsets around it.
pub fn fuse_scans(scans: &[Scan], poses: &[Pose], time_origin: usize) -> Result<FusedCloud> {
    if scans.is_empty() {
        return Err(Error::Argument("fuse_scans: empty scan list".into()));
    }
    if scans.len() != poses.len() {
        return Err(Error::Argument(format!(
            "fuse_scans: {} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    let total: usize = scans.iter().map(Scan::len).sum();
    let all_labeled = scans.iter().all(|s| s.labels.is_some());
    let mut out = FusedCloud {
        points: Vec::with_capacity(total),
        intensity: Vec::with_capacity(total),
        range: Vec::with_capacity(total),
        scan_index: Vec::with_capacity(total),
        time_offset: Vec::with_capacity(total),
        gt_label: all_labeled.then(|| Vec::with_capacity(total)),
    };
    for (pos, (scan, pose)) in scans.iter().zip(poses).enumerate() {
        if let Some(labels) = &scan.labels {
            if labels.len() != scan.len() {
                return Err(Error::Consistency(format!(
                    "scan {}: {} points but {} labels",
                    scan.scan_index,
                    scan.len(),
                    labels.len()
                )));
            }
        }
        let offset = pos as i32 - time_origin as i32;
        for p in &scan.points {
            let local = p.position();
            out.range.push(local.coords.norm());
            out.points.push(Point3::from(pose.apply(&local.coords)));
            out.intensity.push(p.intensity);
            out.scan_index.push(scan.scan_index as u32);
            out.time_offset.push(offset);
        }
        if let (Some(g), Some(sem)) = (out.gt_label.as_mut(), scan.semantic_labels()) {
            g.extend(sem);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::ScanPoint;
    use nalgebra::Vector3;

    fn scan(points: &[[f32; 3]], index: usize) -> Scan {
        Scan {
            points: points
                .iter()
                .map(|p| ScanPoint::new(p[0], p[1], p[2], 0.5))
                .collect(),
            labels: Some(vec![7; points.len()]),
            scan_index: index,
            timestamp: index as f64 * 0.1,
        }
    }

    #[test]
    fn single_scan_identity() {
        let s = scan(&[[3.0, 4.0, 0.0], [1.0, 2.0, 2.0]], 0);
        let f = fuse_scans(&[s], &[Pose::identity()], 0).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.points[0], Point3::new(3.0, 4.0, 0.0));
        assert!((f.range[0] - 5.0).abs() < 1e-12);
        assert!((f.range[1] - 3.0).abs() < 1e-12);
        assert_eq!(f.gt_label.as_deref(), Some(&[7, 7][..]));
    }

    #[test]
    fn translated_second_scan() {
        let a = scan(&[[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]], 0);
        let b = a.clone();
        let poses = [Pose::identity(), Pose::from_translation(1.0, 0.0, 0.0)];
        let f = fuse_scans(&[a, b], &poses, 0).unwrap();
        for i in 0..2 {
            let d = f.points[i + 2] - f.points[i];
            assert_eq!(d, Vector3::new(1.0, 0.0, 0.0));
            assert_eq!(f.range[i + 2], f.range[i]);
        }
        assert_eq!(f.time_offset, vec![0, 0, 1, 1]);
    }

    #[test]
    fn identical_scans_duplicate_points() {
        let a = scan(&[[1.0, 2.0, 3.0]], 0);
        let f = fuse_scans(&[a.clone(), a], &[Pose::identity(); 2], 1).unwrap();
        assert_eq!(f.points[0], f.points[1]);
        assert_eq!(f.time_offset, vec![-1, 0]);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(fuse_scans(&[], &[], 0), Err(Error::Argument(_))));
        let a = scan(&[[1.0, 0.0, 0.0]], 0);
        assert!(matches!(
            fuse_scans(&[a], &[], 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn label_count_mismatch() {
        let mut a = scan(&[[1.0, 0.0, 0.0]], 0);
        a.labels = Some(vec![]);
        assert!(matches!(
            fuse_scans(&[a], &[Pose::identity()], 0),
            Err(Error::Consistency(_))
        ));
    }
}
