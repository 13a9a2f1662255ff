//! KITTI / SemanticKITTI sequence layout.
//!
//! ```text
//! <seq>/velodyne/000000.bin   packed little-endian f32 records (x, y, z, intensity)
//! <seq>/labels/000000.label   little-endian u32 per point, semantic id in the low 16 bits
//! <seq>/poses.txt             one row-major 3x4 camera pose per line
//! <seq>/calib.txt             `Tr:` velodyne -> camera extrinsic (3x4)
//! <seq>/times.txt             optional, one timestamp (s) per line
//! ```
//!
//! World poses of the velodyne follow the SemanticKITTI convention
//! `Tr⁻¹ · P · Tr`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Scan, ScanPoint};
use crate::geom::Pose;
use crate::{Error, Result};

const RECORD: usize = 16;

pub fn scan_path(seq_dir: &Path, id: usize) -> PathBuf {
    seq_dir.join("velodyne").join(format!("{id:06}.bin"))
}

pub fn label_path(seq_dir: &Path, id: usize) -> PathBuf {
    seq_dir.join("labels").join(format!("{id:06}.label"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_points(path: &Path, bytes: &[u8]) -> Result<Vec<ScanPoint>> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            message: format!("truncated point record ({} trailing bytes)", bytes.len() % RECORD),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    Ok(bytes
        .chunks_exact(RECORD)
        .map(|r| ScanPoint::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16])))
        .collect())
}

pub fn encode_points(points: &[ScanPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * RECORD);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 4) as u64,
            message: "truncated label record".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_le_bytes()).collect()
}

pub fn read_points(path: &Path) -> Result<Vec<ScanPoint>> {
    decode_points(path, &read_bytes(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    decode_labels(path, &read_bytes(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_floats<const N: usize>(path: &Path, offset: usize, text: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut fields = text.split_whitespace();
    for (k, slot) in out.iter_mut().enumerate() {
        let tok = fields.next().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("expected {N} values, found {k}"),
        })?;
        *slot = tok.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("bad number {tok:?}"),
        })?;
    }
    if fields.next().is_some() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("more than {N} values"),
        });
    }
    Ok(out)
}

/// Non-empty lines with their byte offsets.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len();
        let line = raw.trim();
        (!line.is_empty()).then_some((start, line))
    })
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<Pose>> {
    lines_with_offsets(text)
        .map(|(off, line)| parse_floats::<12>(path, off, line).map(|v| Pose::from_row_major_3x4(&v)))
        .collect()
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_poses(path, &read_text(path)?)
}

/// The `Tr` entry of a KITTI calibration file.
pub fn parse_calib(path: &Path, text: &str) -> Result<Pose> {
    for (off, line) in lines_with_offsets(text) {
        if let Some(rest) = line.strip_prefix("Tr:") {
            let v = parse_floats::<12>(path, off + 3, rest)?;
            return Ok(Pose::from_row_major_3x4(&v));
        }
    }
    Err(Error::Format {
        path: path.to_path_buf(),
        offset: text.len() as u64,
        message: "no `Tr:` entry".into(),
    })
}

pub fn read_calib(path: &Path) -> Result<Pose> {
    parse_calib(path, &read_text(path)?)
}

pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    lines_with_offsets(&text)
        .map(|(off, line)| parse_floats::<1>(path, off, line).map(|v| v[0]))
        .collect()
}

/// Scan ids present under `velodyne/`, ascending.
pub fn list_scans(seq_dir: &Path) -> Result<Vec<usize>> {
    let dir = seq_dir.join("velodyne");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".bin") {
            if let Ok(id) = stem.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads scans with world poses. `None` loads every scan in the sequence.
///
/// Labels are attached when `labels/` exists; their count must match the
/// point count of each scan.
pub fn load_sequence(seq_dir: &Path, scan_ids: Option<&[usize]>) -> Result<Vec<(Scan, Pose)>> {
    let ids = match scan_ids {
        Some(ids) => ids.to_vec(),
        None => list_scans(seq_dir)?,
    };
    let cam_poses = read_poses(&seq_dir.join("poses.txt"))?;
    let calib_path = seq_dir.join("calib.txt");
    let tr = if calib_path.exists() {
        read_calib(&calib_path)?
    } else {
        Pose::identity()
    };
    let tr_inv = tr.inverse();
    let times_path = seq_dir.join("times.txt");
    let times = if times_path.exists() {
        Some(read_times(&times_path)?)
    } else {
        None
    };
    let has_labels = seq_dir.join("labels").is_dir();

    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let cam = cam_poses.get(id).ok_or_else(|| {
            Error::Consistency(format!("poses.txt has {} entries, scan {id} requested", cam_poses.len()))
        })?;
        let points = read_points(&scan_path(seq_dir, id))?;
        let labels = if has_labels {
            let l = read_labels(&label_path(seq_dir, id))?;
            if l.len() != points.len() {
                return Err(Error::Consistency(format!(
                    "scan {id}: {} points but {} labels",
                    points.len(),
                    l.len()
                )));
            }
            Some(l)
        } else {
            None
        };
        let timestamp = times
            .as_ref()
            .and_then(|t| t.get(id).copied())
            .unwrap_or(id as f64 * 0.1);
        let pose = tr_inv.compose(cam).compose(&tr);
        out.push((
            Scan {
                points,
                labels,
                scan_index: id,
                timestamp,
            },
            pose,
        ));
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn format_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Writes a sequence in the same layout [`load_sequence`] reads. `world_poses`
/// are velodyne-to-world; they are stored in the camera convention using
/// `calib`.
pub fn write_sequence(seq_dir: &Path, scans: &[Scan], world_poses: &[Pose], calib: &Pose) -> Result<()> {
    if scans.len() != world_poses.len() {
        return Err(Error::Argument(format!(
            "write_sequence: {} scans but {} poses",
            scans.len(),
            world_poses.len()
        )));
    }
    let calib_inv = calib.inverse();
    let mut poses_txt = String::new();
    let mut times_txt = String::new();
    for (scan, pose) in scans.iter().zip(world_poses) {
        let id = scan.scan_index;
        write_file(&scan_path(seq_dir, id), &encode_points(&scan.points))?;
        if let Some(labels) = &scan.labels {
            write_file(&label_path(seq_dir, id), &encode_labels(labels))?;
        }
        let cam = calib.compose(pose).compose(&calib_inv);
        poses_txt.push_str(&format_row(&cam.to_row_major_3x4()));
        poses_txt.push('\n');
        times_txt.push_str(&format!("{:e}\n", scan.timestamp));
    }
    write_file(&seq_dir.join("poses.txt"), poses_txt.as_bytes())?;
    write_file(&seq_dir.join("times.txt"), times_txt.as_bytes())?;
    let calib_txt = format!("Tr: {}\n", format_row(&calib.to_row_major_3x4()));
    write_file(&seq_dir.join("calib.txt"), calib_txt.as_bytes())
}

/// SemanticKITTI raw label id to the 19 training classes (0..=18); `None` for
/// unlabeled / outlier ids.
pub fn semantic_kitti_learning_map(raw: u16) -> Option<u16> {
    let id = match raw {
        10 | 252 => 0,       // car
        11 => 1,             // bicycle
        15 => 2,             // motorcycle
        18 | 258 => 3,       // truck
        13 | 20 | 257 | 259 => 4, // other-vehicle
        30 | 254 => 5,       // person
        31 | 253 => 6,       // bicyclist
        32 | 255 => 7,       // motorcyclist
        40 => 8,             // road
        44 => 9,             // parking
        48 => 10,            // sidewalk
        49 => 11,            // other-ground
        50 => 12,            // building
        51 => 13,            // fence
        70 => 14,            // vegetation
        71 => 15,            // trunk
        72 => 16,            // terrain
        80 => 17,            // pole
        81 => 18,            // traffic-sign
        _ => return None,
    };
    Some(id)
}

pub const SEMANTIC_KITTI_CLASSES: [&str; 19] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn sixteen_bytes_is_one_point() {
        let bytes = encode_points(&[ScanPoint::new(1.0, -2.0, 3.5, 0.25)]);
        assert_eq!(bytes.len(), 16);
        let pts = decode_points(Path::new("x.bin"), &bytes).unwrap();
        assert_eq!(pts, vec![ScanPoint::new(1.0, -2.0, 3.5, 0.25)]);
    }

    #[test]
    fn truncated_bin_reports_offset() {
        let mut bytes = encode_points(&[ScanPoint::default(); 2]);
        bytes.truncate(21);
        match decode_points(Path::new("x.bin"), &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_id_is_low_half() {
        let s = Scan {
            points: vec![ScanPoint::default()],
            labels: Some(vec![(5 << 16) | 40]),
            ..Default::default()
        };
        assert_eq!(s.semantic_labels(), Some(vec![40]));
    }

    #[test]
    fn pose_parse_error_names_line_offset() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n";
        match parse_poses(Path::new("poses.txt"), text) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn calib_convention() {
        // Tr swaps axes; a camera pose moving along camera z must move the
        // velodyne along the corresponding velodyne axis.
        let tr = Pose::from_row_major_3x4(&[0., -1., 0., 0., 0., 0., -1., 0., 1., 0., 0., 0.]);
        let cam = Pose::from_translation(0.0, 0.0, 2.0);
        let velo = tr.inverse().compose(&cam).compose(&tr);
        assert!((velo.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn round_trip_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let scans: Vec<Scan> = (0..3)
            .map(|i| Scan {
                points: (0..5)
                    .map(|k| ScanPoint::new(k as f32 * 0.1 + i as f32, 1.0 / 3.0, -0.7, 0.5))
                    .collect(),
                labels: Some((0..5).map(|k| k * 10 + i as u32).collect()),
                scan_index: i,
                timestamp: i as f64 * 0.1,
            })
            .collect();
        let poses: Vec<Pose> = (0..3)
            .map(|i| Pose::from_yaw_translation(0.1 * i as f64, Vector3::new(i as f64, 0.3, 1.7)))
            .collect();
        write_sequence(dir.path(), &scans, &poses, &Pose::identity()).unwrap();
        let loaded = load_sequence(dir.path(), None).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((s, p), (s0, p0)) in loaded.iter().zip(scans.iter().zip(&poses)) {
            assert_eq!(s, s0);
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn label_count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let scan = Scan {
            points: vec![ScanPoint::default(); 3],
            labels: Some(vec![1, 2]),
            ..Default::default()
        };
        write_sequence(dir.path(), &[scan], &[Pose::identity()], &Pose::identity()).unwrap();
        assert!(matches!(
            load_sequence(dir.path(), None),
            Err(Error::Consistency(_))
        ));
    }
}
