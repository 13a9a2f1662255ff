//! Heuristic pre-segmentation of a fused cloud into annotation components.
//!
//! Ground is detected per xy cell with RANSAC and every cell's ground becomes
//! one component. The remaining points are grouped by range-adaptive
//! connectivity, oversized groups are cut along a global xy grid, and groups
//! with too few points are ignored.

mod components;
mod ground;
mod ransac;
mod refine;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::FusedCloud;
use crate::{Error, Result};

pub use components::{adaptive_radius, connected_components, UnionFind};
pub use ground::{cell_of, detect_ground};
pub use ransac::{fit_plane_lsq, ransac_plane, ransac_plane_with, Plane, PlaneFit, RansacParams};
pub use refine::{filter_small, subdivide_components, xy_extent};

/// Per-point id written for ignored points.
pub const IGNORED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresegConfig {
    /// Ground cell edge (m).
    pub cell_size: f64,
    /// RANSAC inlier distance (m).
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    /// Adaptive connection coefficient: `τ(u, v) = max(r_u, r_v) · d`.
    pub d: f64,
    /// Object components are cut to at most this xy size (m).
    pub max_component_extent: f64,
    /// Components with at most this many points are ignored.
    pub min_component_points: usize,
    /// Ground planes tilted further from horizontal are rejected (deg).
    pub max_ground_tilt_deg: f64,
    pub min_ground_inliers: usize,
    pub rng_seed: u64,
}

impl Default for PresegConfig {
    fn default() -> Self {
        Self {
            cell_size: 5.0,
            ransac_threshold: 0.2,
            ransac_iterations: 200,
            d: 0.01,
            max_component_extent: 2.0,
            min_component_points: 100,
            max_ground_tilt_deg: 30.0,
            min_ground_inliers: 3,
            rng_seed: 0,
        }
    }
}

impl PresegConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.ransac_threshold > 0.0
            && self.ransac_iterations > 0
            && self.d > 0.0
            && self.d < 1.0
            && self.max_component_extent > 0.0
            && (0.0..=90.0).contains(&self.max_ground_tilt_deg);
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid pre-segmentation config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Ground,
    Object,
}

/// A set of point ids of one fused cloud; the unit of annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Ascending, non-empty.
    pub point_ids: Vec<u32>,
    pub kind: ComponentKind,
    /// Ground cell coordinates.
    pub cell: Option<(i64, i64)>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }
}

/// Counts recorded at each stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresegProvenance {
    pub ground_components: usize,
    pub ground_points: usize,
    pub connected_components: usize,
    pub after_subdivision: usize,
    pub kept_components: usize,
    pub ignored_components: usize,
    pub ignored_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresegResult {
    pub num_points: usize,
    /// Ground components first (cell order), then objects.
    pub components: Vec<Component>,
    /// Points of filtered-out components, ascending.
    pub ignored: Vec<u32>,
    pub provenance: PresegProvenance,
}

impl PresegResult {
    /// Component index per point, [`IGNORED`] for ignored points.
    pub fn component_ids(&self) -> Vec<u32> {
        let mut ids = vec![IGNORED; self.num_points];
        for (c, comp) in self.components.iter().enumerate() {
            for &p in &comp.point_ids {
                ids[p as usize] = c as u32;
            }
        }
        ids
    }

    /// Rebuilds components from a per-point id array and per-component kinds.
    pub fn from_component_ids(ids: &[u32], kinds: &[(ComponentKind, Option<(i64, i64)>)]) -> Result<Self> {
        let mut components: Vec<Component> = kinds
            .iter()
            .map(|&(kind, cell)| Component { point_ids: Vec::new(), kind, cell })
            .collect();
        let mut ignored = Vec::new();
        for (p, &c) in ids.iter().enumerate() {
            if c == IGNORED {
                ignored.push(p as u32);
            } else {
                components
                    .get_mut(c as usize)
                    .ok_or_else(|| Error::Consistency(format!("point {p} references component {c} of {}", kinds.len())))?
                    .point_ids
                    .push(p as u32);
            }
        }
        if let Some(i) = components.iter().position(Component::is_empty) {
            return Err(Error::Consistency(format!("component {i} has no points")));
        }
        let provenance = PresegProvenance {
            ground_components: components.iter().filter(|c| c.kind == ComponentKind::Ground).count(),
            ground_points: components
                .iter()
                .filter(|c| c.kind == ComponentKind::Ground)
                .map(Component::len)
                .sum(),
            kept_components: components.len(),
            ignored_points: ignored.len(),
            ..Default::default()
        };
        Ok(Self { num_points: ids.len(), components, ignored, provenance })
    }
}

/// Full pre-segmentation: ground detection, connected components,
/// subdivision and small-component filtering.
pub fn presegment(cloud: &FusedCloud, config: &PresegConfig) -> Result<PresegResult> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::Argument("presegment: empty cloud".into()));
    }
    if let Some(i) = cloud.range.iter().position(|r| !(*r > 0.0)) {
        return Err(Error::Consistency(format!("point {i} has non-positive range")));
    }
    let (ground, nonground) = detect_ground(cloud, config);
    let mut provenance = PresegProvenance {
        ground_components: ground.len(),
        ground_points: ground.iter().map(Component::len).sum(),
        ..Default::default()
    };
    let objects = connected_components(cloud, &nonground, config.d);
    provenance.connected_components = objects.len();
    let mut objects = subdivide_components(cloud, objects, config);
    objects.sort_by_key(|c| c.point_ids[0]);
    provenance.after_subdivision = objects.len();

    let mut all = ground;
    all.extend(objects);
    let (components, ignored) = filter_small(all, config);
    provenance.kept_components = components.len();
    provenance.ignored_components = provenance.ground_components + provenance.after_subdivision - components.len();
    provenance.ignored_points = ignored.len();
    Ok(PresegResult { num_points: cloud.len(), components, ignored, provenance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub id: u32,
    pub kind: ComponentKind,
    pub cell: Option<(i64, i64)>,
    pub points: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresegManifest {
    pub format: String,
    pub config: PresegConfig,
    pub num_points: usize,
    pub provenance: PresegProvenance,
    pub components: Vec<ComponentRecord>,
}

pub fn manifest(cloud: &FusedCloud, result: &PresegResult, config: &PresegConfig) -> PresegManifest {
    let components = result
        .components
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &p in &c.point_ids {
                let q = cloud.points[p as usize];
                for k in 0..3 {
                    lo[k] = lo[k].min(q[k]);
                    hi[k] = hi[k].max(q[k]);
                }
            }
            ComponentRecord {
                id: id as u32,
                kind: c.kind,
                cell: c.cell,
                points: c.len(),
                bbox_min: lo,
                bbox_max: hi,
            }
        })
        .collect();
    PresegManifest {
        format: "less-preseg/1".into(),
        config: config.clone(),
        num_points: result.num_points,
        provenance: result.provenance.clone(),
        components,
    }
}

/// Writes `<stem>.ids` (little-endian u32 per point) and `<stem>.json`.
pub fn write_result(dir: &Path, stem: &str, cloud: &FusedCloud, result: &PresegResult, config: &PresegConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids_path = dir.join(format!("{stem}.ids"));
    let bytes: Vec<u8> = result.component_ids().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&ids_path, bytes).map_err(|e| Error::io(&ids_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest(cloud, result, config)).map_err(|e| Error::json(&json_path, e))?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn read_component_ids(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 4) as u64,
            message: "truncated component id".into(),
        });
    }
    Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Reads what [`write_result`] wrote.
pub fn read_result(dir: &Path, stem: &str) -> Result<(PresegResult, PresegManifest)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: PresegManifest = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let ids = read_component_ids(&dir.join(format!("{stem}.ids")))?;
    if ids.len() != manifest.num_points {
        return Err(Error::Consistency(format!(
            "{stem}: {} component ids but manifest lists {} points",
            ids.len(),
            manifest.num_points
        )));
    }
    let kinds: Vec<_> = manifest.components.iter().map(|r| (r.kind, r.cell)).collect();
    let mut result = PresegResult::from_component_ids(&ids, &kinds)?;
    result.provenance = manifest.provenance.clone();
    Ok((result, manifest))
}

fn component_color(id: u32) -> [u8; 3] {
    if id == IGNORED {
        return [128, 128, 128];
    }
    let mut h = (id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 29;
    [(h & 0xff) as u8 | 0x20, ((h >> 8) & 0xff) as u8 | 0x20, ((h >> 16) & 0xff) as u8 | 0x20]
}

/// ASCII PLY with one color per component (gray for ignored points).
pub fn write_ply(out: &mut impl Write, cloud: &FusedCloud, component_ids: &[u32]) -> std::io::Result<()> {
    writeln!(out, "ply\nformat ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(out, "property uint component\nend_header")?;
    for (p, &c) in cloud.points.iter().zip(component_ids) {
        let [r, g, b] = component_color(c);
        writeln!(out, "{} {} {} {r} {g} {b} {c}", p.x as f32, p.y as f32, p.z as f32)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn flat_cloud() -> FusedCloud {
        let points: Vec<_> = (0..400)
            .map(|i| Point3::new(0.1 + (i % 20) as f64 * 0.45, 0.1 + (i / 20) as f64 * 0.45, -1.7))
            .collect();
        let n = points.len();
        FusedCloud {
            range: points.iter().map(|p| p.coords.norm()).collect(),
            points,
            intensity: vec![0.0; n],
            scan_index: vec![0; n],
            time_offset: vec![0; n],
            gt_label: None,
        }
    }

    #[test]
    fn flat_scene_is_ground_only() {
        let cloud = flat_cloud();
        let res = presegment(&cloud, &PresegConfig::default()).unwrap();
        assert!(res.components.iter().all(|c| c.kind == ComponentKind::Ground));
        let covered: usize = res.components.iter().map(Component::len).sum();
        assert_eq!(covered + res.ignored.len(), cloud.len());
    }

    #[test]
    fn write_read_round_trip() {
        let cloud = flat_cloud();
        let config = PresegConfig::default();
        let res = presegment(&cloud, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_result(dir.path(), "w0000", &cloud, &res, &config).unwrap();
        let (back, manifest) = read_result(dir.path(), "w0000").unwrap();
        assert_eq!(back.components, res.components);
        assert_eq!(back.ignored, res.ignored);
        assert_eq!(manifest.config, config);
    }

    #[test]
    fn ply_header() {
        let cloud = flat_cloud();
        let mut buf = Vec::new();
        write_ply(&mut buf, &cloud, &vec![IGNORED; cloud.len()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 400\n"));
        assert_eq!(text.lines().count(), 11 + 400);
    }

    #[test]
    fn invalid_config_rejected() {
        let config = PresegConfig { d: 1.5, ..Default::default() };
        assert!(matches!(presegment(&flat_cloud(), &config), Err(Error::Argument(_))));
    }
}
