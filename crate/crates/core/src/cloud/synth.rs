//! Procedural street scenes scanned by a simulated spinning LiDAR.
//!
//! The world is a straight road flanked by sidewalks, terrain and buildings.
//! Ground is piecewise planar over square tiles; objects are unions of boxes,
//! vertical cylinders and spheres. Every beam of the sensor is ray cast against
//! the scene, so density falls off with range and objects occlude each other.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kitti;
use super::{Scan, ScanPoint};
use crate::geom::Pose;
use crate::{ClassId, Error, Result};

/// Class ids of the synthetic taxonomy.
pub mod classes {
    use crate::ClassId;

    pub const ROAD: ClassId = 0;
    pub const SIDEWALK: ClassId = 1;
    pub const TERRAIN: ClassId = 2;
    pub const CAR: ClassId = 3;
    pub const BUILDING: ClassId = 4;
    pub const VEGETATION: ClassId = 5;
    pub const POLE: ClassId = 6;
    pub const TRAFFIC_SIGN: ClassId = 7;
    pub const PERSON: ClassId = 8;
    pub const BICYCLE: ClassId = 9;

    pub const NUM_CLASSES: usize = 10;

    pub const NAMES: [&str; NUM_CLASSES] = [
        "road",
        "sidewalk",
        "terrain",
        "car",
        "building",
        "vegetation",
        "pole",
        "traffic-sign",
        "person",
        "bicycle",
    ];

    pub fn is_ground(c: ClassId) -> bool {
        c <= TERRAIN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Car,
    Building,
    Tree,
    Pole,
    TrafficSign,
    Person,
    Bicycle,
}

impl ObjectKind {
    pub fn class(self) -> ClassId {
        match self {
            ObjectKind::Car => classes::CAR,
            ObjectKind::Building => classes::BUILDING,
            ObjectKind::Tree => classes::VEGETATION,
            ObjectKind::Pole => classes::POLE,
            ObjectKind::TrafficSign => classes::TRAFFIC_SIGN,
            ObjectKind::Person => classes::PERSON,
            ObjectKind::Bicycle => classes::BICYCLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundSpec {
    pub tile_size: f64,
    /// Tile heights are uniform in `±height_jitter`.
    pub height_jitter: f64,
    /// Per-axis slope bound (rise over run).
    pub max_slope: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub sidewalk_height: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            tile_size: 5.0,
            height_jitter: 0.05,
            max_slope: 0.02,
            road_half_width: 5.0,
            sidewalk_width: 5.0,
            sidewalk_height: 0.1,
        }
    }
}

/// Spinning sensor with evenly spaced rings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamModel {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub mount_height: f64,
    pub range_noise: f64,
    pub intensity_noise: f64,
}

impl Default for BeamModel {
    fn default() -> Self {
        Self {
            rings: 48,
            elevation_min_deg: -24.0,
            elevation_max_deg: 2.0,
            azimuth_steps: 1200,
            min_range: 1.5,
            max_range: 40.0,
            mount_height: 1.73,
            range_noise: 0.01,
            intensity_noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trajectory {
    pub scans: usize,
    pub rate_hz: f64,
    /// Forward speed along +x (m/s).
    pub speed: f64,
    pub start_x: f64,
    pub yaw_amplitude_deg: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            scans: 25,
            rate_hz: 10.0,
            speed: 5.0,
            start_x: -6.0,
            yaw_amplitude_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Scene spans `x ∈ [-half_length, half_length]`.
    pub half_length: f64,
    /// Scene spans `y ∈ [-half_width, half_width]`.
    pub half_width: f64,
    pub ground: GroundSpec,
    pub objects: BTreeMap<ObjectKind, usize>,
    /// Minimum xy clearance between footprints of different objects.
    pub min_gap: f64,
    /// Objects float this far above the highest ground under their footprint.
    pub ground_clearance: f64,
    pub sensor: BeamModel,
    pub trajectory: Trajectory,
    pub max_placement_attempts: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        let objects = [
            (ObjectKind::Car, 10),
            (ObjectKind::Building, 6),
            (ObjectKind::Tree, 8),
            (ObjectKind::Pole, 6),
            (ObjectKind::TrafficSign, 4),
            (ObjectKind::Person, 5),
            (ObjectKind::Bicycle, 3),
        ]
        .into_iter()
        .collect();
        Self {
            seed: 0,
            half_length: 40.0,
            half_width: 22.0,
            ground: GroundSpec::default(),
            objects,
            min_gap: 1.0,
            ground_clearance: 0.0,
            sensor: BeamModel::default(),
            trajectory: Trajectory::default(),
            max_placement_attempts: 1000,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sensor;
        let ok = self.half_length > 0.0
            && self.half_width > 0.0
            && self.ground.tile_size > 0.0
            && self.min_gap >= 0.0
            && self.ground_clearance >= 0.0
            && s.rings >= 1
            && s.azimuth_steps >= 1
            && s.max_range > s.min_range
            && s.min_range > 0.0
            && s.elevation_max_deg >= s.elevation_min_deg
            && self.trajectory.scans >= 1
            && self.trajectory.rate_hz > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument("invalid synthetic scene spec".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Primitive {
    fn lifted(self, dz: f64) -> Self {
        match self {
            Primitive::Box { min, max } => Primitive::Box {
                min: [min[0], min[1], min[2] + dz],
                max: [max[0], max[1], max[2] + dz],
            },
            Primitive::Cylinder { center, radius, z0, z1 } => Primitive::Cylinder { center, radius, z0: z0 + dz, z1: z1 + dz },
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: [center[0], center[1], center[2] + dz],
                radius,
            },
        }
    }

    /// xy bounding circle.
    fn xy_circle(&self) -> ([f64; 2], f64) {
        match *self {
            Primitive::Box { min, max } => {
                let c = [(min[0] + max[0]) * 0.5, (min[1] + max[1]) * 0.5];
                let r = ((max[0] - min[0]).powi(2) + (max[1] - min[1]).powi(2)).sqrt() * 0.5;
                (c, r)
            }
            Primitive::Cylinder { center, radius, .. } => (center, radius),
            Primitive::Sphere { center, radius } => ([center[0], center[1]], radius),
        }
    }

    fn xy_aabb(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Primitive::Box { min, max } => ([min[0], min[1]], [max[0], max[1]]),
            Primitive::Cylinder { .. } | Primitive::Sphere { .. } => {
                let (c, r) = self.xy_circle();
                ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r])
            }
        }
    }

    /// Smallest hit distance in `(t_min, t_max)` along a unit direction.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
        match *self {
            Primitive::Box { min, max } => {
                let mut t0 = t_min;
                let mut t1 = t_max;
                for a in 0..3 {
                    if d[a].abs() < 1e-12 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                    if t0 > t1 {
                        return None;
                    }
                }
                (t0 > t_min).then_some(t0)
            }
            Primitive::Cylinder { center, radius, z0, z1 } => {
                let mut best: Option<f64> = None;
                let ox = o.x - center[0];
                let oy = o.y - center[1];
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-14 {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = o.z + t * d.z;
                            if t > t_min && t < t_max && z >= z0 && z <= z1 {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                                break;
                            }
                        }
                    }
                }
                // Caps.
                if d.z.abs() > 1e-12 {
                    for zc in [z0, z1] {
                        let t = (zc - o.z) / d.z;
                        if t > t_min && t < t_max {
                            let x = ox + t * d.x;
                            let y = oy + t * d.y;
                            if x * x + y * y <= radius * radius {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                            }
                        }
                    }
                }
                best
            }
            Primitive::Sphere { center, radius } => {
                let oc = o - Vector3::from(center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq]
                    .into_iter()
                    .find(|&t| t > t_min && t < t_max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub kind: ObjectKind,
    pub class: ClassId,
    /// 1-based; stored in the upper 16 bits of `.label` words.
    pub instance: u16,
    pub parts: Vec<Primitive>,
}

impl PlacedObject {
    pub fn xy_footprint(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.parts {
            let (a, b) = p.xy_aabb();
            for k in 0..2 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        (lo, hi)
    }
}

fn aabb_gap(a: &([f64; 2], [f64; 2]), b: &([f64; 2], [f64; 2])) -> f64 {
    let dx = (b.0[0] - a.1[0]).max(a.0[0] - b.1[0]).max(0.0);
    let dy = (b.0[1] - a.1[1]).max(a.0[1] - b.1[1]).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// Piecewise-planar ground with class strips along the road.
#[derive(Debug, Clone)]
pub struct GroundModel {
    spec: GroundSpec,
    half_length: f64,
    half_width: f64,
    nx: i64,
    ny: i64,
    x0: i64,
    y0: i64,
    /// (height at tile centre, slope x, slope y)
    tiles: Vec<[f64; 3]>,
}

impl GroundModel {
    pub fn new(spec: &SyntheticSceneSpec) -> Self {
        let g = spec.ground.clone();
        let s = g.tile_size;
        let x0 = (-spec.half_length / s).floor() as i64;
        let y0 = (-spec.half_width / s).floor() as i64;
        let nx = (spec.half_length / s).floor() as i64 - x0 + 1;
        let ny = (spec.half_width / s).floor() as i64 - y0 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6772_6f75_6e64);
        let tiles = (0..nx * ny)
            .map(|_| {
                [
                    rng.random_range(-1.0..=1.0) * g.height_jitter,
                    rng.random_range(-1.0..=1.0) * g.max_slope,
                    rng.random_range(-1.0..=1.0) * g.max_slope,
                ]
            })
            .collect();
        Self {
            spec: g,
            half_length: spec.half_length,
            half_width: spec.half_width,
            nx,
            ny,
            x0,
            y0,
            tiles,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_length && y.abs() <= self.half_width
    }

    /// Strips are half-open (`[lo, hi)` in y) on both sides of the road.
    pub fn class_at(&self, y: f64) -> ClassId {
        let road = self.spec.road_half_width;
        let walk = road + self.spec.sidewalk_width;
        if (-road..road).contains(&y) {
            classes::ROAD
        } else if (-walk..walk).contains(&y) {
            classes::SIDEWALK
        } else {
            classes::TERRAIN
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let s = self.spec.tile_size;
        let ix = ((x / s).floor() - self.x0 as f64).clamp(0.0, (self.nx - 1) as f64) as i64;
        let iy = ((y / s).floor() - self.y0 as f64).clamp(0.0, (self.ny - 1) as f64) as i64;
        let [h, gx, gy] = self.tiles[(iy * self.nx + ix) as usize];
        let cx = ((ix + self.x0) as f64 + 0.5) * s;
        let cy = ((iy + self.y0) as f64 + 0.5) * s;
        let mut z = h + gx * (x - cx) + gy * (y - cy);
        if self.class_at(y) == classes::SIDEWALK {
            z += self.spec.sidewalk_height;
        }
        z
    }

    /// Fixed-point solve of `o_z + t d_z = height(o + t d)`; rays that graze a
    /// curb face or never descend return `None`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
        if d.z > -1e-6 {
            return None;
        }
        let mut t = (self.height(o.x, o.y) - o.z) / d.z;
        for _ in 0..30 {
            let p = o + d * t;
            let next = (self.height(p.x, p.y) - o.z) / d.z;
            if (next - t).abs() < 1e-9 {
                t = next;
                break;
            }
            t = next;
        }
        let p = o + d * t;
        let resid = (p.z - self.height(p.x, p.y)).abs();
        (t > 0.0 && t < t_max && resid < 1e-6 && self.contains(p.x, p.y)).then_some(t)
    }
}

fn base_intensity(class: ClassId) -> f64 {
    match class {
        classes::ROAD => 0.15,
        classes::SIDEWALK => 0.3,
        classes::TERRAIN => 0.45,
        classes::CAR => 0.6,
        classes::BUILDING => 0.35,
        classes::VEGETATION => 0.5,
        classes::POLE => 0.55,
        classes::TRAFFIC_SIGN => 0.85,
        classes::PERSON => 0.4,
        classes::BICYCLE => 0.5,
        _ => 0.5,
    }
}

fn place_object(
    kind: ObjectKind,
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSceneSpec,
    ground: &GroundModel,
) -> Vec<Primitive> {
    let g = &spec.ground;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sidewalk = (g.road_half_width + 0.3, g.road_half_width + g.sidewalk_width - 0.3);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    let (half_x, lateral) = match kind {
        ObjectKind::Car => (u(1.95, 2.35), (g.road_half_width - 1.7, g.road_half_width - 1.1)),
        ObjectKind::Building => (u(4.0, 8.0), (13.5, 17.0)),
        ObjectKind::Tree => (1.8, (g.road_half_width + g.sidewalk_width + 2.0, g.road_half_width + g.sidewalk_width + 4.5)),
        ObjectKind::Bicycle => (u(0.8, 0.9), sidewalk),
        _ => (0.4, sidewalk),
    };
    let cx = u(-spec.half_length + half_x, spec.half_length - half_x);
    let cy = side * u(lateral.0, lateral.1);
    let z = 0.0;
    let sink = if spec.ground_clearance > 0.0 { 0.0 } else { 0.5 };
    let parts = match kind {
        ObjectKind::Car => {
            let hy = u(0.85, 0.95);
            let h = u(1.4, 1.6);
            vec![Primitive::Box {
                min: [cx - half_x, cy - hy, z],
                max: [cx + half_x, cy + hy, z + h],
            }]
        }
        ObjectKind::Building => {
            let hy = u(2.5, 4.0);
            let h = u(4.0, 9.0);
            vec![Primitive::Box {
                min: [cx - half_x, cy - hy, z - sink],
                max: [cx + half_x, cy + hy, z + h],
            }]
        }
        ObjectKind::Tree => {
            let r = u(0.12, 0.2);
            let h = u(1.8, 2.6);
            let crown = u(1.0, 1.7);
            vec![
                Primitive::Cylinder { center: [cx, cy], radius: r, z0: z, z1: z + h },
                Primitive::Sphere { center: [cx, cy, z + h + crown * 0.8], radius: crown },
            ]
        }
        ObjectKind::Pole => {
            let r = u(0.08, 0.12);
            vec![Primitive::Cylinder { center: [cx, cy], radius: r, z0: z, z1: z + u(4.0, 6.0) }]
        }
        ObjectKind::TrafficSign => {
            let h = u(1.8, 2.3);
            let w = u(0.3, 0.4);
            vec![
                Primitive::Cylinder { center: [cx, cy], radius: 0.04, z0: z, z1: z + h },
                Primitive::Box {
                    min: [cx - 0.03, cy - w, z + h],
                    max: [cx + 0.03, cy + w, z + h + 2.0 * w],
                },
            ]
        }
        ObjectKind::Person => {
            vec![Primitive::Cylinder {
                center: [cx, cy],
                radius: u(0.2, 0.3),
                z0: z,
                z1: z + u(1.6, 1.85),
            }]
        }
        ObjectKind::Bicycle => {
            let hy = u(0.06, 0.1);
            vec![Primitive::Box {
                min: [cx - half_x, cy - hy, z],
                max: [cx + half_x, cy + hy, z + u(0.9, 1.1)],
            }]
        }
    };
    let base = highest_ground(ground, &parts) + spec.ground_clearance;
    parts.into_iter().map(|p| p.lifted(base)).collect()
}

fn highest_ground(ground: &GroundModel, parts: &[Primitive]) -> f64 {
    const SAMPLES: usize = 8;
    let mut top = f64::NEG_INFINITY;
    for p in parts {
        let (lo, hi) = p.xy_aabb();
        for i in 0..=SAMPLES {
            for j in 0..=SAMPLES {
                let x = lo[0] + (hi[0] - lo[0]) * i as f64 / SAMPLES as f64;
                let y = lo[1] + (hi[1] - lo[1]) * j as f64 / SAMPLES as f64;
                top = top.max(ground.height(x, y));
            }
        }
    }
    top
}

/// Places every requested object with pairwise footprint clearance of at
/// least `min_gap`.
pub fn place_objects(spec: &SyntheticSceneSpec, ground: &GroundModel) -> Result<Vec<PlacedObject>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6f62_6a65_6374);
    let mut placed: Vec<PlacedObject> = Vec::new();
    let mut footprints = Vec::new();
    for (&kind, &count) in &spec.objects {
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..spec.max_placement_attempts.max(1) {
                let parts = place_object(kind, &mut rng, spec, ground);
                let obj = PlacedObject {
                    kind,
                    class: kind.class(),
                    instance: (placed.len() + 1) as u16,
                    parts,
                };
                let fp = obj.xy_footprint();
                if footprints.iter().all(|other| aabb_gap(&fp, other) >= spec.min_gap) {
                    footprints.push(fp);
                    placed.push(obj);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::Generation(format!(
                    "could not place {kind:?} #{} with min_gap {} after {} attempts",
                    placed.iter().filter(|o| o.kind == kind).count() + 1,
                    spec.min_gap,
                    spec.max_placement_attempts
                )));
            }
        }
    }
    Ok(placed)
}

/// A generated sequence: scans in their sensor frames plus world poses.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub spec: SyntheticSceneSpec,
    pub scans: Vec<Scan>,
    pub poses: Vec<Pose>,
    pub objects: Vec<PlacedObject>,
}

pub fn trajectory_pose(spec: &SyntheticSceneSpec, k: usize) -> Pose {
    let tr = &spec.trajectory;
    let t = k as f64 / tr.rate_hz;
    let yaw = tr.yaw_amplitude_deg.to_radians() * (2.0 * PI * k as f64 / tr.scans.max(1) as f64).sin();
    Pose::from_yaw_translation(
        yaw,
        Vector3::new(tr.start_x + tr.speed * t, 0.0, spec.sensor.mount_height),
    )
}

/// Ray casts one sweep from `pose`.
pub fn cast_scan(
    spec: &SyntheticSceneSpec,
    ground: &GroundModel,
    objects: &[PlacedObject],
    pose: &Pose,
    scan_index: usize,
) -> Scan {
    let s = &spec.sensor;
    let o = pose.translation;
    let steps = s.azimuth_steps;
    let yaw = pose.rotation[(1, 0)].atan2(pose.rotation[(0, 0)]);

    // Azimuth culling: primitive indices per azimuth column.
    let prims: Vec<(Primitive, ClassId, u16)> = objects
        .iter()
        .flat_map(|obj| obj.parts.iter().map(move |p| (*p, obj.class, obj.instance)))
        .collect();
    let mut columns: Vec<Vec<u32>> = vec![Vec::new(); steps];
    let col_width = 2.0 * PI / steps as f64;
    for (pi, (prim, _, _)) in prims.iter().enumerate() {
        let (c, r) = prim.xy_circle();
        let dx = c[0] - o.x;
        let dy = c[1] - o.y;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist - r > s.max_range {
            continue;
        }
        if dist <= r + 1e-9 {
            columns.iter_mut().for_each(|col| col.push(pi as u32));
            continue;
        }
        let half = (r / dist).asin() + col_width;
        let centre = dy.atan2(dx) - yaw;
        let first = ((centre - half) / col_width).floor() as i64;
        let last = ((centre + half) / col_width).ceil() as i64;
        for j in first..=last {
            columns[j.rem_euclid(steps as i64) as usize].push(pi as u32);
        }
    }
    for col in &mut columns {
        col.sort_unstable();
        col.dedup();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ scan_index as u64);
    let range_noise = Normal::new(0.0, s.range_noise.max(0.0)).expect("finite sigma");
    let intensity_noise = Normal::new(0.0, s.intensity_noise.max(0.0)).expect("finite sigma");
    let rot_t = pose.rotation.transpose();

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for ring in 0..s.rings {
        let el = if s.rings == 1 {
            s.elevation_min_deg
        } else {
            s.elevation_min_deg
                + (s.elevation_max_deg - s.elevation_min_deg) * ring as f64 / (s.rings - 1) as f64
        }
        .to_radians();
        for (j, column) in columns.iter().enumerate() {
            let az = j as f64 * col_width;
            let local_dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let d = pose.rotation * local_dir;
            let mut best = ground
                .intersect(&o, &d, s.max_range)
                .map(|t| (t, ground.class_at((o + d * t).y), 0u16));
            for &pi in column {
                let (prim, class, inst) = &prims[pi as usize];
                let limit = best.map_or(s.max_range, |b| b.0);
                if let Some(t) = prim.intersect(&o, &d, 1e-6, limit) {
                    best = Some((t, *class, *inst));
                }
            }
            let Some((t, class, inst)) = best else {
                continue;
            };
            if t < s.min_range {
                continue;
            }
            let t_noisy = t + range_noise.sample(&mut rng);
            let world = o + d * t_noisy;
            let local = rot_t * (world - o);
            let intensity =
                (base_intensity(class) + intensity_noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push(ScanPoint::new(
                local.x as f32,
                local.y as f32,
                local.z as f32,
                intensity as f32,
            ));
            labels.push(((inst as u32) << 16) | class as u32);
        }
    }
    Scan {
        points,
        labels: Some(labels),
        scan_index,
        timestamp: scan_index as f64 / spec.trajectory.rate_hz,
    }
}

/// Generates a full sequence. Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let ground = GroundModel::new(spec);
    let objects = place_objects(spec, &ground)?;
    let poses: Vec<Pose> = (0..spec.trajectory.scans)
        .map(|k| trajectory_pose(spec, k))
        .collect();
    let scans = poses
        .iter()
        .enumerate()
        .map(|(k, pose)| cast_scan(spec, &ground, &objects, pose, k))
        .collect();
    Ok(SyntheticSequence {
        spec: spec.clone(),
        scans,
        poses,
        objects,
    })
}

/// Generates only the scans with the given indices; cheaper when a consumer
/// needs a sparse subset of a long trajectory.
pub fn generate_scans(spec: &SyntheticSceneSpec, scan_ids: &[usize]) -> Result<SyntheticSequence> {
    spec.validate()?;
    let ground = GroundModel::new(spec);
    let objects = place_objects(spec, &ground)?;
    let poses: Vec<Pose> = scan_ids.iter().map(|&k| trajectory_pose(spec, k)).collect();
    let scans = scan_ids
        .iter()
        .zip(&poses)
        .map(|(&k, pose)| cast_scan(spec, &ground, &objects, pose, k))
        .collect();
    Ok(SyntheticSequence {
        spec: spec.clone(),
        scans,
        poses,
        objects,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifest {
    pub format: String,
    pub seed: u64,
    pub spec: SyntheticSceneSpec,
    pub scans: usize,
    pub points: usize,
    pub class_names: Vec<String>,
}

impl SyntheticSequence {
    pub fn total_points(&self) -> usize {
        self.scans.iter().map(Scan::len).sum()
    }

    /// Per-class point counts over all scans.
    pub fn class_counts(&self) -> [usize; classes::NUM_CLASSES] {
        let mut counts = [0; classes::NUM_CLASSES];
        for scan in &self.scans {
            for &l in scan.labels.as_deref().unwrap_or_default() {
                counts[(l & 0xFFFF) as usize] += 1;
            }
        }
        counts
    }

    /// KITTI layout plus `manifest.json`.
    pub fn write(&self, seq_dir: &Path) -> Result<()> {
        kitti::write_sequence(seq_dir, &self.scans, &self.poses, &Pose::identity())?;
        let manifest = SyntheticManifest {
            format: "less-synthetic/1".into(),
            seed: self.spec.seed,
            spec: self.spec.clone(),
            scans: self.scans.len(),
            points: self.total_points(),
            class_names: classes::NAMES.iter().map(|s| s.to_string()).collect(),
        };
        let path = seq_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Convenience for tests: a point on the synthetic ground.
pub fn ground_point(ground: &GroundModel, x: f64, y: f64) -> Point3<f64> {
    Point3::new(x, y, ground.height(x, y))
}
