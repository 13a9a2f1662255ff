use std::collections::BTreeMap;

use super::{Component, ComponentKind, PresegConfig};
use crate::cloud::FusedCloud;

/// xy bounding-box side lengths of a set of points.
pub fn xy_extent(cloud: &FusedCloud, ids: &[u32]) -> (f64, f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for &i in ids {
        let p = &cloud.points[i as usize];
        lo[0] = lo[0].min(p.x);
        lo[1] = lo[1].min(p.y);
        hi[0] = hi[0].max(p.x);
        hi[1] = hi[1].max(p.y);
    }
    (hi[0] - lo[0], hi[1] - lo[1])
}

/// Splits object components whose xy box exceeds `max_component_extent` along
/// a global xy grid of that pitch. Ground components and components that
/// already fit are passed through.
pub fn subdivide_components(cloud: &FusedCloud, components: Vec<Component>, config: &PresegConfig) -> Vec<Component> {
    let pitch = config.max_component_extent;
    let mut out = Vec::with_capacity(components.len());
    for comp in components {
        if comp.kind == ComponentKind::Ground {
            out.push(comp);
            continue;
        }
        let (ex, ey) = xy_extent(cloud, &comp.point_ids);
        if ex <= pitch && ey <= pitch {
            out.push(comp);
            continue;
        }
        let mut pieces: BTreeMap<(i64, i64), Vec<u32>> = BTreeMap::new();
        for &i in &comp.point_ids {
            let p = &cloud.points[i as usize];
            let key = ((p.x / pitch).floor() as i64, (p.y / pitch).floor() as i64);
            pieces.entry(key).or_default().push(i);
        }
        out.extend(pieces.into_values().map(|point_ids| Component {
            point_ids,
            kind: ComponentKind::Object,
            cell: None,
        }));
    }
    out
}

/// Keeps components with more than `min_component_points` points; the rest
/// become the ignored set (ascending ids).
pub fn filter_small(components: Vec<Component>, config: &PresegConfig) -> (Vec<Component>, Vec<u32>) {
    let mut ignored = Vec::new();
    let kept = components
        .into_iter()
        .filter_map(|c| {
            if c.point_ids.len() > config.min_component_points {
                Some(c)
            } else {
                ignored.extend_from_slice(&c.point_ids);
                None
            }
        })
        .collect();
    ignored.sort_unstable();
    (kept, ignored)
}
