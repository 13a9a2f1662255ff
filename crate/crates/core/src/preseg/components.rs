use rayon::prelude::*;

use super::{Component, ComponentKind};
use crate::cloud::FusedCloud;
use crate::spatial::SpatialGrid;

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        true
    }
}

/// Connection radius of a point: `range * d`.
#[inline]
pub fn adaptive_radius(range: f64, d: f64) -> f64 {
    range * d
}

/// Groups `ids` into connected components of the graph with an edge between
/// `u` and `v` iff `‖u − v‖ < max(r_u, r_v) · d`.
///
/// Every point only searches its own radius `r_u · d`; the edge `(u, v)` with
/// `r_v > r_u` is found from `v`'s side, so the union of both searches is the
/// exact edge set. Components come out with ascending point ids, ordered by
/// their smallest id.
pub fn connected_components(cloud: &FusedCloud, ids: &[u32], d: f64) -> Vec<Component> {
    if ids.is_empty() {
        return Vec::new();
    }
    let mut radii: Vec<f64> = ids
        .iter()
        .map(|&i| adaptive_radius(cloud.range[i as usize], d))
        .collect();
    let max_radius = radii.iter().cloned().fold(0.0_f64, f64::max);
    radii.sort_by(|a, b| a.total_cmp(b));
    let median = radii[radii.len() / 2];
    let cell = (2.0 * median).max(max_radius / 8.0).max(1e-6);
    let grid = SpatialGrid::new(&cloud.points, Some(ids), cell);

    // Edges per point (to larger ids only), generated in parallel.
    let neighbors: Vec<Vec<u32>> = ids
        .par_iter()
        .map(|&u| {
            let r = adaptive_radius(cloud.range[u as usize], d);
            let mut out = Vec::new();
            grid.for_each_within(&cloud.points[u as usize], r, |v, _| {
                if v != u {
                    out.push(v);
                }
            });
            out
        })
        .collect();

    // Union-find over the global point id space restricted to `ids`.
    let n = cloud.len();
    let mut local = vec![u32::MAX; n];
    for (k, &i) in ids.iter().enumerate() {
        local[i as usize] = k as u32;
    }
    let mut uf = UnionFind::new(ids.len());
    for (k, nb) in neighbors.iter().enumerate() {
        for &v in nb {
            uf.union(k as u32, local[v as usize]);
        }
    }
    let mut root_to_comp = vec![u32::MAX; ids.len()];
    let mut sorted: Vec<u32> = ids.to_vec();
    sorted.sort_unstable();
    let mut comps: Vec<Vec<u32>> = Vec::new();
    for &i in &sorted {
        let root = uf.find(local[i as usize]) as usize;
        if root_to_comp[root] == u32::MAX {
            root_to_comp[root] = comps.len() as u32;
            comps.push(Vec::new());
        }
        comps[root_to_comp[root] as usize].push(i);
    }
    comps
        .into_iter()
        .map(|point_ids| Component {
            point_ids,
            kind: ComponentKind::Object,
            cell: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn pair(dist: f64, r_u: f64, r_v: f64) -> FusedCloud {
        FusedCloud {
            points: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(dist, 0.0, 0.0)],
            intensity: vec![0.0; 2],
            range: vec![r_u, r_v],
            scan_index: vec![0; 2],
            time_offset: vec![0; 2],
            gt_label: None,
        }
    }

    #[test]
    fn threshold_uses_larger_range() {
        // τ = max(10, 20) · 0.01 = 0.2
        let c = pair(0.15, 10.0, 20.0);
        assert_eq!(connected_components(&c, &[0, 1], 0.01).len(), 1);
        let c = pair(0.25, 10.0, 20.0);
        assert_eq!(connected_components(&c, &[0, 1], 0.01).len(), 2);
    }

    #[test]
    fn comparison_is_strict() {
        let c = pair(0.5, 50.0, 10.0);
        assert_eq!(connected_components(&c, &[0, 1], 0.01).len(), 2);
    }

    #[test]
    fn union_find_basics() {
        let mut uf = UnionFind::new(5);
        assert!(uf.union(0, 1));
        assert!(uf.union(3, 4));
        assert!(!uf.union(1, 0));
        assert_eq!(uf.find(0), uf.find(1));
        assert_ne!(uf.find(1), uf.find(3));
    }

    #[test]
    fn subset_of_ids_only() {
        let c = pair(0.1, 10.0, 10.0);
        let comps = connected_components(&c, &[1], 0.01);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].point_ids, vec![1]);
    }
}
