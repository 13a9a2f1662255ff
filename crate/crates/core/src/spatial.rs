//! Uniform hash grid over 3D points for radius and k-nearest queries.

use nalgebra::Point3;
use rustc_hash::FxHashMap;

type Key = (i32, i32, i32);

#[derive(Debug, Clone)]
pub struct SpatialGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    /// Point ids grouped by cell, contiguous per cell.
    order: Vec<u32>,
    cells: FxHashMap<Key, (u32, u32)>,
    lo: Key,
    hi: Key,
}

impl<'a> SpatialGrid<'a> {
    /// Indexes `ids` (or every point when `None`).
    pub fn new(points: &'a [Point3<f64>], ids: Option<&[u32]>, cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut keyed: Vec<(Key, u32)> = match ids {
            Some(ids) => ids.iter().map(|&i| (key(&points[i as usize], cell), i)).collect(),
            None => (0..points.len() as u32)
                .map(|i| (key(&points[i as usize], cell), i))
                .collect(),
        };
        keyed.sort_unstable();
        let mut cells = FxHashMap::default();
        let mut lo = (i32::MAX, i32::MAX, i32::MAX);
        let mut hi = (i32::MIN, i32::MIN, i32::MIN);
        let mut start = 0;
        while start < keyed.len() {
            let k = keyed[start].0;
            let mut end = start + 1;
            while end < keyed.len() && keyed[end].0 == k {
                end += 1;
            }
            cells.insert(k, (start as u32, end as u32));
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            start = end;
        }
        Self {
            points,
            cell,
            order: keyed.into_iter().map(|(_, i)| i).collect(),
            cells,
            lo,
            hi,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn cell_points(&self, k: &Key) -> &[u32] {
        match self.cells.get(k) {
            Some(&(a, b)) => &self.order[a as usize..b as usize],
            None => &[],
        }
    }

    /// Calls `f(id, squared_distance)` for indexed points strictly closer
    /// than `radius`.
    pub fn for_each_within(&self, center: &Point3<f64>, radius: f64, mut f: impl FnMut(u32, f64)) {
        if self.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let a = key(&Point3::new(center.x - radius, center.y - radius, center.z - radius), self.cell);
        let b = key(&Point3::new(center.x + radius, center.y + radius, center.z + radius), self.cell);
        for x in a.0.max(self.lo.0)..=b.0.min(self.hi.0) {
            for y in a.1.max(self.lo.1)..=b.1.min(self.hi.1) {
                for z in a.2.max(self.lo.2)..=b.2.min(self.hi.2) {
                    for &id in self.cell_points(&(x, y, z)) {
                        let d2 = (self.points[id as usize] - center).norm_squared();
                        if d2 < r2 {
                            f(id, d2);
                        }
                    }
                }
            }
        }
    }

    /// The `k` nearest indexed points as `(squared_distance, id)`, ascending,
    /// ties broken by id. `exclude` skips one id (typically the query itself).
    pub fn knn(&self, center: &Point3<f64>, k: usize, exclude: Option<u32>) -> Vec<(f64, u32)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k == 0 || self.is_empty() {
            return best;
        }
        let c = key(center, self.cell);
        let max_shell = [
            (c.0 - self.lo.0).abs(),
            (self.hi.0 - c.0).abs(),
            (c.1 - self.lo.1).abs(),
            (self.hi.1 - c.1).abs(),
            (c.2 - self.lo.2).abs(),
            (self.hi.2 - c.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let consider = |id: u32, best: &mut Vec<(f64, u32)>| {
            if Some(id) == exclude {
                return;
            }
            let d2 = (self.points[id as usize] - center).norm_squared();
            if best.len() == k {
                let worst = best[k - 1];
                if (d2, id) >= worst {
                    return;
                }
                best.pop();
            }
            let pos = best.partition_point(|e| *e < (d2, id));
            best.insert(pos, (d2, id));
        };
        for s in 0..=max_shell {
            for x in (c.0 - s)..=(c.0 + s) {
                for y in (c.1 - s)..=(c.1 + s) {
                    let on_face = x == c.0 - s || x == c.0 + s || y == c.1 - s || y == c.1 + s;
                    if on_face {
                        for z in (c.2 - s)..=(c.2 + s) {
                            for &id in self.cell_points(&(x, y, z)) {
                                consider(id, &mut best);
                            }
                        }
                    } else {
                        for z in [c.2 - s, c.2 + s] {
                            for &id in self.cell_points(&(x, y, z)) {
                                consider(id, &mut best);
                            }
                        }
                    }
                }
            }
            // Anything outside shell `s` is at least `s * cell` away.
            if best.len() == k {
                let reach = s as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        best
    }
}

#[inline]
fn key(p: &Point3<f64>, cell: f64) -> Key {
    (
        (p.x / cell).floor() as i32,
        (p.y / cell).floor() as i32,
        (p.z / cell).floor() as i32,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = cloud(600, 1);
        for cell in [0.3, 1.0, 4.0] {
            let grid = SpatialGrid::new(&pts, None, cell);
            for q in 0..40u32 {
                let got = grid.knn(&pts[q as usize], 16, Some(q));
                let mut all: Vec<(f64, u32)> = (0..pts.len() as u32)
                    .filter(|&i| i != q)
                    .map(|i| ((pts[i as usize] - pts[q as usize]).norm_squared(), i))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.truncate(16);
                assert_eq!(got, all);
            }
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = cloud(400, 2);
        let grid = SpatialGrid::new(&pts, None, 0.5);
        let c = Point3::new(0.3, -0.2, 0.1);
        let mut got = Vec::new();
        grid.for_each_within(&c, 1.3, |i, _| got.push(i));
        got.sort_unstable();
        let want: Vec<u32> = (0..pts.len() as u32)
            .filter(|&i| (pts[i as usize] - c).norm() < 1.3)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn knn_with_fewer_points_than_k() {
        let pts = cloud(5, 3);
        let grid = SpatialGrid::new(&pts, None, 0.5);
        assert_eq!(grid.knn(&pts[0], 16, Some(0)).len(), 4);
    }
}
