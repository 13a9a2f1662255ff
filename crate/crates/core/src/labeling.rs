//! Simulated component-wise annotation and the derived label types.
//!
//! An annotator clicks `clicks_per_class` points for every class that covers
//! more than `purity_cutoff_fraction` of a component. From the clicks:
//!
//! - **sparse** labels are the clicked points themselves,
//! - **weak** labels give every point of a component the set of classes
//!   clicked in it,
//! - **propagated** labels assign the single clicked class to every point of
//!   a component in which exactly one class was clicked.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preseg::{Component, IGNORED};
use crate::{stream_seed, ClassId, Error, Result, MAX_CLASSES, UNLABELED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    /// Classes with at most this fraction of a component's points are not clicked.
    pub purity_cutoff_fraction: f64,
    pub clicks_per_class: usize,
    /// Probability that a click is replaced by a uniformly drawn wrong class.
    pub noise_rate: f64,
    pub rng_seed: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            purity_cutoff_fraction: 0.05,
            clicks_per_class: 1,
            noise_rate: 0.0,
            rng_seed: 0,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.purity_cutoff_fraction) {
            return Err(Error::Argument(format!(
                "purity_cutoff_fraction must be in [0, 1), got {}",
                self.purity_cutoff_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Argument(format!("noise_rate must be in [0, 1), got {}", self.noise_rate)));
        }
        if self.clicks_per_class == 0 {
            return Err(Error::Argument("clicks_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn check_num_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::Argument(format!("num_classes must be in 1..={MAX_CLASSES}, got {num_classes}")));
    }
    Ok(())
}

/// Per-class point counts of one component; [`UNLABELED`] points are skipped.
fn class_counts(gt: &[ClassId], ids: &[u32], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &p in ids {
        let c = *gt
            .get(p as usize)
            .ok_or_else(|| Error::Consistency(format!("point {p} outside ground truth of length {}", gt.len())))?;
        if c == UNLABELED {
            continue;
        }
        *counts
            .get_mut(c as usize)
            .ok_or_else(|| Error::Consistency(format!("point {p} has class {c} >= {num_classes}")))? += 1;
    }
    Ok(counts)
}

/// Clicks `(point, class)` for every component, ascending by point id.
///
/// Each component draws from its own seeded stream, so the result does not
/// depend on thread count.
pub fn simulate_annotation(
    gt: &[ClassId],
    components: &[Component],
    num_classes: usize,
    config: &AnnotationConfig,
) -> Result<Vec<(u32, ClassId)>> {
    config.validate()?;
    check_num_classes(num_classes)?;
    let per_component: Vec<Vec<(u32, ClassId)>> = components
        .par_iter()
        .enumerate()
        .map(|(ci, comp)| {
            let counts = class_counts(gt, &comp.point_ids, num_classes)?;
            let cutoff = config.purity_cutoff_fraction * comp.len() as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.rng_seed, ci as u64));
            let mut clicks = Vec::new();
            for (c, &count) in counts.iter().enumerate() {
                if count as f64 <= cutoff || count == 0 {
                    continue;
                }
                let members: Vec<u32> = comp.point_ids.iter().copied().filter(|&p| gt[p as usize] as usize == c).collect();
                let k = config.clicks_per_class.min(members.len());
                let mut picks: Vec<usize> = sample(&mut rng, members.len(), k).into_vec();
                picks.sort_unstable();
                for i in picks {
                    let mut class = c as ClassId;
                    if config.noise_rate > 0.0 && num_classes > 1 && rng.random_bool(config.noise_rate) {
                        let r = rng.random_range(0..num_classes - 1);
                        class = if r >= c { r + 1 } else { r } as ClassId;
                    }
                    clicks.push((members[i], class));
                }
            }
            if clicks.is_empty() {
                log::debug!("component {ci} ({} points) has no class above the purity cutoff", comp.len());
            }
            Ok(clicks)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<_> = per_component.into_iter().flatten().collect();
    all.sort_unstable_by_key(|&(p, _)| p);
    Ok(all)
}

/// Point labels at random positions, ignoring components; the baseline policy.
pub fn random_point_labels(gt: &[ClassId], budget: usize, seed: u64) -> Vec<(u32, ClassId)> {
    let candidates: Vec<u32> = (0..gt.len() as u32).filter(|&p| gt[p as usize] != UNLABELED).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<u32> = sample(&mut rng, candidates.len(), budget.min(candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picks.sort_unstable();
    picks.into_iter().map(|p| (p, gt[p as usize])).collect()
}

/// All three label types over one fused cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBundle {
    pub num_classes: usize,
    /// Clicked points, ascending.
    pub sparse: Vec<(u32, ClassId)>,
    /// Component of each point, [`IGNORED`] outside every component.
    pub component_of: Vec<u32>,
    /// Bitset of clicked classes per component.
    pub component_masks: Vec<u32>,
    /// Per point, [`UNLABELED`] where no label was propagated.
    pub propagated: Vec<ClassId>,
}

impl LabelBundle {
    /// Clicks without components: no weak or propagated labels.
    pub fn sparse_only(num_points: usize, sparse: &[(u32, ClassId)], num_classes: usize) -> Result<Self> {
        check_num_classes(num_classes)?;
        if let Some(&(p, c)) = sparse.iter().find(|&&(p, c)| p as usize >= num_points || c as usize >= num_classes) {
            return Err(Error::Consistency(format!("click ({p}, {c}) out of range")));
        }
        let mut sparse = sparse.to_vec();
        sparse.sort_unstable_by_key(|&(p, _)| p);
        Ok(Self {
            num_classes,
            sparse,
            component_of: vec![IGNORED; num_points],
            component_masks: Vec::new(),
            propagated: vec![UNLABELED; num_points],
        })
    }

    pub fn num_points(&self) -> usize {
        self.component_of.len()
    }

    /// Weak label of point `p` as a class bitset; 0 means the point is unlabeled.
    #[inline]
    pub fn weak_mask(&self, p: usize) -> u32 {
        match self.component_of[p] {
            IGNORED => 0,
            c => self.component_masks[c as usize],
        }
    }

    /// Points that carry no label of any kind.
    pub fn ignored(&self) -> Vec<u32> {
        (0..self.num_points()).filter(|&p| self.weak_mask(p) == 0).map(|p| p as u32).collect()
    }

    pub fn weak_count(&self) -> usize {
        (0..self.num_points()).filter(|&p| self.weak_mask(p) != 0).count()
    }

    pub fn propagated_count(&self) -> usize {
        self.propagated.iter().filter(|&&c| c != UNLABELED).count()
    }

    /// Sparse labels as a per-point array with [`UNLABELED`] elsewhere.
    pub fn sparse_dense(&self) -> Vec<ClassId> {
        let mut out = vec![UNLABELED; self.num_points()];
        for &(p, c) in &self.sparse {
            out[p as usize] = c;
        }
        out
    }

    /// Propagated labels with clicked points removed, so that each point is
    /// supervised by at most one of the two dense label types.
    pub fn propagated_without_sparse(&self) -> Vec<ClassId> {
        let mut out = self.propagated.clone();
        for &(p, _) in &self.sparse {
            out[p as usize] = UNLABELED;
        }
        out
    }

    /// Writes `sparse.bin`, `weak.bin` and `propagated.bin` into `dir`.
    ///
    /// - `sparse.bin`: `(u32 point, u16 class)` records.
    /// - `weak.bin`: `u32` class count, component count and point count, then
    ///   one `u32` bitset per component and one `u32` component id per point.
    /// - `propagated.bin`: one `u16` per point, `0xFFFF` for unlabeled.
    ///
    /// All little-endian.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut sparse = Vec::with_capacity(self.sparse.len() * 6);
        for &(p, c) in &self.sparse {
            sparse.extend_from_slice(&p.to_le_bytes());
            sparse.extend_from_slice(&c.to_le_bytes());
        }
        let mut weak = Vec::new();
        for v in [self.num_classes, self.component_masks.len(), self.num_points()] {
            weak.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in self.component_masks.iter().chain(&self.component_of) {
            weak.extend_from_slice(&v.to_le_bytes());
        }
        let propagated: Vec<u8> = self.propagated.iter().flat_map(|c| c.to_le_bytes()).collect();
        for (name, bytes) in [("sparse.bin", sparse), ("weak.bin", weak), ("propagated.bin", propagated)] {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map(|b| (path.clone(), b)).map_err(|e| Error::io(&path, e))
        };
        let truncated = |path: &Path, offset: usize, what: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("truncated {what}"),
        };
        let u32_at = |b: &[u8], i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);

        let (wpath, weak) = load("weak.bin")?;
        if weak.len() < 12 {
            return Err(truncated(&wpath, 0, "header"));
        }
        let num_classes = u32_at(&weak, 0) as usize;
        let num_components = u32_at(&weak, 4) as usize;
        let num_points = u32_at(&weak, 8) as usize;
        check_num_classes(num_classes)?;
        let expected = 12 + 4 * (num_components + num_points);
        if weak.len() != expected {
            return Err(truncated(&wpath, weak.len().min(expected), "weak labels"));
        }
        let words: Vec<u32> = (12..expected).step_by(4).map(|i| u32_at(&weak, i)).collect();
        let (component_masks, component_of) = (words[..num_components].to_vec(), words[num_components..].to_vec());
        if let Some(p) = component_of.iter().position(|&c| c != IGNORED && c as usize >= num_components) {
            return Err(Error::Format {
                path: wpath,
                offset: (12 + 4 * (num_components + p)) as u64,
                message: format!("component id {} out of range", component_of[p]),
            });
        }

        let (spath, sparse_bytes) = load("sparse.bin")?;
        if sparse_bytes.len() % 6 != 0 {
            return Err(truncated(&spath, sparse_bytes.len() - sparse_bytes.len() % 6, "sparse record"));
        }
        let sparse = sparse_bytes
            .chunks_exact(6)
            .map(|r| (u32_at(r, 0), u16::from_le_bytes([r[4], r[5]])))
            .collect();

        let (ppath, prop_bytes) = load("propagated.bin")?;
        if prop_bytes.len() != 2 * num_points {
            return Err(truncated(&ppath, prop_bytes.len().min(2 * num_points), "propagated labels"));
        }
        let propagated = prop_bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        Ok(Self {
            num_classes,
            sparse,
            component_of,
            component_masks,
            propagated,
        })
    }
}

/// Builds weak and propagated labels from clicks over the given components.
pub fn derive_labels(
    num_points: usize,
    components: &[Component],
    sparse: &[(u32, ClassId)],
    num_classes: usize,
) -> Result<LabelBundle> {
    check_num_classes(num_classes)?;
    let mut component_of = vec![IGNORED; num_points];
    for (ci, comp) in components.iter().enumerate() {
        for &p in &comp.point_ids {
            let slot = component_of
                .get_mut(p as usize)
                .ok_or_else(|| Error::Consistency(format!("component {ci} references point {p} of {num_points}")))?;
            if *slot != IGNORED {
                return Err(Error::Consistency(format!("point {p} is in components {} and {ci}", *slot)));
            }
            *slot = ci as u32;
        }
    }
    let mut component_masks = vec![0u32; components.len()];
    for &(p, c) in sparse {
        if c as usize >= num_classes {
            return Err(Error::Consistency(format!("click at point {p} has class {c} >= {num_classes}")));
        }
        match component_of.get(p as usize) {
            Some(&ci) if ci != IGNORED => component_masks[ci as usize] |= 1 << c,
            _ => return Err(Error::Consistency(format!("click at point {p} is outside every component"))),
        }
    }
    let mut propagated = vec![UNLABELED; num_points];
    for (comp, &mask) in components.iter().zip(&component_masks) {
        if mask.count_ones() == 1 {
            let class = mask.trailing_zeros() as ClassId;
            for &p in &comp.point_ids {
                propagated[p as usize] = class;
            }
        }
    }
    let mut sparse = sparse.to_vec();
    sparse.sort_unstable_by_key(|&(p, _)| p);
    Ok(LabelBundle {
        num_classes,
        sparse,
        component_of,
        component_masks,
        propagated,
    })
}

/// Per-class label coverage relative to the class's ground-truth point count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    pub class: String,
    pub points: usize,
    pub sparse: usize,
    pub propagated: usize,
    pub sparse_coverage: f64,
    pub propagated_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_points: usize,
    pub num_components: usize,
    pub one_category: f64,
    pub two_category: f64,
    pub more_categories: f64,
    pub mean_categories: f64,
    pub sparse_labels: usize,
    /// Excludes clicked points.
    pub propagated_labels: usize,
    pub weak_labels: usize,
    pub ignored_points: usize,
    pub sparse_coverage: f64,
    pub propagated_coverage: f64,
    pub weak_coverage: f64,
    /// Fraction of propagated labels that disagree with ground truth.
    pub propagated_error_rate: f64,
    pub per_class: Vec<ClassCoverage>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Purity of the components (by ground truth) and coverage of each label type.
///
/// Components without any labeled ground-truth point are left out of the
/// category fractions.
pub fn label_statistics(
    bundle: &LabelBundle,
    components: &[Component],
    gt: &[ClassId],
    class_names: &[&str],
) -> Result<StatsReport> {
    let n = bundle.num_points();
    let nc = bundle.num_classes;
    if gt.len() != n {
        return Err(Error::Consistency(format!("{} ground-truth labels for {n} points", gt.len())));
    }
    if class_names.len() != nc {
        return Err(Error::Argument(format!("{} class names for {nc} classes", class_names.len())));
    }
    let mut hist = [0usize; 3];
    let mut categories = 0usize;
    let mut counted = 0usize;
    for comp in components {
        let k = class_counts(gt, &comp.point_ids, nc)?.iter().filter(|&&c| c > 0).count();
        if k == 0 {
            continue;
        }
        counted += 1;
        categories += k;
        hist[k.min(3) - 1] += 1;
    }

    let mut gt_points = vec![0usize; nc];
    for &c in gt {
        if (c as usize) < nc {
            gt_points[c as usize] += 1;
        }
    }
    let mut sparse_per = vec![0usize; nc];
    for &(_, c) in &bundle.sparse {
        sparse_per[c as usize] += 1;
    }
    let propagated = bundle.propagated_without_sparse();
    let mut prop_per = vec![0usize; nc];
    let (mut prop_total, mut prop_checked, mut prop_wrong) = (0, 0, 0);
    for (p, &c) in propagated.iter().enumerate() {
        if c == UNLABELED {
            continue;
        }
        prop_total += 1;
        prop_per[c as usize] += 1;
        if gt[p] != UNLABELED {
            prop_checked += 1;
            prop_wrong += usize::from(gt[p] != c);
        }
    }
    let weak = bundle.weak_count();
    let per_class = (0..nc)
        .map(|c| ClassCoverage {
            class: class_names[c].to_string(),
            points: gt_points[c],
            sparse: sparse_per[c],
            propagated: prop_per[c],
            sparse_coverage: ratio(sparse_per[c], gt_points[c]),
            propagated_coverage: ratio(prop_per[c], gt_points[c]),
        })
        .collect();
    Ok(StatsReport {
        num_points: n,
        num_components: components.len(),
        one_category: ratio(hist[0], counted),
        two_category: ratio(hist[1], counted),
        more_categories: ratio(hist[2], counted),
        mean_categories: ratio(categories, counted),
        sparse_labels: bundle.sparse.len(),
        propagated_labels: prop_total,
        weak_labels: weak,
        ignored_points: n - weak,
        sparse_coverage: ratio(bundle.sparse.len(), n),
        propagated_coverage: ratio(prop_total, n),
        weak_coverage: ratio(weak, n),
        propagated_error_rate: ratio(prop_wrong, prop_checked),
        per_class,
    })
}

impl StatsReport {
    /// Merges reports over disjoint clouds (e.g. all windows of a split).
    pub fn merge(reports: &[StatsReport]) -> Option<StatsReport> {
        let first = reports.first()?;
        let sum = |f: fn(&StatsReport) -> usize| reports.iter().map(f).sum::<usize>();
        let comps_weighted = |f: fn(&StatsReport) -> f64| {
            let total: usize = sum(|r| r.num_components);
            reports.iter().map(|r| f(r) * r.num_components as f64).sum::<f64>() / total.max(1) as f64
        };
        let n = sum(|r| r.num_points);
        let (sparse, prop, weak) = (sum(|r| r.sparse_labels), sum(|r| r.propagated_labels), sum(|r| r.weak_labels));
        let wrong: f64 = reports
            .iter()
            .map(|r| r.propagated_error_rate * r.propagated_labels as f64)
            .sum();
        let per_class = (0..first.per_class.len())
            .map(|c| {
                let points = reports.iter().map(|r| r.per_class[c].points).sum();
                let s = reports.iter().map(|r| r.per_class[c].sparse).sum();
                let p = reports.iter().map(|r| r.per_class[c].propagated).sum();
                ClassCoverage {
                    class: first.per_class[c].class.clone(),
                    points,
                    sparse: s,
                    propagated: p,
                    sparse_coverage: ratio(s, points),
                    propagated_coverage: ratio(p, points),
                }
            })
            .collect();
        Some(StatsReport {
            num_points: n,
            num_components: sum(|r| r.num_components),
            one_category: comps_weighted(|r| r.one_category),
            two_category: comps_weighted(|r| r.two_category),
            more_categories: comps_weighted(|r| r.more_categories),
            mean_categories: comps_weighted(|r| r.mean_categories),
            sparse_labels: sparse,
            propagated_labels: prop,
            weak_labels: weak,
            ignored_points: sum(|r| r.ignored_points),
            sparse_coverage: ratio(sparse, n),
            propagated_coverage: ratio(prop, n),
            weak_coverage: ratio(weak, n),
            propagated_error_rate: if prop == 0 { 0.0 } else { wrong / prop as f64 },
            per_class,
        })
    }

    /// Human-readable table: purity and coverage, then per-class coverage.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:.1}%", 100.0 * v);
        let rows = [
            ("one-category components", pct(self.one_category)),
            ("two-category components", pct(self.two_category)),
            ("components with more than two categories", pct(self.more_categories)),
            ("average number of categories per component", format!("{:.2}", self.mean_categories)),
            ("coverage of sparse labels", format!("{:.3}%", 100.0 * self.sparse_coverage)),
            ("coverage of propagated labels", pct(self.propagated_coverage)),
            ("coverage of weak labels", pct(self.weak_coverage)),
            ("propagated label error rate", format!("{:.3}%", 100.0 * self.propagated_error_rate)),
        ];
        let _ = writeln!(s, "{} points, {} components", self.num_points, self.num_components);
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<44} {v:>8}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>10} {:>14} {:>14}", "class", "points", "sparse (x0.1%)", "propagated (%)");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>14.2} {:>14.1}",
                c.class,
                c.points,
                1000.0 * c.sparse_coverage,
                100.0 * c.propagated_coverage
            );
        }
        s
    }
}

/// Inverse-square-root frequency weights, rescaled to mean 1 over the classes
/// that occur; absent classes get weight 0.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return Err(Error::Argument("class_weights: all counts are zero".into()));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / (c as f64).sqrt() } else { 0.0 })
        .collect();
    let mean = raw.iter().sum::<f64>() / present as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preseg::ComponentKind;
    use approx::assert_relative_eq;

    fn comp(ids: std::ops::Range<u32>) -> Component {
        Component {
            point_ids: ids.collect(),
            kind: ComponentKind::Object,
            cell: None,
        }
    }

    #[test]
    fn pure_component_gets_one_click() {
        let gt = vec![3u16; 200];
        let clicks = simulate_annotation(&gt, &[comp(0..200)], 5, &AnnotationConfig::default()).unwrap();
        assert_eq!(clicks.len(), 1);
        assert_eq!(clicks[0].1, 3);
    }

    #[test]
    fn cutoff_is_strict() {
        let mut gt = vec![0u16; 94];
        gt.extend([1u16; 6]);
        let clicks = simulate_annotation(&gt, &[comp(0..100)], 3, &AnnotationConfig::default()).unwrap();
        assert_eq!(clicks.iter().map(|c| c.1).collect::<Vec<_>>(), vec![0, 1]);

        let mut gt = vec![0u16; 95];
        gt.extend([1u16; 5]);
        let clicks = simulate_annotation(&gt, &[comp(0..100)], 3, &AnnotationConfig::default()).unwrap();
        assert_eq!(clicks.len(), 1);
    }

    #[test]
    fn clicks_per_class_and_determinism() {
        let gt: Vec<u16> = (0..300).map(|i| (i % 3) as u16).collect();
        let config = AnnotationConfig { clicks_per_class: 4, rng_seed: 7, ..Default::default() };
        let comps = [comp(0..150), comp(150..300)];
        let a = simulate_annotation(&gt, &comps, 3, &config).unwrap();
        let b = simulate_annotation(&gt, &comps, 3, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 3 * 4);
        assert!(a.iter().all(|&(p, c)| gt[p as usize] == c));
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn noise_always_picks_a_wrong_class() {
        let gt = vec![2u16; 200];
        let comps: Vec<_> = (0..20).map(|i| comp(i * 10..i * 10 + 10)).collect();
        let config = AnnotationConfig { noise_rate: 0.999, ..Default::default() };
        let clicks = simulate_annotation(&gt, &comps, 4, &config).unwrap();
        assert_eq!(clicks.len(), 20);
        assert!(clicks.iter().all(|&(_, c)| c != 2 && c < 4));
    }

    #[test]
    fn derive_single_and_mixed_components() {
        // component 0: one click (class 7); component 1: two classes; component 2: none
        let comps = [comp(0..10), comp(10..20), comp(20..30)];
        let bundle = derive_labels(32, &comps, &[(3, 7), (12, 9), (15, 7)], 10).unwrap();
        assert!(bundle.propagated[..10].iter().all(|&c| c == 7));
        assert!(bundle.propagated[10..].iter().all(|&c| c == UNLABELED));
        assert_eq!(bundle.weak_mask(0), 1 << 7);
        assert_eq!(bundle.weak_mask(11), (1 << 7) | (1 << 9));
        assert_eq!(bundle.weak_mask(25), 0);
        assert_eq!(bundle.weak_mask(31), 0);
        assert_eq!(bundle.ignored(), (20..32).collect::<Vec<_>>());
    }

    #[test]
    fn derive_rejects_clicks_outside_components() {
        assert!(matches!(derive_labels(10, &[comp(0..5)], &[(7, 0)], 2), Err(Error::Consistency(_))));
    }

    #[test]
    fn empty_annotation_gives_empty_bundle() {
        let bundle = derive_labels(10, &[comp(0..10)], &[], 3).unwrap();
        assert_eq!(bundle.weak_count(), 0);
        assert_eq!(bundle.propagated_count(), 0);
    }

    #[test]
    fn weights_examples() {
        let w = class_weights(&[1, 4]).unwrap();
        assert_relative_eq!(w[0], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(class_weights(&[5, 5, 5]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[1, 100, 10000]).unwrap();
        assert_relative_eq!(w[0] / w[1], 10.0, epsilon = 1e-12);
        assert_relative_eq!(w[1] / w[2], 10.0, epsilon = 1e-12);
        let w = class_weights(&[0, 9, 0, 9]).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(class_weights(&[0, 0]), Err(Error::Argument(_))));
    }

    #[test]
    fn statistics_on_pure_annotated_components() {
        let mut gt = vec![0u16; 100];
        gt.extend([1u16; 100]);
        gt.extend([2u16; 10]);
        let comps = [comp(0..100), comp(100..200)];
        let clicks = simulate_annotation(&gt, &comps, 3, &AnnotationConfig::default()).unwrap();
        let bundle = derive_labels(gt.len(), &comps, &clicks, 3).unwrap();
        let report = label_statistics(&bundle, &comps, &gt, &["a", "b", "c"]).unwrap();
        assert_eq!(report.one_category, 1.0);
        assert_eq!(report.sparse_labels, 2);
        assert_eq!(report.propagated_labels, 198);
        assert_relative_eq!(report.weak_coverage, 200.0 / 210.0);
        assert_relative_eq!(report.propagated_coverage + report.sparse_coverage, 1.0 - 10.0 / 210.0);
        assert_eq!(report.propagated_error_rate, 0.0);
        assert!(report.to_table().contains("one-category components"));
        let merged = StatsReport::merge(&[report.clone(), report.clone()]).unwrap();
        assert_eq!(merged.num_points, 420);
        assert_relative_eq!(merged.weak_coverage, report.weak_coverage);
    }

    #[test]
    fn bundle_round_trip() {
        let comps = [comp(0..10), comp(10..20)];
        let bundle = derive_labels(25, &comps, &[(3, 7), (12, 9), (15, 7)], 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.write(dir.path()).unwrap();
        assert_eq!(LabelBundle::read(dir.path()).unwrap(), bundle);
        let weak = dir.path().join("weak.bin");
        let bytes = std::fs::read(&weak).unwrap();
        std::fs::write(&weak, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(LabelBundle::read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn random_labels_match_gt() {
        let gt: Vec<u16> = (0..1000).map(|i| if i % 10 == 0 { UNLABELED } else { (i % 4) as u16 }).collect();
        let labels = random_point_labels(&gt, 50, 3);
        assert_eq!(labels.len(), 50);
        assert!(labels.iter().all(|&(p, c)| gt[p as usize] == c && c != UNLABELED));
    }
}
