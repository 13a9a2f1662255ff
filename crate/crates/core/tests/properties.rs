use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point3;
use ndarray::Array2;
use proptest::prelude::*;

use less_core::cloud::FusedCloud;
use less_core::labeling::{derive_labels, simulate_annotation, AnnotationConfig};
use less_core::losses::PrototypeBank;
use less_core::metrics::ConfusionMatrix;
use less_core::preseg::{connected_components, Component, ComponentKind};
use less_core::{ClassId, UNLABELED};

fn cloud(points: &[(f64, f64, f64)]) -> FusedCloud {
    let points: Vec<Point3<f64>> = points.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
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

/// Points clustered around a few centres about 10 m from the origin, so that
/// radii `range · d` connect some pairs but not all.
fn clustered() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((0usize..4, -0.6f64..0.6, -0.6f64..0.6, -0.3f64..0.3), 1..160).prop_map(|v| {
        v.into_iter()
            .map(|(c, dx, dy, dz)| (8.0 + 1.5 * c as f64 + dx, 3.0 + dy, dz))
            .collect()
    })
}

fn brute_force(c: &FusedCloud, d: f64) -> BTreeSet<Vec<u32>> {
    let n = c.len();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if label[s].is_some() {
            continue;
        }
        label[s] = Some(s);
        let mut stack = vec![s];
        let mut comp = vec![];
        while let Some(u) = stack.pop() {
            comp.push(u as u32);
            for v in 0..n {
                let tau = c.range[u].max(c.range[v]) * d;
                if label[v].is_none() && (c.points[u] - c.points[v]).norm() < tau {
                    label[v] = Some(s);
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        out.insert(comp);
    }
    out
}

fn partition(comps: &[Component]) -> BTreeSet<Vec<u32>> {
    comps.iter().map(|c| c.point_ids.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_match_brute_force(pts in clustered(), d in 0.005f64..0.05) {
        let c = cloud(&pts);
        let ids: Vec<u32> = (0..c.len() as u32).collect();
        prop_assert_eq!(partition(&connected_components(&c, &ids, d)), brute_force(&c, d));
    }

    #[test]
    fn components_ignore_id_order(pts in clustered(), d in 0.005f64..0.05, rot in 0usize..160) {
        let c = cloud(&pts);
        let ids: Vec<u32> = (0..c.len() as u32).collect();
        let mut shuffled = ids.clone();
        shuffled.rotate_left(rot % ids.len());
        shuffled.reverse();
        prop_assert_eq!(
            connected_components(&c, &ids, d),
            connected_components(&c, &shuffled, d)
        );
    }

    #[test]
    fn larger_d_only_merges(pts in clustered(), d in 0.005f64..0.05, scale in 1.0f64..3.0) {
        let c = cloud(&pts);
        let ids: Vec<u32> = (0..c.len() as u32).collect();
        let fine = connected_components(&c, &ids, d);
        let coarse = connected_components(&c, &ids, d * scale);
        prop_assert!(coarse.len() <= fine.len());
        let mut owner = BTreeMap::new();
        for (k, comp) in coarse.iter().enumerate() {
            for &p in &comp.point_ids {
                owner.insert(p, k);
            }
        }
        for comp in &fine {
            let first = owner[&comp.point_ids[0]];
            prop_assert!(comp.point_ids.iter().all(|p| owner[p] == first));
        }
    }

    #[test]
    fn annotation_and_derived_labels_are_consistent(
        sizes in prop::collection::vec(1usize..60, 1..12),
        classes in prop::collection::vec(0u16..4, 400),
        cutoff in 0.0f64..0.3,
        seed in any::<u64>(),
    ) {
        let mut components = vec![];
        let mut next = 0u32;
        for s in sizes {
            components.push(Component {
                point_ids: (next..next + s as u32).collect(),
                kind: ComponentKind::Object,
                cell: None,
            });
            next += s as u32;
        }
        let n = next as usize + 5;
        let gt: Vec<ClassId> = (0..n).map(|i| classes[i % classes.len()]).collect();
        let cfg = AnnotationConfig { purity_cutoff_fraction: cutoff, rng_seed: seed, ..Default::default() };
        let clicks = simulate_annotation(&gt, &components, 4, &cfg).unwrap();
        prop_assert!(clicks.windows(2).all(|w| w[0].0 < w[1].0));
        for &(p, c) in &clicks {
            prop_assert_eq!(gt[p as usize], c);
        }
        let bundle = derive_labels(n, &components, &clicks, 4).unwrap();
        let propagated = bundle.propagated_without_sparse();
        for comp in &components {
            let present: BTreeSet<ClassId> = comp.point_ids.iter().map(|&p| gt[p as usize]).collect();
            let mut counts = [0usize; 4];
            comp.point_ids.iter().for_each(|&p| counts[gt[p as usize] as usize] += 1);
            let expected: BTreeSet<ClassId> = (0..4u16)
                .filter(|&k| counts[k as usize] > 0 && counts[k as usize] as f64 > cutoff * comp.len() as f64)
                .collect();
            let clicked: BTreeSet<ClassId> = clicks
                .iter()
                .filter(|(p, _)| comp.point_ids.contains(p))
                .map(|&(_, c)| c)
                .collect();
            prop_assert_eq!(&clicked, &expected);
            let mask: u32 = clicked.iter().map(|&c| 1u32 << c).sum();
            for &p in &comp.point_ids {
                prop_assert_eq!(bundle.weak_mask(p as usize), mask);
                let sparse = clicks.iter().any(|&(q, _)| q == p);
                if clicked.len() == 1 && !sparse {
                    prop_assert_eq!(propagated[p as usize], *clicked.iter().next().unwrap());
                } else {
                    prop_assert_eq!(propagated[p as usize], UNLABELED);
                }
                // a single-class component never propagates a wrong label
                if present.len() == 1 && propagated[p as usize] != UNLABELED {
                    prop_assert_eq!(propagated[p as usize], gt[p as usize]);
                }
            }
        }
        for p in next as usize..n {
            prop_assert_eq!(bundle.weak_mask(p), 0);
        }
    }

    #[test]
    fn prototype_distance_decays_geometrically(
        m in prop::sample::select(vec![0.0, 0.5, 0.99]),
        v in prop::collection::vec(-1.0f64..1.0, 8),
        k in 1usize..40,
        seed in any::<u64>(),
    ) {
        let mut bank = PrototypeBank::new(2, 8, m, 0.1, seed);
        let dist = |b: &PrototypeBank| b.prototypes[1].iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&bank);
        let batch = Array2::from_shape_fn((3, 8), |(_, j)| v[j]);
        for _ in 0..k {
            bank.update(batch.view(), &[1, 1, 1]).unwrap();
        }
        prop_assert!(dist(&bank) <= m.powi(k as i32) * d0 + 1e-9);
    }

    #[test]
    fn confusion_is_order_free_and_mergeable(
        pairs in prop::collection::vec((0u16..5, 0u16..5), 0..200),
        split in 0usize..200,
    ) {
        let gt: Vec<ClassId> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<ClassId> = pairs.iter().map(|p| p.1).collect();
        let mut whole = ConfusionMatrix::new(5);
        whole.accumulate(&gt, &pred, &[]).unwrap();
        let mut rev = ConfusionMatrix::new(5);
        let (g2, p2): (Vec<_>, Vec<_>) = pairs.iter().rev().copied().unzip();
        rev.accumulate(&g2, &p2, &[]).unwrap();
        prop_assert_eq!(&whole, &rev);
        let s = split.min(pairs.len());
        let mut a = ConfusionMatrix::new(5);
        a.accumulate(&gt[..s], &pred[..s], &[]).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.accumulate(&gt[s..], &pred[s..], &[]).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(&whole, &a);
        prop_assert_eq!(whole.total(), pairs.len() as u64);
        for iou in whole.iou().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
        let diagonal = gt == pred;
        if !pairs.is_empty() {
            prop_assert_eq!(whole.miou() == 1.0, diagonal);
        }
    }
}
