mod common;

use std::sync::Arc;

use common::{brute_asd, oracle_surface, random_map, rational_dsc};
use proptest::prelude::*;
use uhfsegkit::labels::{evaluation_label_set, EvaluationMode, ExclusionSet, LabelConvention};
use uhfsegkit::metrics::{asd, dsc, evaluate_pair, extract_surface, write_metrics_csv, LabelSupport};
use uhfsegkit::LabelMap;

fn pair() -> impl Strategy<Value = (LabelMap, LabelMap, Vec<u32>)> {
    (any::<u64>(), 2usize..=10, 2usize..=10, 2usize..=10, prop::array::uniform3(0.5f64..2.0)).prop_map(
        |(seed, x, y, z, sp)| {
            let ids = vec![0, 10, 17, 53];
            let a = random_map(seed, [x, y, z], &ids, sp);
            let b = random_map(seed ^ 0x9e37, [x, y, z], &ids, sp);
            (a, b, ids)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn asd_matches_brute_force((a, b, ids) in pair()) {
        for &id in &ids[1..] {
            let fast = asd(&extract_surface(&a, id), &extract_surface(&b, id));
            let slow = brute_asd(&oracle_surface(&a, id), &oracle_surface(&b, id));
            prop_assert!(fast.is_nan() == slow.is_nan());
            if !slow.is_nan() {
                prop_assert!((fast - slow).abs() <= 1e-9, "id {id}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn metrics_are_symmetric((a, b, ids) in pair()) {
        for &id in &ids[1..] {
            let (ga, gb) = (LabelSupport::of(&a, id), LabelSupport::of(&b, id));
            prop_assert_eq!(dsc(&ga, &gb).unwrap(), dsc(&gb, &ga).unwrap());
            let (sa, sb) = (extract_surface(&a, id), extract_surface(&b, id));
            let (x, y) = (asd(&sa, &sb), asd(&sb, &sa));
            prop_assert!((x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn dsc_is_the_exact_ratio((a, b, ids) in pair()) {
        for &id in &ids[1..] {
            let (num, den) = rational_dsc(a.labels(), b.labels(), id);
            let got = dsc(&LabelSupport::of(&a, id), &LabelSupport::of(&b, id)).unwrap();
            let want = if den == 0 { 1.0 } else { num as f64 / den as f64 };
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn self_evaluation_is_perfect((a, _b, _) in pair()) {
        let conv = a.convention().clone();
        let report = evaluate_pair(&a, &a, &ExclusionSet::none()).unwrap();
        prop_assert_eq!(report.per_label.len(), conv.len());
        for m in &report.per_label {
            prop_assert_eq!(m.dsc, 1.0);
            if m.g_voxels > 0 {
                prop_assert_eq!(m.asd_mm, 0.0);
            }
        }
    }
}

#[test]
fn missing_label_scores_zero_and_nan() {
    let g = uhfsegkit::Geometry::with_spacing([4, 4, 4], [1.0; 3]).unwrap();
    let conv = Arc::new(LabelConvention::fs35());
    let mut gt = vec![0u32; 64];
    gt[..32].fill(17);
    gt[40..48].fill(53);
    let mut pred = vec![0u32; 64];
    pred[..32].fill(17);
    let gt = LabelMap::new(g.clone(), gt, conv.clone()).unwrap();
    let pred = LabelMap::new(g, pred, conv).unwrap();
    let report = evaluate_pair(&gt, &pred, &evaluation_label_set(EvaluationMode::WholeBrain)).unwrap();
    let m53 = report.per_label.iter().find(|m| m.label_id == 53).unwrap();
    assert_eq!(m53.dsc, 0.0);
    assert!(m53.asd_mm.is_nan());
    let m17 = report.per_label.iter().find(|m| m.label_id == 17).unwrap();
    assert_eq!((m17.dsc, m17.asd_mm), (1.0, 0.0));
    assert_eq!(report.per_label.len(), 27);

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, "s", &report, true).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.lines().any(|l| l == "s,53,Right-Hippocampus,0,,32,0" || l.starts_with("s,53,Right-Hippocampus,0,,")));
    assert!(!text.contains('\r'));
}

#[test]
fn evaluated_label_counts() {
    let fs = LabelConvention::fs35();
    assert_eq!(evaluation_label_set(EvaluationMode::WholeBrain).evaluated_ids(&fs).len(), 27);
    let dkt = LabelConvention::dkt62();
    let cortex = evaluation_label_set(EvaluationMode::Cortex);
    assert_eq!(cortex.excluded_ids.len(), 10);
    assert_eq!(cortex.evaluated_ids(&dkt).len(), 52);
    assert_eq!(ExclusionSet::none().evaluated_ids(&dkt).len(), 62);
}
