use proptest::prelude::*;
use uhfsegkit::stats::{bonferroni, mann_whitney_u, Bonferroni, GroupSample, PMethod};

/// Exact two-sided p by walking every split of the pooled ranks.
fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let u_of = |sel: &[usize]| -> f64 {
        let mut u = 0.0;
        for &i in sel {
            for j in 0..pooled.len() {
                if !sel.contains(&j) {
                    u += if pooled[i] > pooled[j] { 1.0 } else if pooled[i] == pooled[j] { 0.5 } else { 0.0 };
                }
            }
        }
        u
    };
    let observed = u_of(&(0..a.len()).collect::<Vec<_>>());
    let mut all = Vec::new();
    fn choose(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            choose(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    choose(0, pooled.len(), a.len(), &mut Vec::new(), &mut all);
    let us: Vec<f64> = all.iter().map(|s| u_of(s)).collect();
    let n = us.len() as f64;
    let le = us.iter().filter(|&&u| u <= observed).count() as f64 / n;
    let ge = us.iter().filter(|&&u| u >= observed).count() as f64 / n;
    (2.0 * le.min(ge)).min(1.0)
}

fn distinct_samples() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(na, nb)| {
        prop::collection::btree_set(-1000i32..1000, na + nb).prop_shuffle_map(na)
    })
}

trait ShuffleSplit {
    fn prop_shuffle_map(self, na: usize) -> BoxedStrategy<(Vec<f64>, Vec<f64>)>;
}

impl<S: Strategy<Value = std::collections::BTreeSet<i32>> + 'static> ShuffleSplit for S {
    fn prop_shuffle_map(self, na: usize) -> BoxedStrategy<(Vec<f64>, Vec<f64>)> {
        self.prop_map(|s| s.into_iter().map(|v| v as f64 * 0.25).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(move |v| (v[..na].to_vec(), v[na..].to_vec()))
            .boxed()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_p_matches_enumeration((a, b) in distinct_samples()) {
        let r = mann_whitney_u(&GroupSample::new("a", a.clone()).unwrap(), &GroupSample::new("b", b.clone()).unwrap()).unwrap();
        prop_assert_eq!(r.method, PMethod::Exact);
        prop_assert!((r.p - enumerate_p(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_monotone_maps(a in prop::collection::vec(-50.0f64..50.0, 2..15), b in prop::collection::vec(-50.0f64..50.0, 2..15)) {
        let f = |x: &f64| (x / 10.0).exp() * 3.0 + 1.0;
        let sa = GroupSample::new("a", a.clone()).unwrap();
        let sb = GroupSample::new("b", b.clone()).unwrap();
        let ta = GroupSample::new("a", a.iter().map(f).collect()).unwrap();
        let tb = GroupSample::new("b", b.iter().map(f).collect()).unwrap();
        let (r0, r1) = (mann_whitney_u(&sa, &sb).unwrap(), mann_whitney_u(&ta, &tb).unwrap());
        prop_assert_eq!(r0.u, r1.u);
        prop_assert_eq!(r0.p, r1.p);
    }

    #[test]
    fn swapping_groups_keeps_p(a in prop::collection::vec(0.0f64..1.0, 1..20), b in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let sa = GroupSample::new("a", a).unwrap();
        let sb = GroupSample::new("b", b).unwrap();
        let (x, y) = (mann_whitney_u(&sa, &sb).unwrap(), mann_whitney_u(&sb, &sa).unwrap());
        prop_assert!((x.p - y.p).abs() < 1e-12);
        prop_assert_eq!(x.u, y.u);
    }
}

#[test]
fn separated_triplets() {
    let r = mann_whitney_u(&GroupSample::new("a", vec![1.0, 2.0, 3.0]).unwrap(), &GroupSample::new("b", vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
    assert_eq!(r.u, 0.0);
    assert!((r.p - 0.1).abs() < 1e-12);
    assert!((enumerate_p(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]) - 0.1).abs() < 1e-12);
}

#[test]
fn bonferroni_threshold_and_display() {
    let b = Bonferroni::new(0.05, 8).unwrap();
    assert!((b.threshold() - 0.00625).abs() < 1e-15);
    assert_eq!(b.display_threshold(), "0.006");
    let t = mann_whitney_u(&GroupSample::new("a", vec![1.0, 2.0, 3.0]).unwrap(), &GroupSample::new("b", vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
    let r = bonferroni(&[t], 0.05, 8).unwrap();
    assert!((r[0].p_adjusted - 0.8).abs() < 1e-12);
    assert!(!r[0].significant);
    assert!(bonferroni(&[t, t], 0.05, 1).is_err());
}
