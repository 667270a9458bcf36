//! Two-sided Mann-Whitney U test and Bonferroni correction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::metrics::csv_float;

/// Largest pooled sample size handled by exact enumeration.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSample {
    pub group_label: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(group_label: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("group {group_label:?} is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("group {group_label:?} has non-finite values")));
        }
        Ok(GroupSample { group_label: group_label.to_string(), values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// min(U_a, U_b)
    pub u: f64,
    /// U of the first sample.
    pub u_a: f64,
    pub p: f64,
    pub method: PMethod,
}

/// Midranks (1-based) of the pooled values, and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// Two-sided exact p-value by enumerating every assignment of ranks 1..=N to the first sample.
fn exact_p(u_a: f64, na: usize, n: usize) -> f64 {
    let offset = (na * (na + 1) / 2) as u64;
    let u_obs = u_a.round() as u64;
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let rank_sum: u64 = (0..n).filter(|b| mask & (1 << b) != 0).map(|b| b as u64 + 1).sum();
        let u = rank_sum - offset;
        total += 1;
        le += u64::from(u <= u_obs);
        ge += u64::from(u >= u_obs);
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(u_a: f64, na: usize, nb: usize, ties: &[usize]) -> f64 {
    let n = (na + nb) as f64;
    let mean = (na * nb) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided test: exact when the pooled size is at most 12 and there are no
/// ties, otherwise the normal approximation.
pub fn mann_whitney_u(a: &GroupSample, b: &GroupSample) -> Result<MannWhitney> {
    let (na, nb) = (a.values.len(), b.values.len());
    if na == 0 || nb == 0 {
        return Err(Error::InvalidArgument("Mann-Whitney U needs two non-empty samples".into()));
    }
    let pooled: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;
    let (p, method) = if na + nb <= EXACT_MAX_TOTAL && ties.is_empty() {
        (exact_p(u_a, na, na + nb), PMethod::Exact)
    } else {
        (normal_p(u_a, na, nb, &ties), PMethod::Normal)
    };
    Ok(MannWhitney { u: u_a.min(u_b), u_a, p, method })
}

/// Forces the normal approximation (used to cross-check the exact path).
pub fn mann_whitney_u_normal(a: &GroupSample, b: &GroupSample) -> Result<MannWhitney> {
    let (na, nb) = (a.values.len(), b.values.len());
    if na == 0 || nb == 0 {
        return Err(Error::InvalidArgument("Mann-Whitney U needs two non-empty samples".into()));
    }
    let pooled: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let u_a = ranks[..na].iter().sum::<f64>() - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;
    Ok(MannWhitney { u: u_a.min(u_b), u_a, p: normal_p(u_a, na, nb, &ties), method: PMethod::Normal })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Bonferroni setting: α and the number of comparisons m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bonferroni {
    pub alpha: f64,
    pub m: usize,
}

impl Bonferroni {
    pub fn new(alpha: f64, m: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("number of comparisons must be at least 1".into()));
        }
        Ok(Bonferroni { alpha, m })
    }

    /// α / m
    pub fn threshold(&self) -> f64 {
        self.alpha / self.m as f64
    }

    /// Threshold truncated to three decimals, as printed in result tables.
    pub fn display_threshold(&self) -> String {
        format!("{:.3}", (self.threshold() * 1000.0).floor() / 1000.0)
    }

    pub fn adjust(&self, p: f64) -> f64 {
        (p * self.m as f64).min(1.0)
    }

    pub fn is_significant(&self, p: f64) -> bool {
        p < self.threshold()
    }
}

/// Applies the correction to raw tests; `m` must cover every test.
pub fn bonferroni(tests: &[MannWhitney], alpha: f64, m: usize) -> Result<Vec<TestResult>> {
    let corr = Bonferroni::new(alpha, m)?;
    if m < tests.len() {
        return Err(Error::InvalidArgument(format!(
            "m = {m} is smaller than the number of tests ({})",
            tests.len()
        )));
    }
    Ok(tests
        .iter()
        .map(|t| TestResult {
            u_statistic: t.u,
            p_value: t.p,
            p_adjusted: corr.adjust(t.p),
            significant: corr.is_significant(t.p),
        })
        .collect())
}

/// One row of the group-statistics input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeObservation {
    pub subject_id: String,
    pub group: String,
    pub roi: String,
    pub normalized_volume: f64,
    #[serde(default)]
    pub method: Option<String>,
}

/// Reads `subject_id,group,roi,normalized_volume[,method]`.
pub fn read_observations(path: &Path) -> Result<Vec<VolumeObservation>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupComparison {
    pub roi: String,
    pub method: String,
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub test: MannWhitney,
    pub result: TestResult,
}

/// Tests `group_a` against `group_b` for every (roi, method) and corrects with (α, m).
pub fn group_comparisons(
    observations: &[VolumeObservation],
    group_a: &str,
    group_b: &str,
    alpha: f64,
    m: usize,
) -> Result<Vec<GroupComparison>> {
    let mut cells: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for o in observations {
        let method = o.method.clone().filter(|s| !s.is_empty()).unwrap_or_else(|| "default".to_string());
        let cell = cells.entry((o.roi.clone(), method)).or_default();
        if o.group == group_a {
            cell.0.push(o.normalized_volume);
        } else if o.group == group_b {
            cell.1.push(o.normalized_volume);
        }
    }
    let mut keys = Vec::new();
    let mut tests = Vec::new();
    for ((roi, method), (a, b)) in cells {
        let sa = GroupSample::new(group_a, a).map_err(|e| Error::InvalidArgument(format!("{roi}/{method}: {e}")))?;
        let sb = GroupSample::new(group_b, b).map_err(|e| Error::InvalidArgument(format!("{roi}/{method}: {e}")))?;
        tests.push(mann_whitney_u(&sa, &sb)?);
        keys.push((roi, method, sa.values.len(), sb.values.len()));
    }
    let results = bonferroni(&tests, alpha, m)?;
    Ok(keys
        .into_iter()
        .zip(tests)
        .zip(results)
        .map(|(((roi, method, n_a, n_b), test), result)| GroupComparison {
            roi,
            method,
            group_a: group_a.to_string(),
            group_b: group_b.to_string(),
            n_a,
            n_b,
            test,
            result,
        })
        .collect())
}

/// Writes `roi,method,p_raw,p_adjusted,significant`.
pub fn write_comparisons_csv<W: Write>(out: W, rows: &[GroupComparison]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["roi", "method", "p_raw", "p_adjusted", "significant"])?;
    for r in rows {
        w.write_record([
            r.roi.clone(),
            r.method.clone(),
            csv_float(r.result.p_value),
            csv_float(r.result.p_adjusted),
            r.result.significant.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<stats csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(label: &str, v: &[f64]) -> GroupSample {
        GroupSample::new(label, v.to_vec()).unwrap()
    }

    #[test]
    fn separated_triplets() {
        let r = mann_whitney_u(&s("a", &[1.0, 2.0, 3.0]), &s("b", &[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_samples() {
        let a = s("a", &[1.0, 2.0, 3.0, 4.0]);
        let r = mann_whitney_u(&a, &a).unwrap();
        assert!((r.p - 1.0).abs() < 1e-9);
        let c = s("c", &[2.0, 2.0]);
        assert_eq!(mann_whitney_u(&c, &c).unwrap().p, 1.0);
    }

    #[test]
    fn midranks_with_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(GroupSample::new("x", vec![]).is_err());
        assert!(GroupSample::new("x", vec![f64::NAN]).is_err());
    }

    #[test]
    fn bonferroni_rules() {
        let b = Bonferroni::new(0.05, 8).unwrap();
        assert_eq!(b.threshold(), 0.00625);
        assert_eq!(b.display_threshold(), "0.006");
        assert!(b.is_significant(0.004));
        assert!(!b.is_significant(0.007));
        let t = MannWhitney { u: 1.0, u_a: 1.0, p: 0.03, method: PMethod::Exact };
        let r = bonferroni(&[t], 0.05, 1).unwrap();
        assert_eq!(r[0].p_adjusted, 0.03);
        assert!(r[0].significant);
        assert!(bonferroni(&[t], 1.5, 1).is_err());
        assert!(bonferroni(&[t, t], 0.05, 1).is_err());
        assert_eq!(bonferroni(&[MannWhitney { p: 0.5, ..t }], 0.05, 8).unwrap()[0].p_adjusted, 1.0);
    }

    #[test]
    fn grouped_table() {
        let mut obs = Vec::new();
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            obs.push(VolumeObservation { subject_id: format!("h{i}"), group: "HC".into(), roi: "putamen".into(), normalized_volume: *v, method: None });
            obs.push(VolumeObservation { subject_id: format!("p{i}"), group: "PDP".into(), roi: "putamen".into(), normalized_volume: v + 10.0, method: None });
        }
        let rows = group_comparisons(&obs, "HC", "PDP", 0.05, 8).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].result.p_value - 0.1).abs() < 1e-12);
        assert!((rows[0].result.p_adjusted - 0.8).abs() < 1e-12);
        let mut buf = Vec::new();
        write_comparisons_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("roi,method,p_raw,p_adjusted,significant\nputamen,default,"));
    }
}
