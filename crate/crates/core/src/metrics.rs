//! Overlap (Dice-Sørensen) and average surface distance between label maps.
//!
//! Surfaces are point clouds of voxel centers (world mm) whose label differs
//! from at least one of their six face neighbours; voxels on the volume border
//! count as boundary. A label missing from exactly one map scores DSC 0 and
//! ASD NaN.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Geometry;
use crate::kdtree::KdTree;
use crate::labels::{ExclusionSet, LabelConvention, LabelMap, BACKGROUND};

/// Voxels belonging to one label, on a known grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSupport {
    pub geometry: Geometry,
    pub voxels: Vec<bool>,
}

impl LabelSupport {
    pub fn of(labels: &LabelMap, id: u32) -> Self {
        LabelSupport {
            geometry: labels.geometry().clone(),
            voxels: labels.labels().iter().map(|&v| v == id).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }
}

/// 2|G∩P| / (|G|+|P|); 1 when both are empty.
pub fn dsc_from_counts(intersection: usize, g: usize, p: usize) -> f64 {
    if g + p == 0 {
        log::debug!("dsc: both supports empty, scoring 1.0");
        return 1.0;
    }
    (2 * intersection) as f64 / (g + p) as f64
}

pub fn dsc(g: &LabelSupport, p: &LabelSupport) -> Result<f64> {
    g.geometry.ensure_matches(&p.geometry, "dsc")?;
    let (mut inter, mut ng, mut np) = (0, 0, 0);
    for (&a, &b) in g.voxels.iter().zip(&p.voxels) {
        ng += usize::from(a);
        np += usize::from(b);
        inter += usize::from(a && b);
    }
    Ok(dsc_from_counts(inter, ng, np))
}

/// Boundary voxel centers of one label, in world mm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
fn is_boundary(labels: &[u32], geom: &Geometry, idx: usize) -> bool {
    let [nx, ny, nz] = geom.dims();
    let [i, j, k] = geom.coords(idx);
    let v = labels[idx];
    if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
        return true;
    }
    let sx = 1;
    let sy = nx;
    let sz = nx * ny;
    labels[idx - sx] != v
        || labels[idx + sx] != v
        || labels[idx - sy] != v
        || labels[idx + sy] != v
        || labels[idx - sz] != v
        || labels[idx + sz] != v
}

fn world_of(geom: &Geometry, idx: usize) -> [f64; 3] {
    let c = geom.coords(idx);
    geom.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64])
}

pub fn extract_surface(labels: &LabelMap, id: u32) -> SurfacePointSet {
    let geom = labels.geometry();
    let data = labels.labels();
    let points = data
        .iter()
        .enumerate()
        .filter(|&(idx, &v)| v == id && is_boundary(data, geom, idx))
        .map(|(idx, _)| world_of(geom, idx))
        .collect();
    SurfacePointSet { points }
}

/// Boundary points of every nonzero label in one pass.
pub fn extract_all_surfaces(labels: &LabelMap) -> BTreeMap<u32, SurfacePointSet> {
    let geom = labels.geometry();
    let data = labels.labels();
    let mut out: BTreeMap<u32, SurfacePointSet> = BTreeMap::new();
    for (idx, &v) in data.iter().enumerate() {
        if v != BACKGROUND && is_boundary(data, geom, idx) {
            out.entry(v).or_default().points.push(world_of(geom, idx));
        }
    }
    out
}

/// Sum of nearest-point distances from every point of `from` to the set `to`.
fn directed_sum(from: &SurfacePointSet, to: &KdTree) -> f64 {
    let distances: Vec<f64> = from
        .points
        .par_iter()
        .map(|&p| to.nearest_distance(p).expect("target set is non-empty"))
        .collect();
    distances.iter().sum()
}

/// Symmetric average surface distance in mm; NaN when either set is empty.
pub fn asd(g: &SurfacePointSet, p: &SurfacePointSet) -> f64 {
    if g.is_empty() || p.is_empty() {
        return f64::NAN;
    }
    let tg = KdTree::new(&g.points);
    let tp = KdTree::new(&p.points);
    (directed_sum(g, &tp) + directed_sum(p, &tg)) / (g.count() + p.count()) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelMetrics {
    pub label_id: u32,
    pub label_name: String,
    pub dsc: f64,
    pub asd_mm: f64,
    pub g_voxels: usize,
    pub p_voxels: usize,
}

/// Median and interquartile range (type-7 quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// Summary of the finite values; NaNs are ignored.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        Summary {
            median: quantile_sorted(&v, 0.5),
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
            n: v.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub dsc: Summary,
    pub asd: Summary,
    /// Labels whose ASD was NaN and therefore left out of `asd`.
    pub nan_asd_dropped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub excluded: ExclusionSet,
    pub aggregate: Aggregate,
}

/// Per-label DSC/ASD over the ground-truth convention minus `excl`.
pub fn evaluate_pair(gt: &LabelMap, pred: &LabelMap, excl: &ExclusionSet) -> Result<MetricsReport> {
    gt.geometry().ensure_matches(pred.geometry(), "ground truth vs prediction")?;
    let convention: &LabelConvention = gt.convention();
    let evaluated = excl.evaluated_ids(convention);
    if evaluated.is_empty() {
        return Err(Error::InvalidArgument("no labels left to evaluate after exclusions".into()));
    }

    let mut counts: BTreeMap<u32, [usize; 3]> = evaluated.iter().map(|&id| (id, [0; 3])).collect();
    for (&a, &b) in gt.labels().iter().zip(pred.labels()) {
        if let Some(c) = counts.get_mut(&a) {
            c[0] += 1;
            if a == b {
                c[2] += 1;
            }
        }
        if let Some(c) = counts.get_mut(&b) {
            c[1] += 1;
        }
    }
    let g_surf = extract_all_surfaces(gt);
    let p_surf = extract_all_surfaces(pred);
    let empty = SurfacePointSet::default();

    let per_label: Vec<LabelMetrics> = evaluated
        .par_iter()
        .map(|&id| {
            let [g, p, inter] = counts[&id];
            let gs = g_surf.get(&id).unwrap_or(&empty);
            let ps = p_surf.get(&id).unwrap_or(&empty);
            LabelMetrics {
                label_id: id,
                label_name: convention.region_name(id).to_string(),
                dsc: dsc_from_counts(inter, g, p),
                asd_mm: asd(gs, ps),
                g_voxels: g,
                p_voxels: p,
            }
        })
        .collect();

    let nan_asd_dropped = per_label.iter().filter(|m| m.asd_mm.is_nan()).count();
    if nan_asd_dropped > 0 {
        log::info!("{nan_asd_dropped} labels with undefined ASD left out of the aggregate");
    }
    let aggregate = Aggregate {
        dsc: Summary::of(per_label.iter().map(|m| m.dsc)),
        asd: Summary::of(per_label.iter().map(|m| m.asd_mm)),
        nan_asd_dropped,
    };
    Ok(MetricsReport { per_label, excluded: excl.clone(), aggregate })
}

/// Per-label summary across subjects (the other grouping of the aggregate).
#[derive(Debug, Clone, Serialize)]
pub struct LabelAcrossSubjects {
    pub label_id: u32,
    pub label_name: String,
    pub dsc: Summary,
    pub asd: Summary,
}

pub fn aggregate_by_label(reports: &[MetricsReport]) -> Vec<LabelAcrossSubjects> {
    let mut by_label: BTreeMap<u32, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        for m in &r.per_label {
            let e = by_label.entry(m.label_id).or_insert_with(|| (m.label_name.clone(), Vec::new(), Vec::new()));
            e.1.push(m.dsc);
            e.2.push(m.asd_mm);
        }
    }
    by_label
        .into_iter()
        .map(|(label_id, (label_name, d, a))| LabelAcrossSubjects {
            label_id,
            label_name,
            dsc: Summary::of(d),
            asd: Summary::of(a),
        })
        .collect()
}

/// Formats a float for CSV output: NaN becomes an empty field.
pub fn csv_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub const METRICS_HEADER: [&str; 7] = ["subject_id", "label_id", "label_name", "dsc", "asd_mm", "g_voxels", "p_voxels"];

/// Writes per-label rows followed by median/q1/q3 aggregate rows (label_id empty).
pub fn write_metrics_csv<W: Write>(out: W, subject_id: &str, report: &MetricsReport, with_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if with_header {
        w.write_record(METRICS_HEADER)?;
    }
    for m in &report.per_label {
        w.write_record([
            subject_id.to_string(),
            m.label_id.to_string(),
            m.label_name.clone(),
            csv_float(m.dsc),
            csv_float(m.asd_mm),
            m.g_voxels.to_string(),
            m.p_voxels.to_string(),
        ])?;
    }
    let a = &report.aggregate;
    for (name, d, s) in [
        ("median", a.dsc.median, a.asd.median),
        ("q1", a.dsc.q1, a.asd.q1),
        ("q3", a.dsc.q3, a.asd.q3),
    ] {
        w.write_record([subject_id.to_string(), String::new(), name.to_string(), csv_float(d), csv_float(s), String::new(), String::new()])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn map(dims: [usize; 3], labels: Vec<u32>) -> LabelMap {
        LabelMap::with_inferred_convention(Geometry::with_spacing(dims, [1.0; 3]).unwrap(), labels).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let g = map([3, 1, 1], vec![1, 1, 0]);
        let p = map([3, 1, 1], vec![0, 1, 1]);
        assert_eq!(dsc(&LabelSupport::of(&g, 1), &LabelSupport::of(&p, 1)).unwrap(), 0.5);
        assert_eq!(dsc(&LabelSupport::of(&g, 1), &LabelSupport::of(&g, 1)).unwrap(), 1.0);
        let none = map([3, 1, 1], vec![0, 0, 0]);
        assert_eq!(dsc(&LabelSupport::of(&g, 1), &LabelSupport::of(&none, 1)).unwrap(), 0.0);
        assert_eq!(dsc(&LabelSupport::of(&none, 1), &LabelSupport::of(&none, 1)).unwrap(), 1.0);
        let other = map([2, 1, 1], vec![1, 1]);
        assert!(dsc(&LabelSupport::of(&g, 1), &LabelSupport::of(&other, 1)).is_err());
    }

    #[test]
    fn surface_examples() {
        let single = map([3, 3, 3], (0..27).map(|i| u32::from(i == 13)).collect());
        assert_eq!(extract_surface(&single, 1).count(), 1);
        let cube = map([5, 5, 5], {
            let g = Geometry::with_spacing([5, 5, 5], [1.0; 3]).unwrap();
            (0..125).map(|i| u32::from(g.coords(i).iter().all(|&c| (1..=3).contains(&c)))).collect()
        });
        assert_eq!(extract_surface(&cube, 1).count(), 26);
        let rod = map([3, 3, 6], {
            let g = Geometry::with_spacing([3, 3, 6], [1.0; 3]).unwrap();
            (0..54).map(|i| { let c = g.coords(i); u32::from(c[0] == 1 && c[1] == 1) }).collect()
        });
        assert_eq!(extract_surface(&rod, 1).count(), 6);
        // volume faces count as boundary
        let full = map([3, 3, 3], vec![1; 27]);
        assert_eq!(extract_surface(&full, 1).count(), 26);
    }

    #[test]
    fn asd_examples() {
        let a = SurfacePointSet { points: vec![[0.0, 0.0, 0.0]] };
        let b = SurfacePointSet { points: vec![[1.0, 0.0, 0.0]] };
        assert_eq!(asd(&a, &b), 1.0);
        assert_eq!(asd(&a, &a), 0.0);
        assert!(asd(&a, &SurfacePointSet::default()).is_nan());
    }

    #[test]
    fn quantiles_type7() {
        let s = Summary::of([4.0, 1.0, 3.0, 2.0, f64::NAN]);
        assert_eq!(s.n, 4);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
    }

    #[test]
    fn missing_label_row() {
        let conv = Arc::new(LabelConvention::from_ids("t", [1, 2]).unwrap());
        let g = Geometry::with_spacing([4, 1, 1], [1.0; 3]).unwrap();
        let gt = LabelMap::new(g.clone(), vec![1, 1, 2, 2], conv.clone()).unwrap();
        let pred = LabelMap::new(g, vec![1, 1, 1, 1], conv).unwrap();
        let r = evaluate_pair(&gt, &pred, &ExclusionSet::none()).unwrap();
        let row2 = r.per_label.iter().find(|m| m.label_id == 2).unwrap();
        assert_eq!(row2.dsc, 0.0);
        assert!(row2.asd_mm.is_nan());
        assert_eq!(r.aggregate.nan_asd_dropped, 1);
    }

    #[test]
    fn csv_layout() {
        let m = map([2, 1, 1], vec![1, 0]);
        let r = evaluate_pair(&m, &m, &ExclusionSet::none()).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, "s1", &r, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "subject_id,label_id,label_name,dsc,asd_mm,g_voxels,p_voxels");
        assert_eq!(lines[1], "s1,1,label-1,1,0,1,1");
        assert_eq!(lines[2], "s1,,median,1,0,,");
        assert!(!text.contains('\r'));
    }
}
