//! Structure volumes, total intracranial volume (TIV) and TIV normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::csv_float;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeRow {
    pub label_id: u32,
    pub name: String,
    pub voxels: usize,
    pub volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeReport {
    pub subject_id: String,
    pub rows: Vec<VolumeRow>,
    /// TIV computed from the label map.
    pub tiv_mm3: f64,
    /// External TIV used for normalization, when one was supplied.
    pub tiv_override_mm3: Option<f64>,
    pub normalized: Vec<(u32, f64)>,
}

/// Voxel volume in mm³, rounded to 12 significant digits so decimal spacings
/// such as 0.8 mm give decimal voxel volumes (0.512 mm³).
pub fn voxel_volume(spacing: [f64; 3]) -> f64 {
    let v = spacing[0] * spacing[1] * spacing[2];
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let digits = 11 - v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits);
    (v * scale).round() / scale
}

/// Volume of every label present; TIV sums all nonbackground structures.
pub fn structure_volumes(subject_id: &str, labels: &LabelMap) -> VolumeReport {
    structure_volumes_excluding(subject_id, labels, &BTreeSet::new())
}

/// As [`structure_volumes`], leaving `tiv_excluded` ids out of the TIV sum.
pub fn structure_volumes_excluding(subject_id: &str, labels: &LabelMap, tiv_excluded: &BTreeSet<u32>) -> VolumeReport {
    let vv = voxel_volume(labels.geometry().spacing());
    let conv = labels.convention();
    let rows: Vec<VolumeRow> = labels
        .counts()
        .into_iter()
        .map(|(label_id, voxels)| VolumeRow {
            label_id,
            name: conv.region_name(label_id).to_string(),
            voxels,
            volume_mm3: voxels as f64 * vv,
        })
        .collect();
    let tiv_voxels: usize = rows.iter().filter(|r| !tiv_excluded.contains(&r.label_id)).map(|r| r.voxels).sum();
    VolumeReport {
        subject_id: subject_id.to_string(),
        rows,
        tiv_mm3: tiv_voxels as f64 * vv,
        tiv_override_mm3: None,
        normalized: Vec::new(),
    }
}

/// Fills the normalized column using `tiv_override` if given, else the computed TIV.
pub fn normalize_by_tiv(report: &VolumeReport, tiv_override: Option<f64>) -> Result<VolumeReport> {
    let tiv = tiv_override.unwrap_or(report.tiv_mm3);
    if !(tiv.is_finite() && tiv > 0.0) {
        return Err(Error::InvalidArgument(format!("TIV must be positive, got {tiv}")));
    }
    let mut out = report.clone();
    out.tiv_override_mm3 = tiv_override;
    out.normalized = report.rows.iter().map(|r| (r.label_id, r.volume_mm3 / tiv)).collect();
    Ok(out)
}

pub fn write_volumes_csv<W: Write>(out: W, reports: &[VolumeReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["subject_id", "label_id", "name", "voxels", "volume_mm3", "normalized"])?;
    for rep in reports {
        let norm: BTreeMap<u32, f64> = rep.normalized.iter().copied().collect();
        for r in &rep.rows {
            w.write_record([
                rep.subject_id.clone(),
                r.label_id.to_string(),
                r.name.clone(),
                r.voxels.to_string(),
                csv_float(r.volume_mm3),
                norm.get(&r.label_id).map(|v| csv_float(*v)).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<volumes csv>", e))?;
    Ok(())
}

pub fn write_tiv_csv<W: Write>(out: W, reports: &[VolumeReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["subject_id", "tiv_mm3", "tiv_override_mm3"])?;
    for rep in reports {
        w.write_record([
            rep.subject_id.clone(),
            csv_float(rep.tiv_mm3),
            rep.tiv_override_mm3.map(csv_float).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<tiv csv>", e))?;
    Ok(())
}

/// One subject's TIV, optionally tagged with a dataset or method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TivRecord {
    pub subject_id: String,
    pub tiv_mm3: f64,
    #[serde(default)]
    pub dataset: Option<String>,
}

/// Reads `subject_id,tiv_mm3[,dataset]`.
pub fn read_tiv_csv(path: &Path) -> Result<Vec<TivRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let mut rec: TivRecord = row?;
        if rec.dataset.as_deref() == Some("") {
            rec.dataset = None;
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TivPair {
    pub subject_id: String,
    pub ours_mm3: f64,
    pub reference_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TivComparison {
    pub rows: Vec<TivPair>,
    pub pearson_r: f64,
    /// Least-squares fit ours = slope · reference + intercept.
    pub slope: f64,
    pub intercept: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (sxx, syy, sxy) = centered_moments(x, y);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero-variance series".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

fn centered_moments(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    (sxx, syy, sxy)
}

/// Matches subjects by id, then correlates and regresses ours on reference.
pub fn tiv_compare(ours: &[TivRecord], reference: &[TivRecord]) -> Result<TivComparison> {
    let refs: BTreeMap<&str, f64> = reference.iter().map(|r| (r.subject_id.as_str(), r.tiv_mm3)).collect();
    let rows: Vec<TivPair> = ours
        .iter()
        .filter_map(|o| {
            refs.get(o.subject_id.as_str()).map(|&r| TivPair {
                subject_id: o.subject_id.clone(),
                ours_mm3: o.tiv_mm3,
                reference_mm3: r,
            })
        })
        .collect();
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 matched subjects, found {}",
            rows.len()
        )));
    }
    let x: Vec<f64> = rows.iter().map(|r| r.reference_mm3).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.ours_mm3).collect();
    let pearson_r = pearson(&x, &y)?;
    let (sxx, _, sxy) = centered_moments(&x, &y);
    let n = x.len() as f64;
    let slope = sxy / sxx;
    let intercept = y.iter().sum::<f64>() / n - slope * x.iter().sum::<f64>() / n;
    Ok(TivComparison { rows, pearson_r, slope, intercept })
}

/// Comparison per dataset tag (untagged records group under "all").
pub fn tiv_compare_grouped(ours: &[TivRecord], reference: &[TivRecord]) -> Result<BTreeMap<String, TivComparison>> {
    let mut groups: BTreeMap<String, Vec<TivRecord>> = BTreeMap::new();
    for o in ours {
        let key = o.dataset.clone().unwrap_or_else(|| "all".to_string());
        groups.entry(key).or_default().push(o.clone());
    }
    groups.into_iter().map(|(k, recs)| Ok((k, tiv_compare(&recs, reference)?))).collect()
}

pub fn write_comparison_csv<W: Write>(out: W, groups: &BTreeMap<String, TivComparison>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["dataset", "subject_id", "ours_mm3", "reference_mm3"])?;
    for (name, cmp) in groups {
        for r in &cmp.rows {
            w.write_record([name.clone(), r.subject_id.clone(), csv_float(r.ours_mm3), csv_float(r.reference_mm3)])?;
        }
    }
    w.flush().map_err(|e| Error::io("<comparison csv>", e))?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter of ours vs reference TIV with the identity line and one regression
/// line per group; Pearson r in the legend.
pub fn comparison_svg(groups: &BTreeMap<String, TivComparison>, x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (520.0, 520.0, 60.0);
    let all: Vec<f64> = groups.values().flat_map(|c| c.rows.iter().flat_map(|r| [r.ours_mm3, r.reference_mm3])).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1.0);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |v: f64| m + (v - lo) / (hi - lo) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for (i, (name, cmp)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for r in &cmp.rows {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" fill-opacity="0.7"/>"#,
                sx(r.reference_mm3),
                sy(r.ours_mm3)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            sx(lo),
            sy(cmp.slope * lo + cmp.intercept),
            sx(hi),
            sy(cmp.slope * hi + cmp.intercept)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{} (r = {:.3})</text>"#,
            m + 8.0,
            m + 18.0 + 16.0 * i as f64,
            xml_escape(name),
            cmp.pearson_r
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, w / 2.0, h - 18.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
