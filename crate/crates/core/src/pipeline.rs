//! Manifest-driven batch execution of the processing stages over subjects.
//!
//! Stages run in manifest order within a subject; subjects run in a worker
//! pool. A failing subject is recorded and skipped, never aborting the rest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::ensemble_from_manifest;
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::labels::{evaluation_label_set, extract_cortex, relabel_unassigned_to_csf, EvaluationMode, LabelConvention, LabelMap};
use crate::metrics::{evaluate_pair, write_metrics_csv};
use crate::nifti::{load_nifti, save_nifti, save_nifti_described};
use crate::resample::{resample_image, resample_labels, ImageOrder, LabelMode, ResampleSpec, Target, RESAMPLED_DESCRIP};
use crate::stats::{group_comparisons, write_comparisons_csv, VolumeObservation};
use crate::synth::{case_stem, generate_case, write_case, CaseKey, SynthConfig};
use crate::volumetry::{normalize_by_tiv, structure_volumes, write_tiv_csv, write_volumes_csv, VolumeReport};

/// File the exec stages expect the external command to write into its output
/// directory: an ensemble manifest listing per-fold probability maps.
pub const EXEC_MANIFEST: &str = "probabilities.json";
pub const REPORT_FILE: &str = "run_report.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Named input files, referenced by stages through their key.
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub group: Option<String>,
}

fn default_prep_convention() -> String {
    "fs35+dkt62".into()
}

fn default_label_mode() -> LabelMode {
    LabelMode::OnehotLinear
}

fn default_image_order() -> ImageOrder {
    ImageOrder::Cubic
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageKind {
    /// Background inside the brain mask becomes CSF.
    PrepLabels {
        labels: String,
        mask: String,
        #[serde(default = "default_prep_convention")]
        convention: String,
    },
    /// Produces `<name>` (two cortex labels) and `<name>.parcellation`.
    ExtractCortex { labels: String },
    Synth {
        labels: String,
        #[serde(default)]
        config: Option<PathBuf>,
        #[serde(default)]
        labels_only: bool,
    },
    /// External whole-brain inference, ensembled from the returned manifest.
    Segment { image: String, command: Vec<String> },
    /// External cortex parcellation; `cortex` must come from an
    /// `extract_cortex` stage applied to a `segment` output.
    Parcellate { image: String, cortex: String, command: Vec<String> },
    Resample {
        source: String,
        #[serde(default)]
        spacing: Option<[f64; 3]>,
        #[serde(default)]
        like: Option<String>,
        #[serde(default = "default_label_mode")]
        label_mode: LabelMode,
        #[serde(default = "default_image_order")]
        image_order: ImageOrder,
        /// Treat the source as a label map (default) or an intensity image.
        #[serde(default = "yes")]
        labels: bool,
    },
    Evaluate { gt: String, pred: String, mode: EvaluationMode },
    Volumetry {
        labels: String,
        #[serde(default)]
        tiv_mm3: Option<f64>,
    },
}

fn yes() -> bool {
    true
}

impl StageKind {
    pub fn label(&self) -> &'static str {
        match self {
            StageKind::PrepLabels { .. } => "prep_labels",
            StageKind::ExtractCortex { .. } => "extract_cortex",
            StageKind::Synth { .. } => "synth",
            StageKind::Segment { .. } => "segment",
            StageKind::Parcellate { .. } => "parcellate",
            StageKind::Resample { .. } => "resample",
            StageKind::Evaluate { .. } => "evaluate",
            StageKind::Volumetry { .. } => "volumetry",
        }
    }

    fn references(&self) -> Vec<&str> {
        match self {
            StageKind::PrepLabels { labels, mask, .. } => vec![labels, mask],
            StageKind::ExtractCortex { labels } => vec![labels],
            StageKind::Synth { labels, .. } => vec![labels],
            StageKind::Segment { image, .. } => vec![image],
            StageKind::Parcellate { image, cortex, .. } => vec![image, cortex],
            StageKind::Resample { source, like, .. } => {
                let mut v = vec![source.as_str()];
                v.extend(like.as_deref());
                v
            }
            StageKind::Evaluate { gt, pred, .. } => vec![gt, pred],
            StageKind::Volumetry { labels, .. } => vec![labels],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    /// Artifact name of the stage output, unique within the manifest.
    pub name: String,
    #[serde(flatten)]
    pub kind: StageKind,
}

/// Cross-subject Mann-Whitney tests on the normalized volumes of one
/// volumetry stage, grouped by the subjects' `group` field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupStatsConfig {
    pub volumetry: String,
    pub group_a: String,
    pub group_b: String,
    pub alpha: f64,
    pub m: usize,
    /// Restrict to these region names; all regions when absent.
    #[serde(default)]
    pub rois: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub subjects: Vec<SubjectEntry>,
    pub stages: Vec<StageConfig>,
    pub output_root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub group_stats: Option<GroupStatsConfig>,
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl PipelineManifest {
    /// Parses a manifest and resolves relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: PipelineManifest = serde_json::from_str(text).map_err(|e| manifest_err(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut m.output_root);
        for s in &mut m.subjects {
            s.inputs.values_mut().for_each(resolve);
        }
        for st in &mut m.stages {
            if let StageKind::Synth { config: Some(c), .. } = &mut st.kind {
                resolve(c);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Structural checks: unique names, references resolvable at their point
    /// of use, and the segmentation-before-parcellation rule.
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(manifest_err("no subjects"));
        }
        if self.stages.is_empty() {
            return Err(manifest_err("no stages"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id == "." || s.id == ".." {
                return Err(manifest_err(format!("invalid subject id {:?}", s.id)));
            }
            if !ids.insert(&s.id) {
                return Err(manifest_err(format!("duplicate subject id {:?}", s.id)));
            }
        }

        let mut defined: HashMap<&str, &StageKind> = HashMap::new();
        for (i, st) in self.stages.iter().enumerate() {
            if st.name.is_empty() || st.name.contains(['/', '\\']) {
                return Err(manifest_err(format!("stage {i} has an invalid name {:?}", st.name)));
            }
            for r in st.kind.references() {
                let known = defined.contains_key(r)
                    || r.strip_suffix(".parcellation")
                        .is_some_and(|b| matches!(defined.get(b), Some(StageKind::ExtractCortex { .. })));
                if !known {
                    if let Some(s) = self.subjects.iter().find(|s| !s.inputs.contains_key(r)) {
                        return Err(manifest_err(format!(
                            "stage {:?} references {r:?}, which is neither an earlier stage nor an input of subject {:?}",
                            st.name, s.id
                        )));
                    }
                }
            }
            match &st.kind {
                StageKind::Parcellate { cortex, .. } => {
                    if !defined.values().any(|k| matches!(k, StageKind::Segment { .. })) {
                        return Err(manifest_err(format!(
                            "parcellation stage {:?} requires an earlier segmentation stage",
                            st.name
                        )));
                    }
                    let from_segment = match defined.get(cortex.as_str()) {
                        Some(StageKind::ExtractCortex { labels }) => {
                            matches!(defined.get(labels.as_str()), Some(StageKind::Segment { .. }))
                        }
                        _ => false,
                    };
                    if !from_segment {
                        return Err(manifest_err(format!(
                            "parcellation stage {:?} must take its cortex from an extract_cortex stage applied to a segmentation output",
                            st.name
                        )));
                    }
                }
                StageKind::Segment { command, .. } if command.is_empty() => {
                    return Err(manifest_err(format!("stage {:?} has an empty command", st.name)));
                }
                StageKind::Resample { spacing, like, .. } => {
                    if spacing.is_some() == like.is_some() {
                        return Err(manifest_err(format!(
                            "resample stage {:?} needs exactly one of spacing or like",
                            st.name
                        )));
                    }
                }
                StageKind::PrepLabels { convention, .. } => {
                    LabelConvention::builtin(convention).map_err(|e| manifest_err(e.to_string()))?;
                }
                _ => {}
            }
            if let StageKind::Parcellate { command, .. } = &st.kind {
                if command.is_empty() {
                    return Err(manifest_err(format!("stage {:?} has an empty command", st.name)));
                }
            }
            if defined.insert(&st.name, &st.kind).is_some() {
                return Err(manifest_err(format!("duplicate stage name {:?}", st.name)));
            }
        }

        if let Some(g) = &self.group_stats {
            if !matches!(defined.get(g.volumetry.as_str()), Some(StageKind::Volumetry { .. })) {
                return Err(manifest_err(format!("group_stats.volumetry {:?} is not a volumetry stage", g.volumetry)));
            }
            if g.m == 0 || !(g.alpha > 0.0 && g.alpha < 1.0) {
                return Err(manifest_err("group_stats needs 0 < alpha < 1 and m ≥ 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the output root.
    pub path: String,
    pub sha256: String,
}

/// One JSONL record per (subject, stage).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub subject: String,
    pub stage: String,
    pub kind: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<StageRecord>,
    pub failed_subjects: Vec<String>,
    pub group_stats_error: Option<String>,
}

impl RunReport {
    /// 0 when everything succeeded, 2 on any recorded failure.
    pub fn exit_code(&self) -> i32 {
        if self.failed_subjects.is_empty() && self.group_stats_error.is_none() {
            0
        } else {
            2
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone)]
enum Artifact {
    Labels(LabelMap, PathBuf),
    Image(VoxelGrid, PathBuf),
    Volumes(VolumeReport),
    Files,
}

struct SubjectRun<'a> {
    manifest: &'a PipelineManifest,
    subject: &'a SubjectEntry,
    index: usize,
    dir: PathBuf,
    artifacts: HashMap<String, Artifact>,
}

impl SubjectRun<'_> {
    fn input_path(&self, key: &str) -> Result<PathBuf> {
        self.subject
            .inputs
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Stage(format!("unknown reference {key:?}")))
    }

    fn labels(&self, key: &str) -> Result<(LabelMap, PathBuf)> {
        match self.artifacts.get(key) {
            Some(Artifact::Labels(l, p)) => Ok((l.clone(), p.clone())),
            Some(_) => Err(Error::Stage(format!("{key:?} is not a label map"))),
            None => {
                let path = self.input_path(key)?;
                Ok((LabelMap::from_grid_inferred(&load_nifti(&path)?)?, path))
            }
        }
    }

    fn image(&self, key: &str) -> Result<(VoxelGrid, PathBuf)> {
        match self.artifacts.get(key) {
            Some(Artifact::Image(g, p)) => Ok((g.clone(), p.clone())),
            Some(Artifact::Labels(l, p)) => Ok((l.to_grid(), p.clone())),
            Some(_) => Err(Error::Stage(format!("{key:?} is not an image"))),
            None => {
                let path = self.input_path(key)?;
                Ok((load_nifti(&path)?, path))
            }
        }
    }

    fn save_labels(&self, labels: &LabelMap, file: &str, out: &mut Vec<PathBuf>) -> Result<PathBuf> {
        let p = self.dir.join(file);
        save_nifti(&labels.to_grid(), &p, true)?;
        out.push(p.clone());
        Ok(p)
    }

    fn exec(&self, stage: &str, command: &[String], subs: &[(&str, &Path)]) -> Result<LabelMap> {
        let out_dir = self.dir.join(format!("{stage}_exec"));
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let expand = |tok: &str| {
            let mut s = tok.replace("{out_dir}", &out_dir.to_string_lossy()).replace("{subject}", &self.subject.id);
            for (k, v) in subs {
                s = s.replace(&format!("{{{k}}}"), &v.to_string_lossy());
            }
            s
        };
        let args: Vec<String> = command.iter().map(|t| expand(t)).collect();
        log::info!("{}: running {:?}", self.subject.id, args);
        let status = Command::new(&args[0])
            .args(&args[1..])
            .status()
            .map_err(|e| Error::Stage(format!("cannot run {:?}: {e}", args[0])))?;
        if !status.success() {
            return Err(Error::Stage(format!("command {:?} exited with {status}", args[0])));
        }
        ensemble_from_manifest(&out_dir.join(EXEC_MANIFEST))
    }

    fn run_stage(&mut self, st: &StageConfig) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let name = st.name.as_str();
        let mut files = Vec::new();
        let artifact = match &st.kind {
            StageKind::PrepLabels { labels, mask, convention } => {
                let (map, _) = self.labels(labels)?;
                let map = map.with_convention(Arc::new(LabelConvention::builtin(convention)?))?;
                let (mask, _) = self.image(mask)?;
                let out = relabel_unassigned_to_csf(&map, &mask)?;
                let p = self.save_labels(&out, &format!("{name}.nii.gz"), &mut files)?;
                Artifact::Labels(out, p)
            }
            StageKind::ExtractCortex { labels } => {
                let (map, _) = self.labels(labels)?;
                let ex = extract_cortex(&map)?;
                let pp = self.save_labels(&ex.parcellation, &format!("{name}_parcellation.nii.gz"), &mut files)?;
                self.artifacts.insert(format!("{name}.parcellation"), Artifact::Labels(ex.parcellation, pp));
                let p = self.save_labels(&ex.cortex, &format!("{name}_cortex.nii.gz"), &mut files)?;
                Artifact::Labels(ex.cortex, p)
            }
            StageKind::Synth { labels, config, labels_only } => {
                let (map, _) = self.labels(labels)?;
                let mut cfg = match config {
                    Some(p) => SynthConfig::read(p)?,
                    None => SynthConfig::default(),
                };
                cfg.seed = self.manifest.seed;
                if *labels_only {
                    cfg = cfg.labels_only();
                }
                let dir = self.dir.join(name);
                for replica in 0..cfg.replication {
                    let key = CaseKey { seed: cfg.seed, input: self.index, replica };
                    let case = generate_case(&map, key, &cfg)?;
                    let written = write_case(&case, &dir, &case_stem(&self.subject.id, &key))?;
                    files.push(written.labels);
                    files.extend(written.image);
                    files.push(written.provenance);
                }
                Artifact::Files
            }
            StageKind::Segment { image, command } => {
                let (_, img_path) = self.image(image)?;
                let out = self.exec(name, command, &[("image", &img_path)])?;
                let p = self.save_labels(&out, &format!("{name}.nii.gz"), &mut files)?;
                Artifact::Labels(out, p)
            }
            StageKind::Parcellate { image, cortex, command } => {
                let (_, img_path) = self.image(image)?;
                let (_, cortex_path) = self.labels(cortex)?;
                let out = self.exec(name, command, &[("image", &img_path), ("cortex", &cortex_path)])?;
                let p = self.save_labels(&out, &format!("{name}.nii.gz"), &mut files)?;
                Artifact::Labels(out, p)
            }
            StageKind::Resample { source, spacing, like, label_mode, image_order, labels } => {
                let target = match (spacing, like) {
                    (Some(s), _) => Target::Spacing(*s),
                    (None, Some(r)) => Target::Grid(self.image(r)?.0.geometry().clone()),
                    (None, None) => unreachable!("validated"),
                };
                let spec = ResampleSpec { target, image_order: *image_order, label_mode: *label_mode };
                if *labels {
                    let out = resample_labels(&self.labels(source)?.0, &spec)?;
                    let p = self.dir.join(format!("{name}.nii.gz"));
                    save_nifti_described(&out.to_grid(), &p, true, RESAMPLED_DESCRIP)?;
                    files.push(p.clone());
                    Artifact::Labels(out, p)
                } else {
                    let out = resample_image(&self.image(source)?.0, &spec)?;
                    let p = self.dir.join(format!("{name}.nii.gz"));
                    save_nifti_described(&out, &p, true, RESAMPLED_DESCRIP)?;
                    files.push(p.clone());
                    Artifact::Image(out, p)
                }
            }
            StageKind::Evaluate { gt, pred, mode } => {
                let conv = Arc::new(mode.convention());
                let g = self.labels(gt)?.0.with_convention(conv.clone())?;
                let p = self.labels(pred)?.0.with_convention(conv)?;
                let excl = evaluation_label_set(*mode);
                log::info!("{}: excluding {:?} ({})", self.subject.id, excl.excluded_ids, excl.reason);
                let report = evaluate_pair(&g, &p, &excl)?;
                let path = self.dir.join(format!("{name}.csv"));
                let mut buf = Vec::new();
                write_metrics_csv(&mut buf, &self.subject.id, &report, true)?;
                std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
                files.push(path);
                Artifact::Files
            }
            StageKind::Volumetry { labels, tiv_mm3 } => {
                let (map, _) = self.labels(labels)?;
                let report = normalize_by_tiv(&structure_volumes(&self.subject.id, &map), *tiv_mm3)?;
                let vol = self.dir.join(format!("{name}_volumes.csv"));
                let mut buf = Vec::new();
                write_volumes_csv(&mut buf, std::slice::from_ref(&report))?;
                std::fs::write(&vol, buf).map_err(|e| Error::io(&vol, e))?;
                let tiv = self.dir.join(format!("{name}_tiv.csv"));
                let mut buf = Vec::new();
                write_tiv_csv(&mut buf, std::slice::from_ref(&report))?;
                std::fs::write(&tiv, buf).map_err(|e| Error::io(&tiv, e))?;
                files.push(vol);
                files.push(tiv);
                Artifact::Volumes(report)
            }
        };
        self.artifacts.insert(name.to_string(), artifact);
        Ok(files)
    }
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

struct SubjectResult {
    records: Vec<StageRecord>,
    failed: bool,
    volumes: BTreeMap<String, VolumeReport>,
}

fn run_subject(manifest: &PipelineManifest, index: usize) -> SubjectResult {
    let subject = &manifest.subjects[index];
    let mut run = SubjectRun {
        manifest,
        subject,
        index,
        dir: manifest.output_root.join(&subject.id),
        artifacts: HashMap::new(),
    };
    let mut records = Vec::new();
    let mut failed = false;
    for st in &manifest.stages {
        let mut rec = StageRecord {
            subject: subject.id.clone(),
            stage: st.name.clone(),
            kind: st.kind.label().to_string(),
            status: StageStatus::Skipped,
            seconds: 0.0,
            artifacts: Vec::new(),
            error: None,
        };
        if !failed {
            let start = Instant::now();
            let outcome = run.run_stage(st).and_then(|files| {
                files
                    .iter()
                    .map(|f| Ok(ArtifactRecord { path: relative(&manifest.output_root, f), sha256: hash_file(f)? }))
                    .collect::<Result<Vec<_>>>()
            });
            rec.seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok(artifacts) => {
                    rec.status = StageStatus::Ok;
                    rec.artifacts = artifacts;
                }
                Err(e) => {
                    log::error!("{} / {}: {e}", subject.id, st.name);
                    rec.status = StageStatus::Failed;
                    rec.error = Some(e.to_string());
                    failed = true;
                }
            }
        }
        records.push(rec);
    }
    let volumes = run
        .artifacts
        .into_iter()
        .filter_map(|(k, a)| match a {
            Artifact::Volumes(v) => Some((k, v)),
            _ => None,
        })
        .collect();
    SubjectResult { records, failed, volumes }
}

fn group_stats(manifest: &PipelineManifest, cfg: &GroupStatsConfig, results: &[SubjectResult]) -> Result<PathBuf> {
    let mut obs = Vec::new();
    for (s, r) in manifest.subjects.iter().zip(results) {
        let (Some(group), Some(report)) = (&s.group, r.volumes.get(&cfg.volumetry)) else { continue };
        for (row, (_, v)) in report.rows.iter().zip(&report.normalized) {
            if cfg.rois.as_ref().is_some_and(|rois| !rois.contains(&row.name)) {
                continue;
            }
            obs.push(VolumeObservation {
                subject_id: s.id.clone(),
                group: group.clone(),
                roi: row.name.clone(),
                normalized_volume: *v,
                method: None,
            });
        }
    }
    let rows = group_comparisons(&obs, &cfg.group_a, &cfg.group_b, cfg.alpha, cfg.m)?;
    let path = manifest.output_root.join("group_stats.csv");
    let mut buf = Vec::new();
    write_comparisons_csv(&mut buf, &rows)?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Runs every subject through the stages on `jobs` workers and writes the
/// JSONL run report under the output root.
pub fn run_pipeline(manifest: &PipelineManifest, jobs: usize) -> Result<RunReport> {
    manifest.validate()?;
    let root = &manifest.output_root;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let results: Vec<SubjectResult> =
        pool.install(|| (0..manifest.subjects.len()).into_par_iter().map(|i| run_subject(manifest, i)).collect());

    let mut records: Vec<StageRecord> = Vec::new();
    let mut failed_subjects = Vec::new();
    for (s, r) in manifest.subjects.iter().zip(&results) {
        if r.failed {
            failed_subjects.push(s.id.clone());
        }
        records.extend(r.records.iter().cloned());
    }

    let mut group_stats_error = None;
    if let Some(cfg) = &manifest.group_stats {
        let start = Instant::now();
        let mut rec = StageRecord {
            subject: String::new(),
            stage: "group_stats".into(),
            kind: "group_stats".into(),
            status: StageStatus::Ok,
            seconds: 0.0,
            artifacts: Vec::new(),
            error: None,
        };
        match group_stats(manifest, cfg, &results).and_then(|p| Ok(ArtifactRecord { path: relative(root, &p), sha256: hash_file(&p)? })) {
            Ok(a) => rec.artifacts.push(a),
            Err(e) => {
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                group_stats_error = Some(e.to_string());
            }
        }
        rec.seconds = start.elapsed().as_secs_f64();
        records.push(rec);
    }

    let report_path = root.join(REPORT_FILE);
    let mut out = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&report_path, e))?;
    Ok(RunReport { records, failed_subjects, group_stats_error })
}
