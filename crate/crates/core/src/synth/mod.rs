//! Domain-randomized synthesis of training pairs from label maps.
//!
//! Every case `(input, replica)` draws from its own generator streams, so a
//! corpus is a pure function of the inputs and the configuration no matter
//! how many workers produce it.

mod config;
mod intensity;
mod rng;
mod spatial;

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ElasticConfig, Range, SynthConfig};
pub use intensity::{
    bias_field, blur_axis, gaussian_kernel, normalize_min_max, render_gmm, sample_gmm, synthesize_intensities,
    GmmComponent, IntensityParams,
};
pub use rng::{stage_rng, Stage};
pub use spatial::{apply_transform_labels, sample_spatial_transform, ElasticField, SpatialTransform};

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::labels::LabelMap;
use crate::nifti::save_nifti;

/// Identifies one generated case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseKey {
    pub seed: u64,
    pub input: usize,
    pub replica: usize,
}

impl CaseKey {
    pub fn rng(&self, stage: Stage) -> ChaCha20Rng {
        stage_rng(self.seed, self.input, self.replica, stage)
    }

    /// Position in the emitted corpus.
    pub fn case_index(&self, replication: usize) -> usize {
        self.input * replication + self.replica
    }
}

/// Everything needed to regenerate a case bit-identically from its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub input_index: usize,
    pub replica: usize,
    pub case_index: usize,
    pub stage_order: Vec<String>,
    pub spatial: SpatialTransform,
    pub spatial_attempts: usize,
    pub intensity: Option<IntensityParams>,
    pub config: SynthConfig,
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub key: CaseKey,
    /// Absent in label-only mode.
    pub image: Option<VoxelGrid>,
    pub labels: LabelMap,
    pub provenance: Provenance,
}

fn stage_order(cfg: &SynthConfig) -> Vec<String> {
    let mut order = vec!["spatial".to_string()];
    if cfg.intensity_synthesis {
        order.push("gmm".into());
        if cfg.bias {
            order.push("bias".into());
        }
        if cfg.gamma {
            order.push("gamma".into());
        }
        if cfg.resolution {
            order.push("resolution".into());
        }
        order.push("normalize".into());
    }
    order
}

/// Generates one case: a shared spatial transform, then (unless in label-only
/// mode) an image rendered on the deformed labels.
pub fn generate_case(input: &LabelMap, key: CaseKey, cfg: &SynthConfig) -> Result<SynthCase> {
    let (transform, attempts) = sample_spatial_transform(cfg, input.geometry(), &mut key.rng(Stage::Spatial))?;
    let labels = apply_transform_labels(input, &transform)?;
    let (image, intensity) = if cfg.intensity_synthesis {
        let (img, params) = synthesize_intensities(&labels, cfg, &key)?;
        (Some(img), Some(params))
    } else {
        (None, None)
    };
    let provenance = Provenance {
        seed: key.seed,
        input_index: key.input,
        replica: key.replica,
        case_index: key.case_index(cfg.replication),
        stage_order: stage_order(cfg),
        spatial: transform,
        spatial_attempts: attempts,
        intensity,
        config: cfg.clone(),
    };
    Ok(SynthCase { key, image, labels, provenance })
}

/// Result of one case of a corpus; failures do not stop the others.
#[derive(Debug)]
pub struct CaseOutcome {
    pub key: CaseKey,
    pub result: Result<SynthCase>,
}

fn run_in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `replication × inputs.len()` cases in case-index order, generated on
/// `jobs` workers.
pub fn generate_corpus(inputs: &[LabelMap], cfg: &SynthConfig, jobs: usize) -> Result<Vec<CaseOutcome>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input label maps".into()));
    }
    let keys: Vec<CaseKey> = (0..inputs.len())
        .flat_map(|input| (0..cfg.replication).map(move |replica| CaseKey { seed: cfg.seed, input, replica }))
        .collect();
    run_in_pool(jobs, || {
        keys.par_iter()
            .map(|&key| {
                let result = generate_case(&inputs[key.input], key, cfg);
                if let Err(e) = &result {
                    log::warn!("case {}/{} failed: {e}", key.input, key.replica);
                }
                CaseOutcome { key, result }
            })
            .collect()
    })
}

/// Files written for one case.
#[derive(Debug, Clone)]
pub struct CaseFiles {
    pub labels: PathBuf,
    pub image: Option<PathBuf>,
    pub provenance: PathBuf,
}

/// Writes `<stem>_labels.nii.gz`, `<stem>_image.nii.gz` (when present) and
/// `<stem>_provenance.json` into `dir`.
pub fn write_case(case: &SynthCase, dir: &Path, stem: &str) -> Result<CaseFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = dir.join(format!("{stem}_labels.nii.gz"));
    save_nifti(&case.labels.to_grid(), &labels, true)?;
    let image = match &case.image {
        Some(img) => {
            let p = dir.join(format!("{stem}_image.nii.gz"));
            save_nifti(img, &p, true)?;
            Some(p)
        }
        None => None,
    };
    let provenance = dir.join(format!("{stem}_provenance.json"));
    let text = serde_json::to_string_pretty(&case.provenance)?;
    std::fs::write(&provenance, text + "\n").map_err(|e| Error::io(&provenance, e))?;
    Ok(CaseFiles { labels, image, provenance })
}

/// Conventional stem for a case: `<input stem>_r<replica>`.
pub fn case_stem(input_stem: &str, key: &CaseKey) -> String {
    format!("{input_stem}_r{}", key.replica)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn blocks(n: usize) -> LabelMap {
        let g = Geometry::with_spacing([n, n, n], [1.0; 3]).unwrap();
        let ids = (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                if i < 2 || j < 2 || k < 2 || i >= n - 2 || j >= n - 2 || k >= n - 2 {
                    0
                } else if i < n / 2 {
                    17
                } else if j < n / 2 {
                    53
                } else {
                    2
                }
            })
            .collect();
        LabelMap::with_inferred_convention(g, ids).unwrap()
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let cfg = SynthConfig::default().identity_spatial();
        let map = blocks(10);
        let (t, attempts) = sample_spatial_transform(&cfg, map.geometry(), &mut stage_rng(1, 0, 0, Stage::Spatial)).unwrap();
        assert!(t.is_identity());
        assert_eq!(attempts, 1);
        assert_eq!(apply_transform_labels(&map, &t).unwrap().labels(), map.labels());
    }

    #[test]
    fn same_key_same_parameters() {
        let cfg = SynthConfig::default();
        let g = blocks(12).geometry().clone();
        let a = sample_spatial_transform(&cfg, &g, &mut stage_rng(4, 2, 1, Stage::Spatial)).unwrap();
        let b = sample_spatial_transform(&cfg, &g, &mut stage_rng(4, 2, 1, Stage::Spatial)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn integer_translation_shifts_indices() {
        let map = blocks(10);
        let t = SpatialTransform::translation([2.0, 0.0, -1.0]);
        let out = apply_transform_labels(&map, &t).unwrap();
        let g = map.geometry();
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            let src = (i + 2 < 10 && k >= 1).then(|| map.labels()[g.index(i + 2, j, k - 1)]);
            assert_eq!(out.labels()[idx], src.unwrap_or(0));
        }
    }

    #[test]
    fn rotation_draws_are_uniform_in_range() {
        let cfg = SynthConfig { elastic: ElasticConfig { spacing_mm: 24.0, std_mm: 0.0 }, ..SynthConfig::default() };
        let g = Geometry::with_spacing([4, 4, 4], [1.0; 3]).unwrap();
        let mut rng = stage_rng(11, 0, 0, Stage::Spatial);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_spatial_transform(&cfg, &g, &mut rng).unwrap().0.rotation_deg[0])
            .collect();
        assert!(draws.iter().all(|d| cfg.rotation_range.contains(*d)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        // uniform on [-15, 15]: sd = 30/sqrt(12)
        let se = 30.0 / 12f64.sqrt() / (draws.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn labels_only_mode_has_no_image() {
        let cfg = SynthConfig { replication: 2, ..SynthConfig::default().labels_only() };
        let inputs = vec![blocks(10), blocks(12)];
        let corpus = generate_corpus(&inputs, &cfg, 2).unwrap();
        assert_eq!(corpus.len(), 4);
        for c in corpus {
            let case = c.result.unwrap();
            assert!(case.image.is_none());
            assert!(case.provenance.intensity.is_none());
            let src = inputs[case.key.input].present_ids();
            assert!(case.labels.present_ids().is_subset(&src));
        }
    }

    #[test]
    fn marker_label_aligns_with_image() {
        let cfg = SynthConfig {
            gmm_std_range: Range::point(0.0),
            bias: false,
            gamma: false,
            resolution: false,
            ..SynthConfig::default()
        };
        let case = generate_case(&blocks(14), CaseKey { seed: 3, input: 0, replica: 0 }, &cfg).unwrap();
        let img = case.image.unwrap().data().to_f64_vec();
        let p = case.provenance.intensity.unwrap();
        let (lo, hi) = (p.raw_min, p.raw_max);
        for (v, id) in img.iter().zip(case.labels.labels()) {
            let mean = p.gmm.iter().find(|c| c.label_id == *id).unwrap().mean;
            assert!((v * (hi - lo) + lo - mean).abs() < 1e-3 * (hi - lo).max(1.0));
        }
    }
}
