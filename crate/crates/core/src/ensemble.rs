//! Fold ensembling: average per-fold class probabilities, then take the per-voxel argmax.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, VoxelGrid};
use crate::labels::{LabelConvention, LabelMap};
use crate::nifti::load_nifti;

/// Allowed deviation of per-voxel channel sums from 1.
pub const SUM_TOLERANCE: f64 = 1e-3;

/// One fold's probability volumes, one per label channel (background included).
#[derive(Debug, Clone)]
pub struct ProbabilityStack {
    geometry: Geometry,
    channel_ids: Vec<u32>,
    channels: Vec<Vec<f32>>,
}

impl ProbabilityStack {
    /// Validates and stores channels sorted by label id.
    pub fn new(channels: Vec<(u32, VoxelGrid)>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::InvalidArgument("probability stack has no channels".into()));
        };
        let geometry = first.1.geometry().clone();
        let mut items: Vec<(u32, Vec<f32>)> = Vec::with_capacity(channels.len());
        for (id, grid) in &channels {
            geometry.ensure_matches(grid.geometry(), &format!("channel {id}"))?;
            if !grid.data().all_finite() {
                return Err(Error::NonFinite(format!("channel {id} has non-finite probabilities")));
            }
            let values: Vec<f32> = grid.data().to_f64_vec().into_iter().map(|v| v as f32).collect();
            if let Some(v) = values.iter().find(|&&v| !(-SUM_TOLERANCE as f32..=1.0 + SUM_TOLERANCE as f32).contains(&v)) {
                return Err(Error::InvalidArgument(format!("channel {id} has probability {v} outside [0, 1]")));
            }
            items.push((*id, values));
        }
        items.sort_by_key(|(id, _)| *id);
        if items.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("duplicate channel label ids".into()));
        }
        let (channel_ids, channels): (Vec<u32>, Vec<Vec<f32>>) = items.into_iter().unzip();
        let stack = ProbabilityStack { geometry, channel_ids, channels };
        stack.check_sums()?;
        Ok(stack)
    }

    fn check_sums(&self) -> Result<()> {
        let bad = (0..self.geometry.len()).into_par_iter().find_any(|&v| {
            let s: f64 = self.channels.iter().map(|c| c[v] as f64).sum();
            (s - 1.0).abs() > SUM_TOLERANCE
        });
        match bad {
            Some(v) => Err(Error::InvalidArgument(format!(
                "channel probabilities at voxel {v} do not sum to 1 within {SUM_TOLERANCE}"
            ))),
            None => Ok(()),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channel_ids(&self) -> &[u32] {
        &self.channel_ids
    }

    /// Builds a stack from a hard labeling (probability 1 on the voxel's label).
    pub fn one_hot(labels: &LabelMap, channel_ids: &[u32]) -> Result<Self> {
        let mut ids = channel_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let channels = ids
            .iter()
            .map(|&id| labels.labels().iter().map(|&v| f32::from(u8::from(v == id))).collect())
            .collect();
        let stack = ProbabilityStack { geometry: labels.geometry().clone(), channel_ids: ids, channels };
        stack.check_sums()?;
        Ok(stack)
    }
}

/// Mean of per-fold normalized probabilities, reduced to the channel with the
/// largest mean; exact ties go to the smallest label id.
pub fn average_and_argmax(folds: &[ProbabilityStack]) -> Result<LabelMap> {
    let Some(first) = folds.first() else {
        return Err(Error::InvalidArgument("no folds to ensemble".into()));
    };
    for (i, f) in folds.iter().enumerate().skip(1) {
        first.geometry.ensure_matches(&f.geometry, &format!("fold {i}"))?;
        if f.channel_ids != first.channel_ids {
            return Err(Error::InvalidArgument(format!(
                "fold {i} channel ids {:?} differ from {:?}",
                f.channel_ids, first.channel_ids
            )));
        }
    }
    let ids = &first.channel_ids;
    let n_channels = ids.len();
    let n_folds = folds.len();

    let labels: Vec<u32> = (0..first.geometry.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n_folds], vec![0.0f64; n_folds * n_channels]),
            |(sums, norm), v| {
                for (f, fold) in folds.iter().enumerate() {
                    let s: f64 = fold.channels.iter().map(|c| c[v] as f64).sum();
                    sums[f] = s;
                    for c in 0..n_channels {
                        norm[c * n_folds + f] = fold.channels[c][v] as f64 / s;
                    }
                }
                let mut best = (ids[0], f64::NEG_INFINITY);
                for (c, &id) in ids.iter().enumerate() {
                    let vals = &mut norm[c * n_folds..(c + 1) * n_folds];
                    // summing in sorted order makes the mean independent of fold order
                    vals.sort_by(f64::total_cmp);
                    let mean = vals.iter().sum::<f64>() / n_folds as f64;
                    if mean > best.1 {
                        best = (id, mean);
                    }
                }
                best.0
            },
        )
        .collect();
    let convention = LabelConvention::from_ids("ensemble", ids.iter().copied())?;
    LabelMap::new(first.geometry.clone(), labels, Arc::new(convention))
}

/// Post-processing applied to the ensembled map; the default passes it through.
pub trait PostProcess {
    fn apply(&self, labels: LabelMap) -> Result<LabelMap>;
}

pub struct PassThrough;

impl PostProcess for PassThrough {
    fn apply(&self, labels: LabelMap) -> Result<LabelMap> {
        Ok(labels)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub file: PathBuf,
    pub label_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldEntry {
    pub channels: Vec<ChannelEntry>,
}

/// `{ folds: [ { channels: [ {file, label_id} ] } ] }`; relative files resolve against the manifest directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub folds: Vec<FoldEntry>,
}

impl EnsembleManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every channel volume referenced by the manifest.
    pub fn load(&self, base_dir: &Path) -> Result<Vec<ProbabilityStack>> {
        if self.folds.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no folds".into()));
        }
        self.folds
            .iter()
            .map(|fold| {
                let channels = fold
                    .channels
                    .iter()
                    .map(|c| {
                        let path = if c.file.is_absolute() { c.file.clone() } else { base_dir.join(&c.file) };
                        Ok((c.label_id, load_nifti(&path)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ProbabilityStack::new(channels)
            })
            .collect()
    }
}

/// Reads a manifest and ensembles its folds.
pub fn ensemble_from_manifest(path: &Path) -> Result<LabelMap> {
    let manifest = EnsembleManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let folds = manifest.load(base)?;
    PassThrough.apply(average_and_argmax(&folds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelData;

    fn two_channel(p0: f32, p1: f32) -> ProbabilityStack {
        let g = Geometry::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        ProbabilityStack::new(vec![
            (3, VoxelGrid::new(g.clone(), VoxelData::F32(vec![p0])).unwrap()),
            (9, VoxelGrid::new(g, VoxelData::F32(vec![p1])).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn mixed_folds_pick_second_channel() {
        let folds = vec![
            two_channel(0.6, 0.4),
            two_channel(0.6, 0.4),
            two_channel(0.6, 0.4),
            two_channel(0.2, 0.8),
            two_channel(0.2, 0.8),
        ];
        assert_eq!(average_and_argmax(&folds).unwrap().labels(), &[9]);
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        assert_eq!(average_and_argmax(&[two_channel(0.5, 0.5)]).unwrap().labels(), &[3]);
    }

    #[test]
    fn sums_are_validated() {
        let g = Geometry::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        let r = ProbabilityStack::new(vec![
            (0, VoxelGrid::new(g.clone(), VoxelData::F32(vec![0.5])).unwrap()),
            (1, VoxelGrid::new(g, VoxelData::F32(vec![0.3])).unwrap()),
        ]);
        assert!(r.is_err());
        // float16-style drift within tolerance is accepted
        let _ = two_channel(0.5004, 0.5);
    }

    #[test]
    fn non_finite_rejected() {
        let g = Geometry::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        let r = ProbabilityStack::new(vec![(0, VoxelGrid::new(g, VoxelData::F32(vec![f32::NAN])).unwrap())]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let g = Geometry::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        let other = ProbabilityStack::new(vec![
            (3, VoxelGrid::new(g.clone(), VoxelData::F32(vec![0.5])).unwrap()),
            (10, VoxelGrid::new(g, VoxelData::F32(vec![0.5])).unwrap()),
        ])
        .unwrap();
        assert!(average_and_argmax(&[two_channel(0.5, 0.5), other]).is_err());
        assert!(average_and_argmax(&[]).is_err());
    }
}
