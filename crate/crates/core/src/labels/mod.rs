//! Label conventions, label maps, and the label-map preparation transforms.

pub mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DataKind, Geometry, VoxelData, VoxelGrid};
use crate::kdtree::KdTree;

pub const BACKGROUND: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    None,
}

impl Hemisphere {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" | "lh" => Ok(Hemisphere::Left),
            "right" | "r" | "rh" => Ok(Hemisphere::Right),
            "none" | "" | "-" => Ok(Hemisphere::None),
            other => Err(Error::InvalidArgument(format!("unknown hemisphere {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConventionName {
    /// 35 whole-brain structures.
    Fs35,
    /// 62 DKT cortical parcels.
    Dkt62,
    /// 68 DK cortical parcels.
    Dk68,
    /// Whole-brain structures plus DKT parcels (a parcellated whole-brain map).
    Fs35Dkt62,
    Custom(String),
}

impl fmt::Display for ConventionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConventionName::Fs35 => f.write_str("FS35"),
            ConventionName::Dkt62 => f.write_str("DKT62"),
            ConventionName::Dk68 => f.write_str("DK68"),
            ConventionName::Fs35Dkt62 => f.write_str("FS35+DKT62"),
            ConventionName::Custom(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u32,
    pub name: String,
    pub hemisphere: Hemisphere,
}

/// A named set of label ids with region names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelConvention {
    name: ConventionName,
    entries: Vec<LabelEntry>,
    index: HashMap<u32, usize>,
}

impl LabelConvention {
    pub fn new(name: ConventionName, mut entries: Vec<LabelEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id == BACKGROUND {
                return Err(Error::InvalidArgument(format!(
                    "convention {name}: background id 0 cannot be a label entry"
                )));
            }
            if index.insert(e.id, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "convention {name}: duplicate label id {}",
                    e.id
                )));
            }
        }
        Ok(LabelConvention { name, entries, index })
    }

    fn from_table(name: ConventionName, table: &[(u32, &str, Hemisphere)]) -> Self {
        let entries = table
            .iter()
            .map(|&(id, n, h)| LabelEntry { id, name: n.to_string(), hemisphere: h })
            .collect();
        Self::new(name, entries).expect("embedded table is valid")
    }

    pub fn fs35() -> Self {
        Self::from_table(ConventionName::Fs35, tables::FS35)
    }

    fn cortical(name: ConventionName, include_dk_only: bool) -> Self {
        let mut entries = Vec::new();
        for (base, prefix, hemi) in [
            (tables::LEFT_PARCEL_BASE, "ctx-lh-", Hemisphere::Left),
            (tables::RIGHT_PARCEL_BASE, "ctx-rh-", Hemisphere::Right),
        ] {
            for &(offset, region) in tables::DK_REGIONS {
                if !include_dk_only && tables::DK_ONLY_REGIONS.contains(&region) {
                    continue;
                }
                entries.push(LabelEntry {
                    id: base + offset,
                    name: format!("{prefix}{region}"),
                    hemisphere: hemi,
                });
            }
        }
        Self::new(name, entries).expect("embedded table is valid")
    }

    pub fn dkt62() -> Self {
        Self::cortical(ConventionName::Dkt62, false)
    }

    pub fn dk68() -> Self {
        Self::cortical(ConventionName::Dk68, true)
    }

    /// Whole-brain structures with the cortex additionally subdivided into DKT parcels.
    pub fn fs35_dkt62() -> Self {
        let mut entries = Self::fs35().entries;
        entries.extend(Self::dkt62().entries);
        Self::new(ConventionName::Fs35Dkt62, entries).expect("embedded table is valid")
    }

    /// Looks up a built-in convention by name (fs35, dkt62, dk68, fs35+dkt62).
    pub fn builtin(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "fs35" => Ok(Self::fs35()),
            "dkt62" => Ok(Self::dkt62()),
            "dk68" => Ok(Self::dk68()),
            "fs35+dkt62" | "fs35dkt62" | "aseg+dkt" => Ok(Self::fs35_dkt62()),
            other => Err(Error::InvalidArgument(format!("unknown label convention {other:?}"))),
        }
    }

    /// Convention containing exactly the given ids, with generated names.
    pub fn from_ids(name: &str, ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let known = Self::fs35_dkt62();
        let dk = Self::dk68();
        let entries = ids
            .into_iter()
            .filter(|&id| id != BACKGROUND)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|id| match known.entry(id).or_else(|| dk.entry(id)) {
                Some(e) => e.clone(),
                None => LabelEntry { id, name: format!("label-{id}"), hemisphere: Hemisphere::None },
            })
            .collect();
        Self::new(ConventionName::Custom(name.to_string()), entries)
    }

    /// Reads an override table with columns `id,name,hemisphere`.
    pub fn from_csv(name: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: u32,
            name: String,
            hemisphere: String,
        }
        let mut reader = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            entries.push(LabelEntry {
                id: row.id,
                name: row.name,
                hemisphere: Hemisphere::parse(&row.hemisphere)?,
            });
        }
        Self::new(ConventionName::Custom(name.to_string()), entries)
    }

    pub fn name(&self) -> &ConventionName {
        &self.name
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    pub fn entry(&self, id: u32) -> Option<&LabelEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn region_name(&self, id: u32) -> &str {
        self.entry(id).map(|e| e.name.as_str()).unwrap_or("unknown")
    }

    pub fn id_by_name(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }
}

/// Integer label volume tagged with its convention. Id 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    labels: Vec<u32>,
    convention: Arc<LabelConvention>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, labels: Vec<u32>, convention: Arc<LabelConvention>) -> Result<Self> {
        if geometry.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                geometry.dims()
            )));
        }
        let map = LabelMap { geometry, labels, convention };
        if let Some(bad) = map.present_ids().into_iter().find(|id| !map.convention.contains(*id)) {
            return Err(Error::InvalidLabels(format!(
                "label {bad} is not part of convention {}",
                map.convention.name()
            )));
        }
        Ok(map)
    }

    /// Wraps labels with a convention built from the ids that are present.
    pub fn with_inferred_convention(geometry: Geometry, labels: Vec<u32>) -> Result<Self> {
        let ids: BTreeSet<u32> = labels.iter().copied().collect();
        let convention = LabelConvention::from_ids("inferred", ids)?;
        Self::new(geometry, labels, Arc::new(convention))
    }

    pub fn from_grid(grid: &VoxelGrid, convention: Arc<LabelConvention>) -> Result<Self> {
        Self::new(grid.geometry().clone(), grid.data().to_labels()?, convention)
    }

    pub fn from_grid_inferred(grid: &VoxelGrid) -> Result<Self> {
        Self::with_inferred_convention(grid.geometry().clone(), grid.data().to_labels()?)
    }

    /// Integer grid for writing: unsigned 16-bit when every id fits, otherwise 32-bit.
    pub fn to_grid(&self) -> VoxelGrid {
        let max = self.labels.iter().copied().max().unwrap_or(0);
        let data = if max < 65536 {
            VoxelData::U16(self.labels.iter().map(|&v| v as u16).collect())
        } else {
            VoxelData::U32(self.labels.clone())
        };
        VoxelGrid::new(self.geometry.clone(), data).expect("lengths already validated")
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    pub fn convention(&self) -> &Arc<LabelConvention> {
        &self.convention
    }

    pub fn with_convention(self, convention: Arc<LabelConvention>) -> Result<Self> {
        Self::new(self.geometry, self.labels, convention)
    }

    /// Nonzero ids that occur at least once.
    pub fn present_ids(&self) -> BTreeSet<u32> {
        let mut seen = BTreeSet::new();
        let mut last = None;
        for &v in &self.labels {
            if v != BACKGROUND && last != Some(v) {
                seen.insert(v);
                last = Some(v);
            }
        }
        seen
    }

    /// Voxel count per nonzero id.
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &v in &self.labels {
            if v != BACKGROUND {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn foreground_voxels(&self) -> usize {
        self.labels.iter().filter(|&&v| v != BACKGROUND).count()
    }
}

/// Labels removed from an evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExclusionSet {
    pub excluded_ids: BTreeSet<u32>,
    pub reason: String,
}

impl ExclusionSet {
    pub fn none() -> Self {
        ExclusionSet { excluded_ids: BTreeSet::new(), reason: "no exclusions".into() }
    }

    /// Exclusion of explicit ids, which must all belong to `convention`.
    pub fn from_ids(ids: impl IntoIterator<Item = u32>, reason: &str, convention: &LabelConvention) -> Result<Self> {
        let excluded_ids: BTreeSet<u32> = ids.into_iter().collect();
        if let Some(bad) = excluded_ids.iter().find(|id| !convention.contains(**id)) {
            return Err(Error::InvalidArgument(format!(
                "excluded id {bad} is not part of convention {}",
                convention.name()
            )));
        }
        Ok(ExclusionSet { excluded_ids, reason: reason.to_string() })
    }

    /// Ids of `convention` that remain after the exclusion, ascending.
    pub fn evaluated_ids(&self, convention: &LabelConvention) -> Vec<u32> {
        convention.ids().filter(|id| !self.excluded_ids.contains(id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationMode {
    WholeBrain,
    Cortex,
}

impl EvaluationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "whole-brain" | "wholebrain" | "segmentation" => Ok(EvaluationMode::WholeBrain),
            "cortex" | "parcellation" => Ok(EvaluationMode::Cortex),
            other => Err(Error::InvalidArgument(format!("unknown evaluation mode {other:?}"))),
        }
    }

    /// Convention the mode evaluates against.
    pub fn convention(self) -> LabelConvention {
        match self {
            EvaluationMode::WholeBrain => LabelConvention::fs35(),
            EvaluationMode::Cortex => LabelConvention::dkt62(),
        }
    }
}

/// DKT ids excluded when comparing against DK-68 parcellations: regions that
/// absorb a DK-only region, found by name-matching the two conventions.
pub fn default_cortex_exclusion() -> BTreeSet<u32> {
    let dkt = LabelConvention::dkt62();
    let dk = LabelConvention::dk68();
    let dkt_regions: BTreeSet<&str> =
        dkt.entries().iter().map(|e| e.name.trim_start_matches("ctx-lh-").trim_start_matches("ctx-rh-")).collect();
    let mut ids = BTreeSet::new();
    for e in dk.entries() {
        let region = e.name.trim_start_matches("ctx-lh-").trim_start_matches("ctx-rh-");
        if dkt_regions.contains(region) {
            continue;
        }
        let prefix = if e.hemisphere == Hemisphere::Left { "ctx-lh-" } else { "ctx-rh-" };
        for (dropped, absorbing) in tables::ABSORBING_REGIONS {
            if *dropped == region {
                for a in absorbing.iter() {
                    if let Some(id) = dkt.id_by_name(&format!("{prefix}{a}")) {
                        ids.insert(id);
                    }
                }
            }
        }
    }
    ids
}

/// Default exclusion set for an evaluation mode.
pub fn evaluation_label_set(mode: EvaluationMode) -> ExclusionSet {
    match mode {
        EvaluationMode::WholeBrain => ExclusionSet {
            excluded_ids: tables::WHOLE_BRAIN_EXCLUDED.iter().copied().collect(),
            reason: "choroid plexus, WM-hypointensities, lateral and inferior lateral ventricles, CSF".into(),
        },
        EvaluationMode::Cortex => ExclusionSet {
            excluded_ids: default_cortex_exclusion(),
            reason: "DKT regions absorbing DK-only regions (bankssts, frontalpole, temporalpole)".into(),
        },
    }
}

/// Assigns CSF to every background voxel inside the brain mask. No dilation.
pub fn relabel_unassigned_to_csf(labels: &LabelMap, brain_mask: &VoxelGrid) -> Result<LabelMap> {
    labels.geometry().ensure_matches(brain_mask.geometry(), "label map vs brain mask")?;
    if !labels.convention().contains(tables::CSF) {
        return Err(Error::InvalidLabels(format!(
            "convention {} has no CSF label ({})",
            labels.convention().name(),
            tables::CSF
        )));
    }
    let mask = brain_mask.data();
    let out: Vec<u32> = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v == BACKGROUND && mask.get_f64(i) != 0.0 { tables::CSF } else { v })
        .collect();
    LabelMap::new(labels.geometry().clone(), out, labels.convention().clone())
}

/// Output of [`extract_cortex`].
#[derive(Debug, Clone)]
pub struct CortexExtraction {
    /// Left/right cortex only (ids 3 and 42).
    pub cortex: LabelMap,
    /// DKT parcels on exactly the cortex voxels.
    pub parcellation: LabelMap,
    /// Cortex voxels left as 3/42 because their hemisphere has no parcels.
    pub unparcellated_voxels: usize,
}

fn cortex_hemisphere(id: u32, dkt: &LabelConvention) -> Option<Hemisphere> {
    match id {
        tables::LEFT_CORTEX => Some(Hemisphere::Left),
        tables::RIGHT_CORTEX => Some(Hemisphere::Right),
        _ => dkt.entry(id).map(|e| e.hemisphere),
    }
}

/// Splits a whole-brain map into a two-label cortex map and its DKT parcellation.
///
/// Cortex voxels carrying the plain cortex id (3/42) take the nearest parcel of
/// the same hemisphere; if that hemisphere has no parcels they keep 3/42.
pub fn extract_cortex(labels: &LabelMap) -> Result<CortexExtraction> {
    let dkt = LabelConvention::dkt62();
    let geom = labels.geometry();
    let src = labels.labels();

    let mut cortex = vec![BACKGROUND; src.len()];
    let mut parcels = vec![BACKGROUND; src.len()];
    let mut bare: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut parcel_voxels: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &v) in src.iter().enumerate() {
        let Some(h) = cortex_hemisphere(v, &dkt) else { continue };
        let side = usize::from(h == Hemisphere::Right);
        cortex[i] = if side == 0 { tables::LEFT_CORTEX } else { tables::RIGHT_CORTEX };
        if v == tables::LEFT_CORTEX || v == tables::RIGHT_CORTEX {
            bare[side].push(i);
        } else {
            parcels[i] = v;
            parcel_voxels[side].push(i);
        }
    }
    if bare.iter().all(|b| b.is_empty()) && parcel_voxels.iter().all(|p| p.is_empty()) {
        return Err(Error::InvalidLabels("no cortex labels present".into()));
    }

    let world = |i: usize| {
        let c = geom.coords(i);
        geom.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64])
    };
    let mut unparcellated = 0;
    for side in 0..2 {
        if bare[side].is_empty() {
            continue;
        }
        if parcel_voxels[side].is_empty() {
            for &i in &bare[side] {
                parcels[i] = cortex[i];
            }
            unparcellated += bare[side].len();
            continue;
        }
        let points: Vec<[f64; 3]> = parcel_voxels[side].iter().map(|&i| world(i)).collect();
        let tree = KdTree::new(&points);
        for &i in &bare[side] {
            let (nearest, _) = tree.nearest(world(i)).expect("tree is non-empty");
            parcels[i] = src[parcel_voxels[side][nearest]];
        }
    }
    if unparcellated > 0 {
        log::warn!("{unparcellated} cortex voxels have no parcel in their hemisphere and keep the cortex id");
    }

    let cortex_conv = LabelConvention::from_ids("cortex", [tables::LEFT_CORTEX, tables::RIGHT_CORTEX])?;
    let parcel_conv = if unparcellated > 0 {
        let mut entries = dkt.entries().to_vec();
        entries.extend(cortex_conv.entries().iter().cloned());
        LabelConvention::new(ConventionName::Custom("DKT62+cortex".into()), entries)?
    } else {
        dkt
    };
    Ok(CortexExtraction {
        cortex: LabelMap::new(geom.clone(), cortex, Arc::new(cortex_conv))?,
        parcellation: LabelMap::new(geom.clone(), parcels, Arc::new(parcel_conv))?,
        unparcellated_voxels: unparcellated,
    })
}

/// Explicit source→target id mapping.
pub type MappingTable = BTreeMap<u32, u32>;

/// Reads a mapping table with columns `src_id,dst_id`.
pub fn read_mapping_table(path: &Path) -> Result<MappingTable> {
    #[derive(Deserialize)]
    struct Row {
        src_id: u32,
        dst_id: u32,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut table = MappingTable::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        table.insert(row.src_id, row.dst_id);
    }
    Ok(table)
}

/// Mapping between two conventions by region name; unmatched source ids go to background.
pub fn name_matched_table(source: &LabelConvention, target: &LabelConvention) -> MappingTable {
    source
        .entries()
        .iter()
        .map(|e| (e.id, target.id_by_name(&e.name).unwrap_or(BACKGROUND)))
        .collect()
}

/// Result of [`map_convention`].
#[derive(Debug, Clone)]
pub struct ConventionMapping {
    pub labels: LabelMap,
    /// Voxels sent to background per source id, because the table has no
    /// entry for it, maps it to 0, or maps it outside the target convention.
    pub dropped_voxels: BTreeMap<u32, usize>,
}

/// Relabels a map into `target` using an explicit id table.
pub fn map_convention(labels: &LabelMap, target: Arc<LabelConvention>, table: &MappingTable) -> Result<ConventionMapping> {
    let mut dropped = BTreeMap::new();
    let mut cache: HashMap<u32, u32> = HashMap::new();
    let out: Vec<u32> = labels
        .labels()
        .iter()
        .map(|&v| {
            if v == BACKGROUND {
                return BACKGROUND;
            }
            let dst = *cache.entry(v).or_insert_with(|| match table.get(&v) {
                Some(&d) if d != BACKGROUND && target.contains(d) => d,
                _ => BACKGROUND,
            });
            if dst == BACKGROUND {
                *dropped.entry(v).or_insert(0) += 1;
            }
            dst
        })
        .collect();
    let total: usize = dropped.values().sum();
    if total > 0 {
        log::info!("map_convention: {total} voxels routed to background ({} source ids)", dropped.len());
    }
    Ok(ConventionMapping {
        labels: LabelMap::new(labels.geometry().clone(), out, target)?,
        dropped_voxels: dropped,
    })
}

/// A binary mask grid (u8) sharing the label map's geometry.
pub fn mask_from_labels(labels: &LabelMap) -> VoxelGrid {
    let data = VoxelData::U8(labels.labels().iter().map(|&v| u8::from(v != BACKGROUND)).collect());
    VoxelGrid::new(labels.geometry().clone(), data).expect("same length")
}

/// Element kind used when writing label maps.
pub fn label_kind_for(max_label: u32) -> DataKind {
    if max_label < 65536 {
        DataKind::U16
    } else {
        DataKind::U32
    }
}
