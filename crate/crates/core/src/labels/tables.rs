//! Embedded label tables, ids and names following the FreeSurfer color lookup table.

use super::Hemisphere::{self, Left, None as Mid, Right};

pub const CSF: u32 = 24;
pub const LEFT_CORTEX: u32 = 3;
pub const RIGHT_CORTEX: u32 = 42;
pub const LEFT_PARCEL_BASE: u32 = 1000;
pub const RIGHT_PARCEL_BASE: u32 = 2000;

/// The 35 whole-brain structures.
pub const FS35: &[(u32, &str, Hemisphere)] = &[
    (2, "Left-Cerebral-White-Matter", Left),
    (3, "Left-Cerebral-Cortex", Left),
    (4, "Left-Lateral-Ventricle", Left),
    (5, "Left-Inf-Lat-Vent", Left),
    (7, "Left-Cerebellum-White-Matter", Left),
    (8, "Left-Cerebellum-Cortex", Left),
    (10, "Left-Thalamus", Left),
    (11, "Left-Caudate", Left),
    (12, "Left-Putamen", Left),
    (13, "Left-Pallidum", Left),
    (14, "3rd-Ventricle", Mid),
    (15, "4th-Ventricle", Mid),
    (16, "Brain-Stem", Mid),
    (17, "Left-Hippocampus", Left),
    (18, "Left-Amygdala", Left),
    (24, "CSF", Mid),
    (26, "Left-Accumbens-area", Left),
    (28, "Left-VentralDC", Left),
    (31, "Left-choroid-plexus", Left),
    (41, "Right-Cerebral-White-Matter", Right),
    (42, "Right-Cerebral-Cortex", Right),
    (43, "Right-Lateral-Ventricle", Right),
    (44, "Right-Inf-Lat-Vent", Right),
    (46, "Right-Cerebellum-White-Matter", Right),
    (47, "Right-Cerebellum-Cortex", Right),
    (49, "Right-Thalamus", Right),
    (50, "Right-Caudate", Right),
    (51, "Right-Putamen", Right),
    (52, "Right-Pallidum", Right),
    (53, "Right-Hippocampus", Right),
    (54, "Right-Amygdala", Right),
    (58, "Right-Accumbens-area", Right),
    (60, "Right-VentralDC", Right),
    (63, "Right-choroid-plexus", Right),
    (77, "WM-hypointensities", Mid),
];

/// Cortical regions of the Desikan-Killiany atlas, as (offset, name).
/// Left ids are 1000 + offset, right ids 2000 + offset.
pub const DK_REGIONS: &[(u32, &str)] = &[
    (1, "bankssts"),
    (2, "caudalanteriorcingulate"),
    (3, "caudalmiddlefrontal"),
    (5, "cuneus"),
    (6, "entorhinal"),
    (7, "fusiform"),
    (8, "inferiorparietal"),
    (9, "inferiortemporal"),
    (10, "isthmuscingulate"),
    (11, "lateraloccipital"),
    (12, "lateralorbitofrontal"),
    (13, "lingual"),
    (14, "medialorbitofrontal"),
    (15, "middletemporal"),
    (16, "parahippocampal"),
    (17, "paracentral"),
    (18, "parsopercularis"),
    (19, "parsorbitalis"),
    (20, "parstriangularis"),
    (21, "pericalcarine"),
    (22, "postcentral"),
    (23, "posteriorcingulate"),
    (24, "precentral"),
    (25, "precuneus"),
    (26, "rostralanteriorcingulate"),
    (27, "rostralmiddlefrontal"),
    (28, "superiorfrontal"),
    (29, "superiorparietal"),
    (30, "superiortemporal"),
    (31, "supramarginal"),
    (32, "frontalpole"),
    (33, "temporalpole"),
    (34, "transversetemporal"),
    (35, "insula"),
];

/// Regions the DKT protocol drops from the DK atlas.
pub const DK_ONLY_REGIONS: &[&str] = &["bankssts", "frontalpole", "temporalpole"];

/// DKT regions whose boundaries absorb a DK-only region. Their overlap with a
/// DK-68 segmentation is systematically biased, so they are excluded by default
/// when cortical parcellations of both conventions are compared.
pub const ABSORBING_REGIONS: &[(&str, &[&str])] = &[
    ("bankssts", &["superiortemporal", "middletemporal"]),
    ("frontalpole", &["superiorfrontal"]),
    ("temporalpole", &["inferiortemporal", "entorhinal"]),
];

/// Whole-brain labels left out of the evaluation, as FreeSurfer ids.
pub const WHOLE_BRAIN_EXCLUDED: &[u32] = &[
    31, // Left-choroid-plexus
    63, // Right-choroid-plexus
    77, // WM-hypointensities
    4,  // Left-Lateral-Ventricle
    43, // Right-Lateral-Ventricle
    5,  // Left-Inf-Lat-Vent
    44, // Right-Inf-Lat-Vent
    CSF,
];
