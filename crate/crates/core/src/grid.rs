//! Voxel grids, geometry and canonical reorientation.
//!
//! Voxel data is stored in a single dense array with the first axis varying
//! fastest (NIfTI order), so linear index = i + nx * (j + ny * k).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 4×4 voxel-to-world matrix.
pub type Affine = [[f64; 4]; 4];

/// Tolerance (mm) used when checking that two grids describe the same space.
pub const GEOMETRY_TOLERANCE: f64 = 1e-4;

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

pub fn mat_mul(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            out[r][c] = (0..4).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3];
    }
    out
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn linear_block(a: &Affine) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[r][c];
        }
    }
    m
}

/// Inverse of an affine whose last row is (0, 0, 0, 1).
pub fn invert_affine(a: &Affine) -> Result<Affine> {
    let m = linear_block(a);
    let det = det3(&m);
    let scale = m.iter().flatten().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::DegenerateAffine(format!(
            "3x3 block is singular (det = {det:e})"
        )));
    }
    let mut inv = [[0.0; 4]; 4];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    for r in 0..3 {
        inv[r][3] = -(0..3).map(|k| inv[r][k] * a[k][3]).sum::<f64>();
    }
    inv[3][3] = 1.0;
    Ok(inv)
}

/// Dimensions, spacing and voxel-to-world mapping of a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
    inverse: Affine,
}

impl Geometry {
    /// Builds a geometry; spacing is derived from the column norms of the affine.
    pub fn new(dims: [usize; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateAffine("non-finite entries".into()));
        }
        let mut affine = affine;
        affine[3] = [0.0, 0.0, 0.0, 1.0];
        let inverse = invert_affine(&affine)?;
        let mut spacing = [0.0; 3];
        for (c, s) in spacing.iter_mut().enumerate() {
            *s = (0..3).map(|r| affine[r][c] * affine[r][c]).sum::<f64>().sqrt();
        }
        Ok(Geometry {
            dims,
            spacing,
            affine,
            inverse,
        })
    }

    /// Axis-aligned geometry with the given spacing and origin at the world origin.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let mut a = identity_affine();
        for i in 0..3 {
            a[i][i] = spacing[i];
        }
        Geometry::new(dims, a)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Affine {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, index)
    }

    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.inverse, world)
    }

    /// Whether `other` has the same dims and an affine within `tol` (mm).
    pub fn matches(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other, GEOMETRY_TOLERANCE) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?} or affines differ by more than {GEOMETRY_TOLERANCE} mm",
                self.dims, other.dims
            )))
        }
    }

    pub fn orientation(&self) -> Result<Orientation> {
        Orientation::from_affine(&self.affine)
    }
}

/// Element kind of voxel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    U8,
    U16,
    U32,
    I16,
    I32,
    F32,
    F64,
}

impl DataKind {
    pub const ALL: [DataKind; 7] = [
        DataKind::U8,
        DataKind::U16,
        DataKind::U32,
        DataKind::I16,
        DataKind::I32,
        DataKind::F32,
        DataKind::F64,
    ];

    pub fn bytes(self) -> usize {
        match self {
            DataKind::U8 => 1,
            DataKind::U16 | DataKind::I16 => 2,
            DataKind::U32 | DataKind::I32 | DataKind::F32 => 4,
            DataKind::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DataKind::F32 | DataKind::F64)
    }
}

/// Dense voxel values of one element kind.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

macro_rules! each_variant {
    ($data:expr, $v:ident => $body:expr) => {
        match $data {
            VoxelData::U8($v) => $body,
            VoxelData::U16($v) => $body,
            VoxelData::U32($v) => $body,
            VoxelData::I16($v) => $body,
            VoxelData::I32($v) => $body,
            VoxelData::F32($v) => $body,
            VoxelData::F64($v) => $body,
        }
    };
}

macro_rules! map_variant {
    ($data:expr, $v:ident => $body:expr) => {
        match $data {
            VoxelData::U8($v) => VoxelData::U8($body),
            VoxelData::U16($v) => VoxelData::U16($body),
            VoxelData::U32($v) => VoxelData::U32($body),
            VoxelData::I16($v) => VoxelData::I16($body),
            VoxelData::I32($v) => VoxelData::I32($body),
            VoxelData::F32($v) => VoxelData::F32($body),
            VoxelData::F64($v) => VoxelData::F64($body),
        }
    };
}

impl VoxelData {
    pub fn kind(&self) -> DataKind {
        match self {
            VoxelData::U8(_) => DataKind::U8,
            VoxelData::U16(_) => DataKind::U16,
            VoxelData::U32(_) => DataKind::U32,
            VoxelData::I16(_) => DataKind::I16,
            VoxelData::I32(_) => DataKind::I32,
            VoxelData::F32(_) => DataKind::F32,
            VoxelData::F64(_) => DataKind::F64,
        }
    }

    pub fn len(&self) -> usize {
        each_variant!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    #[allow(clippy::unnecessary_cast)]
    pub fn get_f64(&self, idx: usize) -> f64 {
        each_variant!(self, v => v[idx] as f64)
    }

    #[allow(clippy::unnecessary_cast)]
    pub fn to_f64_vec(&self) -> Vec<f64> {
        each_variant!(self, v => v.iter().map(|&x| x as f64).collect())
    }

    /// Converts f64 values into the requested kind (saturating, rounding for integers).
    pub fn from_f64(kind: DataKind, values: &[f64]) -> VoxelData {
        match kind {
            DataKind::U8 => VoxelData::U8(values.iter().map(|&x| x.round() as u8).collect()),
            DataKind::U16 => VoxelData::U16(values.iter().map(|&x| x.round() as u16).collect()),
            DataKind::U32 => VoxelData::U32(values.iter().map(|&x| x.round() as u32).collect()),
            DataKind::I16 => VoxelData::I16(values.iter().map(|&x| x.round() as i16).collect()),
            DataKind::I32 => VoxelData::I32(values.iter().map(|&x| x.round() as i32).collect()),
            DataKind::F32 => VoxelData::F32(values.iter().map(|&x| x as f32).collect()),
            DataKind::F64 => VoxelData::F64(values.to_vec()),
        }
    }

    /// Interprets the values as non-negative integer label ids.
    pub fn to_labels(&self) -> Result<Vec<u32>> {
        fn check(x: f64) -> Result<u32> {
            if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
                Ok(x as u32)
            } else {
                Err(Error::InvalidLabels(format!(
                    "voxel value {x} is not a non-negative integer label"
                )))
            }
        }
        match self {
            VoxelData::U8(v) => Ok(v.iter().map(|&x| x as u32).collect()),
            VoxelData::U16(v) => Ok(v.iter().map(|&x| x as u32).collect()),
            VoxelData::U32(v) => Ok(v.clone()),
            other => (0..other.len()).map(|i| check(other.get_f64(i))).collect(),
        }
    }

    /// Picks `out[n] = self[order[n]]`.
    pub fn gather(&self, order: &[usize]) -> VoxelData {
        map_variant!(self, v => order.iter().map(|&i| v[i]).collect())
    }

    pub fn all_finite(&self) -> bool {
        match self {
            VoxelData::F32(v) => v.iter().all(|x| x.is_finite()),
            VoxelData::F64(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

/// A 3D scalar field with geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: Geometry,
    data: VoxelData,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, data: VoxelData) -> Result<Self> {
        if geometry.len() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        Ok(VoxelGrid { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing()
    }

    pub fn affine(&self) -> &Affine {
        self.geometry.affine()
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        self.geometry.voxel_to_world(index)
    }

    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        self.geometry.world_to_voxel(world)
    }
}

/// Direction of one voxel axis in world space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisDirection {
    /// World axis (0 = x/R, 1 = y/A, 2 = z/S) the voxel axis follows.
    pub world: usize,
    /// True when increasing index moves toward L, P or I.
    pub flipped: bool,
}

/// Voxel axis orientation derived from an affine, one of 48 permutation/flip codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    pub axes: [AxisDirection; 3],
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl Orientation {
    pub const RAS: Orientation = Orientation {
        axes: [
            AxisDirection { world: 0, flipped: false },
            AxisDirection { world: 1, flipped: false },
            AxisDirection { world: 2, flipped: false },
        ],
    };

    /// Closest axis code for the affine's 3×3 block.
    pub fn from_affine(affine: &Affine) -> Result<Self> {
        let m = linear_block(affine);
        if det3(&m).abs() < 1e-12 {
            return Err(Error::DegenerateAffine("cannot derive orientation".into()));
        }
        let mut cols = [[0.0; 3]; 3];
        for c in 0..3 {
            let norm = (0..3).map(|r| m[r][c] * m[r][c]).sum::<f64>().sqrt();
            for r in 0..3 {
                cols[c][r] = m[r][c] / norm;
            }
        }
        // perm[v] = world axis followed by voxel axis v
        let best = PERMUTATIONS
            .iter()
            .map(|perm| {
                let score: f64 = (0..3).map(|v| cols[v][perm[v]].abs()).product();
                (perm, score)
            })
            .fold((&PERMUTATIONS[0], f64::NEG_INFINITY), |acc, cur| {
                if cur.1 > acc.1 {
                    cur
                } else {
                    acc
                }
            });
        let perm = best.0;
        let mut axes = [AxisDirection { world: 0, flipped: false }; 3];
        for v in 0..3 {
            axes[v] = AxisDirection {
                world: perm[v],
                flipped: cols[v][perm[v]] < 0.0,
            };
        }
        Ok(Orientation { axes })
    }

    /// Three-letter code such as "RAS" or "LPS".
    pub fn code(&self) -> String {
        self.axes
            .iter()
            .map(|a| match (a.world, a.flipped) {
                (0, false) => 'R',
                (0, true) => 'L',
                (1, false) => 'A',
                (1, true) => 'P',
                (2, false) => 'S',
                _ => 'I',
            })
            .collect()
    }

    pub fn parse(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.trim().to_ascii_uppercase().chars().collect();
        if chars.len() != 3 {
            return Err(Error::InvalidArgument(format!("bad orientation code {code:?}")));
        }
        let mut axes = [AxisDirection { world: 0, flipped: false }; 3];
        let mut seen = [false; 3];
        for (v, c) in chars.iter().enumerate() {
            let (world, flipped) = match c {
                'R' => (0, false),
                'L' => (0, true),
                'A' => (1, false),
                'P' => (1, true),
                'S' => (2, false),
                'I' => (2, true),
                _ => return Err(Error::InvalidArgument(format!("bad orientation code {code:?}"))),
            };
            if seen[world] {
                return Err(Error::InvalidArgument(format!("bad orientation code {code:?}")));
            }
            seen[world] = true;
            axes[v] = AxisDirection { world, flipped };
        }
        Ok(Orientation { axes })
    }

    pub fn is_ras(&self) -> bool {
        *self == Orientation::RAS
    }
}

/// Rearranges voxel axes: output axis `a` reads source axis `source_axis[a]`,
/// reversed when `flip[a]`. The affine is updated so world positions are unchanged.
fn permute_axes(grid: &VoxelGrid, source_axis: [usize; 3], flip: [bool; 3]) -> Result<VoxelGrid> {
    let src_geom = grid.geometry();
    let sd = src_geom.dims();
    let mut dims = [0; 3];
    for a in 0..3 {
        dims[a] = sd[source_axis[a]];
    }
    // new index n -> old index o, o[source_axis[a]] = flip ? d-1-n[a] : n[a]
    let mut t = [[0.0; 4]; 4];
    t[3][3] = 1.0;
    for a in 0..3 {
        let s = source_axis[a];
        if flip[a] {
            t[s][a] = -1.0;
            t[s][3] = (sd[s] - 1) as f64;
        } else {
            t[s][a] = 1.0;
        }
    }
    let affine = mat_mul(src_geom.affine(), &t);
    let geometry = Geometry::new(dims, affine)?;

    let mut order = Vec::with_capacity(geometry.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let n = [i, j, k];
                let mut o = [0usize; 3];
                for a in 0..3 {
                    let s = source_axis[a];
                    o[s] = if flip[a] { sd[s] - 1 - n[a] } else { n[a] };
                }
                order.push(src_geom.index(o[0], o[1], o[2]));
            }
        }
    }
    VoxelGrid::new(geometry, grid.data().gather(&order))
}

/// Reorders voxels into RAS order; returns the original orientation for [`undo_reorient`].
pub fn reorient_canonical(grid: &VoxelGrid) -> Result<(VoxelGrid, Orientation)> {
    let orientation = grid.geometry().orientation()?;
    if orientation.is_ras() {
        return Ok((grid.clone(), orientation));
    }
    let mut source_axis = [0; 3];
    let mut flip = [false; 3];
    for (v, axis) in orientation.axes.iter().enumerate() {
        source_axis[axis.world] = v;
        flip[axis.world] = axis.flipped;
    }
    Ok((permute_axes(grid, source_axis, flip)?, orientation))
}

/// Restores the voxel order of a grid previously passed through [`reorient_canonical`].
pub fn undo_reorient(grid: &VoxelGrid, original: &Orientation) -> Result<VoxelGrid> {
    if original.is_ras() {
        return Ok(grid.clone());
    }
    let mut source_axis = [0; 3];
    let mut flip = [false; 3];
    for (v, axis) in original.axes.iter().enumerate() {
        source_axis[v] = axis.world;
        flip[v] = axis.flipped;
    }
    permute_axes(grid, source_axis, flip)
}
