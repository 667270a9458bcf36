//! Resolution changes: interpolating cubic B-splines for images and one-hot
//! linear interpolation for label maps.
//!
//! Target grids built from a spacing keep the field of view of the source:
//! the outer voxel faces of both grids coincide. Samples that fall outside the
//! source field take the nearest edge value.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mat_mul, Affine, DataKind, Geometry, VoxelData, VoxelGrid};
use crate::labels::LabelMap;

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Target {
    Spacing([f64; 3]),
    Grid(Geometry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageOrder {
    Cubic,
    Linear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    #[serde(alias = "onehot")]
    OnehotLinear,
    Nearest,
}

impl LabelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "onehot" | "onehot-linear" | "one-hot" => Ok(LabelMode::OnehotLinear),
            "nearest" => Ok(LabelMode::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown label mode {other:?}"))),
        }
    }
}

impl ImageOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cubic" => Ok(ImageOrder::Cubic),
            "linear" => Ok(ImageOrder::Linear),
            "nearest" => Ok(ImageOrder::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown interpolation order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleSpec {
    pub target: Target,
    pub image_order: ImageOrder,
    pub label_mode: LabelMode,
}

impl ResampleSpec {
    pub fn to_spacing(spacing: [f64; 3]) -> Self {
        ResampleSpec {
            target: Target::Spacing(spacing),
            image_order: ImageOrder::Cubic,
            label_mode: LabelMode::OnehotLinear,
        }
    }

    pub fn to_grid(geometry: Geometry) -> Self {
        ResampleSpec {
            target: Target::Grid(geometry),
            image_order: ImageOrder::Cubic,
            label_mode: LabelMode::OnehotLinear,
        }
    }
}

/// Header description written on resampled volumes, recording the grid alignment.
pub const RESAMPLED_DESCRIP: &str = "uhfsegkit resample: field of view kept, outer voxel faces aligned";

/// Grid with the requested spacing covering the same field of view as `src`.
pub fn grid_with_spacing(src: &Geometry, spacing: [f64; 3]) -> Result<Geometry> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {spacing:?}")));
    }
    let a = src.affine();
    let old = src.spacing();
    let dims = src.dims();
    let mut out: Affine = *a;
    let mut new_dims = [0usize; 3];
    for axis in 0..3 {
        let extent = dims[axis] as f64 * old[axis];
        new_dims[axis] = ((extent / spacing[axis]).round() as usize).max(1);
        if spacing[axis] == old[axis] {
            continue;
        }
        let ratio = spacing[axis] / old[axis];
        let shift = (spacing[axis] - old[axis]) / (2.0 * old[axis]);
        for r in 0..3 {
            out[r][axis] = a[r][axis] * ratio;
            out[r][3] += a[r][axis] * shift;
        }
    }
    Geometry::new(new_dims, out)
}

pub fn target_geometry(src: &Geometry, target: &Target) -> Result<Geometry> {
    match target {
        Target::Spacing(s) => grid_with_spacing(src, *s),
        Target::Grid(g) => Ok(g.clone()),
    }
}

/// Maps target voxel indices to (continuous) source voxel indices.
#[derive(Clone, Copy)]
struct IndexMap {
    m: Affine,
}

impl IndexMap {
    fn new(src: &Geometry, dst: &Geometry) -> Self {
        IndexMap { m: mat_mul(src.inverse_affine(), dst.affine()) }
    }

    #[inline]
    fn source(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            let v = self.m[r][0] * x + self.m[r][1] * y + self.m[r][2] * z + self.m[r][3];
            // coordinates within rounding error of a knot land exactly on it
            let rounded = v.round();
            *o = if (v - rounded).abs() < 1e-9 { rounded } else { v };
        }
        out
    }
}

#[inline]
fn clamp_coord(c: f64, n: usize) -> f64 {
    c.clamp(0.0, (n - 1) as f64)
}

/// Lower knot and fractional offset for linear interpolation on `n` samples.
#[inline]
fn linear_cell(c: f64, n: usize) -> (usize, f64) {
    let c = clamp_coord(c, n);
    if n == 1 {
        return (0, 0.0);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, c - i0 as f64)
}

/// Runs `f(i, j, k) -> value` over every voxel of `dst`, in parallel over slices.
fn fill_parallel<T: Send + Copy + Default>(dst: &Geometry, f: impl Fn(usize, usize, usize) -> T + Sync) -> Vec<T> {
    let [nx, ny, _] = dst.dims();
    let mut out = vec![T::default(); dst.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                slice[i + nx * j] = f(i, j, k);
            }
        }
    });
    out
}

// Cubic B-spline prefiltering.

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2
const PAD: usize = 2; // coefficient padding on each side, enough for clamped taps
const EXT: usize = 32; // extension length hiding the truncated recursion start

/// Sample `m` of the point-symmetric extension of `x` (reflection through each
/// end sample), which continues linear data linearly.
fn extended(x: &[f64], m: isize) -> f64 {
    let n = x.len() as isize;
    if n == 1 {
        return x[0];
    }
    let period = 2 * (n - 1);
    let drift = 2.0 * (x[(n - 1) as usize] - x[0]);
    let q = m.div_euclid(period);
    let r = m.rem_euclid(period);
    let base = if r < n {
        x[r as usize]
    } else {
        2.0 * x[(n - 1) as usize] - x[(period - r) as usize]
    };
    base + q as f64 * drift
}

/// Interpolating B-spline coefficients of one line, padded by `PAD` on both sides.
fn prefilter_line(x: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let ext = EXT as isize;
    let s: Vec<f64> = (-ext..n + ext).map(|m| extended(x, m)).collect();
    let len = s.len();
    let mut c = vec![0.0; len];
    c[0] = s[0] / (1.0 - POLE);
    for k in 1..len {
        c[k] = s[k] + POLE * c[k - 1];
    }
    let mut d = vec![0.0; len];
    d[len - 1] = POLE / (POLE * POLE - 1.0) * (c[len - 1] + POLE * c[len - 2]);
    for k in (0..len - 1).rev() {
        d[k] = POLE * (d[k + 1] - c[k]);
    }
    let start = EXT - PAD;
    d[start..start + x.len() + 2 * PAD].iter().map(|v| 6.0 * v).collect()
}

/// Prefilters along one axis; that axis grows by `2 * PAD`.
fn prefilter_axis(data: &[f64], dims: [usize; 3], axis: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] += 2 * PAD;
    let stride = |d: [usize; 3]| [1, d[0], d[0] * d[1]];
    let in_stride = stride(dims);
    let out_stride = stride(out_dims);
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (a1, a2) = (others[0], others[1]);
    let lines: Vec<(usize, usize)> =
        (0..dims[a2]).flat_map(|q| (0..dims[a1]).map(move |p| (p, q))).collect();
    let filtered: Vec<Vec<f64>> = lines
        .par_iter()
        .map(|&(p, q)| {
            let base = p * in_stride[a1] + q * in_stride[a2];
            let line: Vec<f64> = (0..dims[axis]).map(|t| data[base + t * in_stride[axis]]).collect();
            prefilter_line(&line)
        })
        .collect();
    let mut out = vec![0.0; out_dims.iter().product()];
    for (&(p, q), coeffs) in lines.iter().zip(filtered) {
        let base = p * out_stride[a1] + q * out_stride[a2];
        for (t, v) in coeffs.into_iter().enumerate() {
            out[base + t * out_stride[axis]] = v;
        }
    }
    (out, out_dims)
}

#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Prefiltered cubic B-spline representation of a volume.
pub struct CubicSpline {
    coeffs: Vec<f64>,
    dims: [usize; 3],
    padded: [usize; 3],
    offset: f64,
}

impl CubicSpline {
    pub fn new(values: &[f64], dims: [usize; 3]) -> Self {
        // working relative to one sample keeps constant volumes exactly constant
        let offset = values.first().copied().unwrap_or(0.0);
        let mut data: Vec<f64> = values.iter().map(|v| v - offset).collect();
        let mut cur = dims;
        for axis in 0..3 {
            let (next, next_dims) = prefilter_axis(&data, cur, axis);
            data = next;
            cur = next_dims;
        }
        CubicSpline { coeffs: data, dims, padded: cur, offset }
    }

    /// Spline value at a continuous voxel index (clamped to the field).
    pub fn eval(&self, c: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let x = clamp_coord(c[a], self.dims[a]);
            let i0 = x.floor();
            w[a] = bspline_weights(x - i0);
            // tap i0-1 sits at padded index i0-1+PAD
            base[a] = i0 as usize + PAD - 1;
        }
        let [px, py, _] = self.padded;
        let mut acc = 0.0;
        for (dz, wz) in w[2].iter().enumerate() {
            if *wz == 0.0 {
                continue;
            }
            for (dy, wy) in w[1].iter().enumerate() {
                if *wy == 0.0 {
                    continue;
                }
                let row = (base[0]) + px * ((base[1] + dy) + py * (base[2] + dz));
                let mut line = 0.0;
                for (dx, wx) in w[0].iter().enumerate() {
                    line += wx * self.coeffs[row + dx];
                }
                acc += wz * wy * line;
            }
        }
        acc + self.offset
    }
}

/// Trilinear value at a continuous voxel index (clamped to the field).
pub fn trilinear(values: &[f64], dims: [usize; 3], c: [f64; 3]) -> f64 {
    let (x0, tx) = linear_cell(c[0], dims[0]);
    let (y0, ty) = linear_cell(c[1], dims[1]);
    let (z0, tz) = linear_cell(c[2], dims[2]);
    let x1 = (x0 + 1).min(dims[0] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[2] - 1);
    let at = |i: usize, j: usize, k: usize| values[i + dims[0] * (j + dims[1] * k)];
    let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
    let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
    let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
    let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

#[inline]
fn nearest_index(dims: [usize; 3], c: [f64; 3]) -> usize {
    let i = clamp_coord(c[0], dims[0]).round() as usize;
    let j = clamp_coord(c[1], dims[1]).round() as usize;
    let k = clamp_coord(c[2], dims[2]).round() as usize;
    i + dims[0] * (j + dims[1] * k)
}

/// Resamples scalar values onto `dst` with the given order.
pub fn resample_values(values: &[f64], src: &Geometry, dst: &Geometry, order: ImageOrder) -> Vec<f64> {
    let map = IndexMap::new(src, dst);
    let dims = src.dims();
    match order {
        ImageOrder::Cubic => {
            let spline = CubicSpline::new(values, dims);
            fill_parallel(dst, |i, j, k| spline.eval(map.source(i, j, k)))
        }
        ImageOrder::Linear => fill_parallel(dst, |i, j, k| trilinear(values, dims, map.source(i, j, k))),
        ImageOrder::Nearest => fill_parallel(dst, |i, j, k| values[nearest_index(dims, map.source(i, j, k))]),
    }
}

/// Resamples an image. Float images keep their kind, integer images become f32.
pub fn resample_image(img: &VoxelGrid, spec: &ResampleSpec) -> Result<VoxelGrid> {
    if !img.data().all_finite() {
        return Err(Error::NonFinite("image contains NaN or infinite values".into()));
    }
    let dst = target_geometry(img.geometry(), &spec.target)?;
    let kind = match img.data().kind() {
        DataKind::F64 => DataKind::F64,
        _ => DataKind::F32,
    };
    if dst == *img.geometry() && img.data().kind() == kind {
        return Ok(img.clone());
    }
    let values = img.data().to_f64_vec();
    let out = resample_values(&values, img.geometry(), &dst, spec.image_order);
    VoxelGrid::new(dst, VoxelData::from_f64(kind, &out))
}

/// Label at one target position under one-hot linear interpolation.
///
/// Summing the trilinear corner weights per label is the trilinear
/// interpolation of each label's indicator volume, so the per-label channels
/// never need to be materialized.
#[inline]
fn onehot_linear_label(labels: &[u32], dims: [usize; 3], c: [f64; 3]) -> u32 {
    let (x0, tx) = linear_cell(c[0], dims[0]);
    let (y0, ty) = linear_cell(c[1], dims[1]);
    let (z0, tz) = linear_cell(c[2], dims[2]);
    let mut ids = [0u32; 8];
    let mut weights = [0.0f64; 8];
    let mut n = 0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                if wx == 0.0 {
                    continue;
                }
                let i = (x0 + dx).min(dims[0] - 1);
                let j = (y0 + dy).min(dims[1] - 1);
                let k = (z0 + dz).min(dims[2] - 1);
                let id = labels[i + dims[0] * (j + dims[1] * k)];
                let w = wx * wy * wz;
                match ids[..n].iter().position(|&x| x == id) {
                    Some(p) => weights[p] += w,
                    None => {
                        ids[n] = id;
                        weights[n] = w;
                        n += 1;
                    }
                }
            }
        }
    }
    let mut best = (ids[0], weights[0]);
    for p in 1..n {
        let (id, w) = (ids[p], weights[p]);
        if w > best.1 || (w == best.1 && id < best.0) {
            best = (id, w);
        }
    }
    best.0
}

/// Resamples a label map; background competes as its own channel and exact
/// ties go to the smallest id.
pub fn resample_labels(labels: &LabelMap, spec: &ResampleSpec) -> Result<LabelMap> {
    let src = labels.geometry();
    let dst = target_geometry(src, &spec.target)?;
    let out = resample_label_values(labels.labels(), src, &dst, spec.label_mode);
    LabelMap::new(dst, out, labels.convention().clone())
}

pub fn resample_label_values(labels: &[u32], src: &Geometry, dst: &Geometry, mode: LabelMode) -> Vec<u32> {
    let map = IndexMap::new(src, dst);
    let dims = src.dims();
    match mode {
        LabelMode::OnehotLinear => fill_parallel(dst, |i, j, k| onehot_linear_label(labels, dims, map.source(i, j, k))),
        LabelMode::Nearest => fill_parallel(dst, |i, j, k| labels[nearest_index(dims, map.source(i, j, k))]),
    }
}

/// Ids present in the output but not in the input (always empty for these modes).
pub fn new_ids(before: &LabelMap, after: &LabelMap) -> BTreeSet<u32> {
    let b = before.present_ids();
    after.present_ids().difference(&b).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::identity_affine;
    use std::sync::Arc;

    fn ramp_geom(n: [usize; 3], s: f64) -> Geometry {
        Geometry::with_spacing(n, [s; 3]).unwrap()
    }

    #[test]
    fn spacing_grid_keeps_field_of_view() {
        let g = ramp_geom([10, 10, 10], 1.0);
        let t = grid_with_spacing(&g, [0.8, 0.8, 0.8]).unwrap();
        assert_eq!(t.dims(), [13, 13, 13]); // round(12.5) rounds away from zero
        let g = ramp_geom([64, 64, 64], 1.0);
        let t = grid_with_spacing(&g, [0.8; 3]).unwrap();
        assert_eq!(t.dims(), [80, 80, 80]);
        // first voxel corner coincides: center at -0.5 + 0.4
        assert!((t.voxel_to_world([0.0; 3])[0] - (-0.1)).abs() < 1e-12);
        let back = grid_with_spacing(&t, [1.0; 3]).unwrap();
        assert!(back.matches(&g, 1e-9));
        // unchanged spacing is bit-identical
        assert_eq!(grid_with_spacing(&g, [1.0; 3]).unwrap(), g);
    }

    #[test]
    fn prefilter_reproduces_samples() {
        let x = [1.0, 5.0, -2.0, 3.5, 0.0, 7.0];
        let c = prefilter_line(&x);
        for (k, v) in x.iter().enumerate() {
            let i = k + PAD;
            let rec = (c[i - 1] + 4.0 * c[i] + c[i + 1]) / 6.0;
            assert!((rec - v).abs() < 1e-12, "{k}: {rec} vs {v}");
        }
    }

    #[test]
    fn extension_is_linear_for_ramps() {
        let x = [2.0, 3.0, 4.0];
        for m in -9..12 {
            assert_eq!(extended(&x, m), 2.0 + m as f64);
        }
    }

    #[test]
    fn cubic_identity_and_constant() {
        let g = ramp_geom([5, 6, 7], 1.0);
        let vals: Vec<f64> = (0..g.len()).map(|i| ((i * 37) % 11) as f64).collect();
        let img = VoxelGrid::new(g.clone(), VoxelData::F64(vals.clone())).unwrap();
        let out = resample_image(&img, &ResampleSpec::to_grid(g.clone())).unwrap();
        for (a, b) in out.data().to_f64_vec().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-6);
        }
        let c = VoxelGrid::new(g, VoxelData::F32(vec![3.25; 210])).unwrap();
        let out = resample_image(&c, &ResampleSpec::to_spacing([0.7, 1.3, 0.45])).unwrap();
        assert!(out.data().to_f64_vec().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn non_finite_rejected() {
        let g = ramp_geom([2, 1, 1], 1.0);
        let img = VoxelGrid::new(g, VoxelData::F32(vec![1.0, f32::NAN])).unwrap();
        assert!(matches!(
            resample_image(&img, &ResampleSpec::to_spacing([0.5; 3])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn midway_tie_goes_to_smaller_id() {
        let src = ramp_geom([2, 1, 1], 1.0);
        let mut a = identity_affine();
        a[0][3] = 0.5;
        let dst = Geometry::new([1, 1, 1], a).unwrap();
        let out = resample_label_values(&[7, 4], &src, &dst, LabelMode::OnehotLinear);
        assert_eq!(out, vec![4]);
        let out = resample_label_values(&[4, 7], &src, &dst, LabelMode::OnehotLinear);
        assert_eq!(out, vec![4]);
    }

    #[test]
    fn labels_identity_grid() {
        let g = ramp_geom([4, 3, 2], 1.0);
        let vals: Vec<u32> = (0..24).map(|i| [0, 2, 17, 41][i % 4]).collect();
        let map = LabelMap::with_inferred_convention(g.clone(), vals).unwrap();
        let out = resample_labels(&map, &ResampleSpec::to_grid(g)).unwrap();
        assert_eq!(out.labels(), map.labels());
        let near = ResampleSpec { label_mode: LabelMode::Nearest, ..ResampleSpec::to_spacing([1.0; 3]) };
        let out = resample_labels(&map, &near).unwrap();
        assert_eq!(out.labels(), map.labels());
        assert!(Arc::ptr_eq(out.convention(), map.convention()));
    }

    #[test]
    fn single_label_matches_threshold() {
        // one foreground label: one-hot argmax equals trilinear indicator > 0.5
        let g = ramp_geom([9, 9, 9], 1.0);
        let vals: Vec<u32> = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let d = c.iter().map(|&x| (x as f64 - 4.0).powi(2)).sum::<f64>();
                u32::from(d < 10.0) * 5
            })
            .collect();
        let dst = grid_with_spacing(&g, [0.7, 0.9, 1.3]).unwrap();
        let onehot = resample_label_values(&vals, &g, &dst, LabelMode::OnehotLinear);
        let ind: Vec<f64> = vals.iter().map(|&v| f64::from(v == 5)).collect();
        let lin = resample_values(&ind, &g, &dst, ImageOrder::Linear);
        for (o, w) in onehot.iter().zip(&lin) {
            if (w - 0.5).abs() > 1e-12 {
                assert_eq!(*o == 5, *w > 0.5);
            }
        }
    }
}
