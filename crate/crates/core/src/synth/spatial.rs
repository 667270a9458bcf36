//! Random affine + elastic deformations shared by labels and images.

use rand::RngExt;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Range, SynthConfig};
use crate::error::{Error, Result};
use crate::grid::{det3, Geometry};
use crate::labels::{LabelMap, BACKGROUND};
use crate::resample::CubicSpline;

/// Control-grid displacements (mm, world axes), upsampled with cubic B-splines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    pub control_dims: [usize; 3],
    pub spacing_mm: f64,
    /// Per control point, x-fastest order.
    pub displacements: Vec<[f64; 3]>,
}

impl ElasticField {
    /// Dense displacement (mm) at every voxel of `geom`, x-fastest order.
    pub fn dense(&self, geom: &Geometry) -> Vec<[f64; 3]> {
        let splines: Vec<CubicSpline> = (0..3)
            .map(|c| {
                let comp: Vec<f64> = self.displacements.iter().map(|d| d[c]).collect();
                CubicSpline::new(&comp, self.control_dims)
            })
            .collect();
        let spacing = geom.spacing();
        let step = self.spacing_mm;
        (0..geom.len())
            .into_par_iter()
            .map(|idx| {
                let v = geom.coords(idx);
                let c = [
                    v[0] as f64 * spacing[0] / step,
                    v[1] as f64 * spacing[1] / step,
                    v[2] as f64 * spacing[2] / step,
                ];
                [splines[0].eval(c), splines[1].eval(c), splines[2].eval(c)]
            })
            .collect()
    }
}

/// Affine parameters plus an optional elastic field. Maps output positions
/// back to source positions (pull-back) about the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
    pub translation_mm: [f64; 3],
    pub elastic: Option<ElasticField>,
}

type M3 = [[f64; 3]; 3];

fn mul3(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn inv3(m: &M3) -> M3 {
    let d = det3(m);
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d,
        ],
    ]
}

fn center_world(geom: &Geometry) -> [f64; 3] {
    let d = geom.dims();
    geom.voxel_to_world([(d[0] - 1) as f64 / 2.0, (d[1] - 1) as f64 / 2.0, (d[2] - 1) as f64 / 2.0])
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform {
            rotation_deg: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
            translation_mm: [0.0; 3],
            elastic: None,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        SpatialTransform { translation_mm: t, ..Self::identity() }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Linear part R · Sh · S of the pull-back.
    pub fn linear(&self) -> M3 {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let rot = mul3(&rz, &mul3(&ry, &rx));
        let sh = [[1.0, self.shear[0], self.shear[1]], [0.0, 1.0, self.shear[2]], [0.0, 0.0, 1.0]];
        let s = [[self.scale[0], 0.0, 0.0], [0.0, self.scale[1], 0.0], [0.0, 0.0, self.scale[2]]];
        mul3(&rot, &mul3(&sh, &s))
    }

    /// Source voxel coordinate for every output voxel of `geom`.
    pub fn source_coordinates(&self, geom: &Geometry) -> Vec<[f64; 3]> {
        let lin = self.linear();
        let c = center_world(geom);
        let t = self.translation_mm;
        let dense = self.elastic.as_ref().map(|e| e.dense(geom));
        let identity_linear = lin == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        (0..geom.len())
            .into_par_iter()
            .map(|idx| {
                let v = geom.coords(idx);
                let w = geom.voxel_to_world([v[0] as f64, v[1] as f64, v[2] as f64]);
                let mut src = if identity_linear {
                    w
                } else {
                    let d = [w[0] - c[0], w[1] - c[1], w[2] - c[2]];
                    let mut s = [0.0; 3];
                    for r in 0..3 {
                        s[r] = c[r] + lin[r][0] * d[0] + lin[r][1] * d[1] + lin[r][2] * d[2];
                    }
                    s
                };
                for r in 0..3 {
                    src[r] += t[r];
                    if let Some(dense) = &dense {
                        src[r] += dense[idx][r];
                    }
                }
                geom.world_to_voxel(src)
            })
            .collect()
    }

    /// Jacobian determinant of the pull-back at every voxel (central differences
    /// of the elastic field, one-sided at the borders).
    pub fn jacobian_determinants(&self, geom: &Geometry) -> Vec<f64> {
        let lin = self.linear();
        let Some(elastic) = &self.elastic else {
            return vec![det3(&lin); geom.len()];
        };
        let dense = elastic.dense(geom);
        let a = geom.affine();
        let m = [[a[0][0], a[0][1], a[0][2]], [a[1][0], a[1][1], a[1][2]], [a[2][0], a[2][1], a[2][2]]];
        let m_inv = inv3(&m);
        let dims = geom.dims();
        (0..geom.len())
            .into_par_iter()
            .map(|idx| {
                let v = geom.coords(idx);
                // du/dx (mm per voxel), columns = voxel axes
                let mut du = [[0.0; 3]; 3];
                for axis in 0..3 {
                    let (lo, hi) = if dims[axis] == 1 {
                        (v, v)
                    } else {
                        let mut lo = v;
                        let mut hi = v;
                        lo[axis] = v[axis].saturating_sub(1);
                        hi[axis] = (v[axis] + 1).min(dims[axis] - 1);
                        (lo, hi)
                    };
                    let span = (hi[axis] - lo[axis]) as f64;
                    if span == 0.0 {
                        continue;
                    }
                    let ul = dense[geom.index(lo[0], lo[1], lo[2])];
                    let uh = dense[geom.index(hi[0], hi[1], hi[2])];
                    for r in 0..3 {
                        du[r][axis] = (uh[r] - ul[r]) / span;
                    }
                }
                let du_dw = mul3(&du, &m_inv);
                let mut j = lin;
                for r in 0..3 {
                    for c in 0..3 {
                        j[r][c] += du_dw[r][c];
                    }
                }
                det3(&j)
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha20Rng, r: Range) -> f64 {
    if r.is_degenerate() {
        r.lo
    } else {
        rng.random_range(r.lo..=r.hi)
    }
}

fn draw_once(cfg: &SynthConfig, geom: &Geometry, rng: &mut ChaCha20Rng) -> SpatialTransform {
    let mut t = SpatialTransform::identity();
    for i in 0..3 {
        t.rotation_deg[i] = uniform(rng, cfg.rotation_range);
    }
    for i in 0..3 {
        t.scale[i] = uniform(rng, cfg.scale_range);
    }
    for i in 0..3 {
        t.shear[i] = uniform(rng, cfg.shear_range);
    }
    for i in 0..3 {
        t.translation_mm[i] = uniform(rng, cfg.translation_range);
    }
    if cfg.elastic.std_mm > 0.0 {
        let spacing = geom.spacing();
        let dims = geom.dims();
        let mut control_dims = [0usize; 3];
        for a in 0..3 {
            let extent = (dims[a] - 1) as f64 * spacing[a];
            control_dims[a] = (extent / cfg.elastic.spacing_mm).ceil() as usize + 1;
        }
        let normal = Normal::new(0.0, cfg.elastic.std_mm).expect("std is finite and non-negative");
        let n: usize = control_dims.iter().product();
        let displacements = (0..n).map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)]).collect();
        t.elastic = Some(ElasticField { control_dims, spacing_mm: cfg.elastic.spacing_mm, displacements });
    }
    t
}

/// Draws a transform from the configured ranges, redrawing (up to the retry
/// budget) while any voxel has a non-positive Jacobian determinant.
/// Returns the transform and the number of draws used.
pub fn sample_spatial_transform(cfg: &SynthConfig, geom: &Geometry, rng: &mut ChaCha20Rng) -> Result<(SpatialTransform, usize)> {
    for attempt in 1..=cfg.max_spatial_retries {
        let t = draw_once(cfg, geom, rng);
        let folds = t.elastic.is_some() && t.jacobian_determinants(geom).iter().any(|&d| d <= 0.0);
        if !folds && det3(&t.linear()) > 0.0 {
            return Ok((t, attempt));
        }
    }
    Err(Error::Synthesis(format!(
        "no invertible spatial transform after {} draws",
        cfg.max_spatial_retries
    )))
}

/// Pulls labels back through `t` with nearest-neighbour sampling; samples
/// outside the source field become background.
pub fn apply_transform_labels(labels: &LabelMap, t: &SpatialTransform) -> Result<LabelMap> {
    if t.is_identity() {
        return Ok(labels.clone());
    }
    let geom = labels.geometry();
    let dims = geom.dims();
    let src = labels.labels();
    let coords = t.source_coordinates(geom);
    let out: Vec<u32> = coords
        .par_iter()
        .map(|c| {
            let mut n = [0usize; 3];
            for a in 0..3 {
                let r = c[a].round();
                if r < 0.0 || r > (dims[a] - 1) as f64 {
                    return BACKGROUND;
                }
                n[a] = r as usize;
            }
            src[geom.index(n[0], n[1], n[2])]
        })
        .collect();
    LabelMap::new(geom.clone(), out, labels.convention().clone())
}
