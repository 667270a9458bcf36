//! Intensity model: GMM rendering, bias field, gamma, acquisition resolution.

use rand::RngExt;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{Range, SynthConfig};
use super::rng::Stage;
use super::CaseKey;
use crate::error::Result;
use crate::grid::{DataKind, Geometry, VoxelData, VoxelGrid};
use crate::labels::{LabelMap, BACKGROUND};
use crate::resample::{grid_with_spacing, resample_values, CubicSpline, ImageOrder};

/// FWHM of a unit Gaussian.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub label_id: u32,
    pub mean: f64,
    pub std: f64,
}

/// Sampled intensity parameters of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub gmm: Vec<GmmComponent>,
    pub bias_applied: bool,
    pub gamma: Option<f64>,
    pub acquisition_spacing_mm: Option<[f64; 3]>,
    /// Range of the image just before the final normalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

fn uniform(rng: &mut ChaCha20Rng, r: Range) -> f64 {
    if r.is_degenerate() {
        r.lo
    } else {
        rng.random_range(r.lo..=r.hi)
    }
}

/// One component per id present in `labels` (background included), drawn in
/// ascending id order.
pub fn sample_gmm(labels: &LabelMap, cfg: &SynthConfig, rng: &mut ChaCha20Rng) -> Vec<GmmComponent> {
    let mut ids = labels.present_ids();
    if labels.labels().contains(&BACKGROUND) {
        ids.insert(BACKGROUND);
    }
    ids.into_iter()
        .map(|label_id| {
            let mean = uniform(rng, cfg.gmm_mean_range);
            let std = uniform(rng, cfg.gmm_std_range);
            GmmComponent { label_id, mean, std }
        })
        .collect()
}

/// Draws every voxel from its label's normal distribution. One standard
/// normal is consumed per voxel, in storage order.
pub fn render_gmm(labels: &LabelMap, gmm: &[GmmComponent], rng: &mut ChaCha20Rng) -> Vec<f64> {
    labels
        .labels()
        .iter()
        .map(|&id| {
            let z: f64 = StandardNormal.sample(rng);
            let k = gmm.partition_point(|c| c.label_id < id);
            let c = &gmm[k];
            if c.std == 0.0 {
                c.mean
            } else {
                c.mean + c.std * z
            }
        })
        .collect()
}

/// Smooth multiplicative field exp(S), S a cubic-upsampled normal control grid
/// with `bias_scale` mm spacing.
pub fn bias_field(geom: &Geometry, cfg: &SynthConfig, rng: &mut ChaCha20Rng) -> VoxelGrid {
    let ones = || VoxelGrid::new(geom.clone(), VoxelData::F64(vec![1.0; geom.len()])).expect("sizes agree");
    if cfg.bias_std == 0.0 {
        return ones();
    }
    let spacing = geom.spacing();
    let dims = geom.dims();
    let mut cdims = [0usize; 3];
    for a in 0..3 {
        cdims[a] = ((dims[a] - 1) as f64 * spacing[a] / cfg.bias_scale).ceil() as usize + 1;
    }
    let normal = Normal::new(0.0, cfg.bias_std).expect("validated std");
    let control: Vec<f64> = (0..cdims.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
    let spline = CubicSpline::new(&control, cdims);
    let values = (0..geom.len())
        .map(|idx| {
            let v = geom.coords(idx);
            let c = [
                v[0] as f64 * spacing[0] / cfg.bias_scale,
                v[1] as f64 * spacing[1] / cfg.bias_scale,
                v[2] as f64 * spacing[2] / cfg.bias_scale,
            ];
            spline.eval(c).exp()
        })
        .collect();
    VoxelGrid::new(geom.clone(), VoxelData::F64(values)).expect("sizes agree")
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Rescales to [0, 1]; a constant image maps to zeros.
pub fn normalize_min_max(values: &mut [f64]) -> (f64, f64) {
    let (lo, hi) = min_max(values);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    (lo, hi)
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable blur along one axis with edge replication.
pub fn blur_axis(values: &[f64], dims: [usize; 3], axis: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || dims[axis] == 1 {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis] as isize;
    let mut out = vec![0.0; values.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = ((idx / stride) % dims[axis]) as isize;
        let base = idx - pos as usize * stride;
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let p = (pos + t as isize - radius).clamp(0, n - 1) as usize;
            acc += w * values[base + p * stride];
        }
        *o = acc;
    }
    out
}

/// Blurs to the sampled acquisition spacing, downsamples, and resamples back.
fn simulate_resolution(values: Vec<f64>, geom: &Geometry, target: [f64; 3]) -> Result<Vec<f64>> {
    let native = geom.spacing();
    let dims = geom.dims();
    let mut low_spacing = native;
    let mut data = values;
    for axis in 0..3 {
        if target[axis] > native[axis] {
            let fwhm = (target[axis].powi(2) - native[axis].powi(2)).sqrt();
            data = blur_axis(&data, dims, axis, fwhm / (FWHM_PER_SIGMA * native[axis]));
            low_spacing[axis] = target[axis];
        }
    }
    if low_spacing == native {
        return Ok(data);
    }
    let low = grid_with_spacing(geom, low_spacing)?;
    let down = resample_values(&data, geom, &low, ImageOrder::Linear);
    Ok(resample_values(&down, &low, geom, ImageOrder::Linear))
}

/// Renders a float image for `labels` through the enabled stages, in the
/// fixed order GMM, bias, gamma, resolution, normalization.
pub fn synthesize_intensities(labels: &LabelMap, cfg: &SynthConfig, key: &CaseKey) -> Result<(VoxelGrid, IntensityParams)> {
    let geom = labels.geometry();
    let gmm = sample_gmm(labels, cfg, &mut key.rng(Stage::Gmm));
    let mut image = render_gmm(labels, &gmm, &mut key.rng(Stage::Noise));

    if cfg.bias {
        let field = bias_field(geom, cfg, &mut key.rng(Stage::Bias));
        for (v, b) in image.iter_mut().zip(field.data().to_f64_vec()) {
            *v *= b;
        }
    }

    let gamma = if cfg.gamma {
        let log_gamma: f64 = if cfg.gamma_std == 0.0 {
            0.0
        } else {
            Normal::new(0.0, cfg.gamma_std).expect("validated std").sample(&mut key.rng(Stage::Gamma))
        };
        let g = log_gamma.exp();
        normalize_min_max(&mut image);
        for v in image.iter_mut() {
            *v = v.powf(g);
        }
        Some(g)
    } else {
        None
    };

    let acquisition = if cfg.resolution {
        let mut rng = key.rng(Stage::Resolution);
        let spacing = [
            uniform(&mut rng, cfg.resolution_range),
            uniform(&mut rng, cfg.resolution_range),
            uniform(&mut rng, cfg.resolution_range),
        ];
        image = simulate_resolution(image, geom, spacing)?;
        Some(spacing)
    } else {
        None
    };

    let (raw_min, raw_max) = normalize_min_max(&mut image);
    let grid = VoxelGrid::new(geom.clone(), VoxelData::from_f64(DataKind::F32, &image))?;
    Ok((
        grid,
        IntensityParams { gmm, bias_applied: cfg.bias, gamma, acquisition_spacing_mm: acquisition, raw_min, raw_max },
    ))
}
