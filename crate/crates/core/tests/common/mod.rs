#![allow(dead_code)]

use std::sync::Arc;

use uhfsegkit::grid::{DataKind, Geometry, VoxelData, VoxelGrid};
use uhfsegkit::labels::LabelConvention;
use uhfsegkit::LabelMap;

pub const PHANTOM_N: usize = 64;

/// Ids of the deep structures placed as boxes inside the white matter.
pub fn deep_ids() -> Vec<u32> {
    LabelConvention::fs35().ids().filter(|id| ![2, 3, 24, 41, 42].contains(id)).collect()
}

/// 64³ FS35-style phantom: a 2-voxel empty border, a 3-voxel unlabeled shell
/// (CSF after relabeling), 3-voxel cortex, white matter, and the other 30
/// structures as 8³ boxes. Left structures sit at x < 32. Also returns the
/// brain mask covering everything inside the border.
pub fn phantom() -> (LabelMap, VoxelGrid) {
    let n = PHANTOM_N;
    let geom = Geometry::with_spacing([n, n, n], [1.0; 3]).unwrap();
    let deep = deep_ids();
    let origins: Vec<[usize; 3]> = [14usize, 34]
        .iter()
        .flat_map(|&z| {
            [10usize, 22, 34, 46]
                .into_iter()
                .flat_map(move |y| [10usize, 22, 34, 46].into_iter().map(move |x| [x, y, z]))
        })
        .collect();
    let mut labels = vec![0u32; geom.len()];
    let mut mask = vec![0u8; geom.len()];
    for idx in 0..geom.len() {
        let [i, j, k] = geom.coords(idx);
        let depth = [i, j, k, n - 1 - i, n - 1 - j, n - 1 - k].into_iter().min().unwrap();
        if depth < 2 {
            continue;
        }
        mask[idx] = 1;
        let left = i < n / 2;
        labels[idx] = match depth {
            2..=4 => 0,
            5..=7 => {
                if left {
                    3
                } else {
                    42
                }
            }
            _ => {
                if left {
                    2
                } else {
                    41
                }
            }
        };
        for (b, o) in origins.iter().enumerate().take(deep.len()) {
            if (0..3).all(|a| [i, j, k][a] >= o[a] && [i, j, k][a] < o[a] + 8) {
                labels[idx] = deep[b];
            }
        }
    }
    let map = LabelMap::new(geom.clone(), labels, Arc::new(LabelConvention::fs35())).unwrap();
    (map, VoxelGrid::new(geom, VoxelData::U8(mask)).unwrap())
}

/// Digital ball of radius `r` voxels centered in an `n`³ grid.
pub fn sphere(n: usize, r: f64, spacing: f64) -> LabelMap {
    let geom = Geometry::with_spacing([n, n, n], [spacing; 3]).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let labels = (0..geom.len())
        .map(|idx| {
            let v = geom.coords(idx);
            let d2: f64 = v.iter().map(|&x| (x as f64 - c).powi(2)).sum();
            u32::from(d2 <= r * r)
        })
        .collect();
    LabelMap::with_inferred_convention(geom, labels).unwrap()
}

/// Independent boundary test: the voxel lies on the volume face or has a
/// 6-neighbour with another value.
pub fn oracle_surface(map: &LabelMap, id: u32) -> Vec<[f64; 3]> {
    let g = map.geometry();
    let d = g.dims();
    let l = map.labels();
    let at = |i: i64, j: i64, k: i64| -> Option<u32> {
        if i < 0 || j < 0 || k < 0 || i >= d[0] as i64 || j >= d[1] as i64 || k >= d[2] as i64 {
            None
        } else {
            Some(l[i as usize + d[0] * (j as usize + d[1] * k as usize)])
        }
    };
    let mut out = Vec::new();
    for k in 0..d[2] as i64 {
        for j in 0..d[1] as i64 {
            for i in 0..d[0] as i64 {
                if at(i, j, k) != Some(id) {
                    continue;
                }
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if nbrs.iter().any(|(a, b, c)| at(i + a, j + b, k + c) != Some(id)) {
                    out.push(g.voxel_to_world([i as f64, j as f64, k as f64]));
                }
            }
        }
    }
    out
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// O(|G|·|P|) symmetric average surface distance.
pub fn brute_asd(g: &[[f64; 3]], p: &[[f64; 3]]) -> f64 {
    if g.is_empty() || p.is_empty() {
        return f64::NAN;
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
    };
    (directed(g, p) + directed(p, g)) / (g.len() + p.len()) as f64
}

/// Exact DSC from integer counts.
pub fn rational_dsc(g: &[u32], p: &[u32], id: u32) -> (u64, u64) {
    let gi = g.iter().filter(|&&v| v == id).count() as u64;
    let pi = p.iter().filter(|&&v| v == id).count() as u64;
    let inter = g.iter().zip(p).filter(|(&a, &b)| a == id && b == id).count() as u64;
    (2 * inter, gi + pi)
}

/// Random label map with ids drawn from `ids` (0 = background allowed),
/// made blobby by drawing per 2³ block.
pub fn random_map(seed: u64, dims: [usize; 3], ids: &[u32], spacing: [f64; 3]) -> LabelMap {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::with_spacing(dims, spacing).unwrap();
    let bdims = [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)];
    let blocks: Vec<u32> = (0..bdims.iter().product::<usize>())
        .map(|_| ids[(rng.next_u64() % ids.len() as u64) as usize])
        .collect();
    let labels = (0..geom.len())
        .map(|idx| {
            let [i, j, k] = geom.coords(idx);
            let b = i / 2 + bdims[0] * (j / 2 + bdims[1] * (k / 2));
            // sprinkle single-voxel noise so surfaces are irregular
            if rng.next_u64() % 7 == 0 {
                ids[(rng.next_u64() % ids.len() as u64) as usize]
            } else {
                blocks[b]
            }
        })
        .collect();
    LabelMap::with_inferred_convention(geom, labels).unwrap()
}

pub fn grid_of(kind: DataKind, dims: [usize; 3], values: &[f64]) -> VoxelGrid {
    let g = Geometry::with_spacing(dims, [1.0; 3]).unwrap();
    VoxelGrid::new(g, VoxelData::from_f64(kind, values)).unwrap()
}
