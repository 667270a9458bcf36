//! Static 3-d tree for exact nearest-neighbour queries.

/// Balanced kd-tree built once over a point set; stores points in tree order.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    ids: Vec<usize>,
    // split axis per node, indexed by the node's midpoint in `points`
    axes: Vec<u8>,
}

const LEAF_SIZE: usize = 8;

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut items: Vec<([f64; 3], usize)> =
            points.iter().copied().enumerate().map(|(i, p)| (p, i)).collect();
        let mut axes = vec![0u8; items.len()];
        build(&mut items, &mut axes, 0);
        let (points, ids) = items.into_iter().unzip();
        KdTree { points, ids, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index (into the construction slice) and squared distance of the nearest point.
    pub fn nearest(&self, query: [f64; 3]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.points.len(), query, &mut best);
        Some((self.ids[best.0], best.1))
    }

    /// Euclidean distance to the nearest point.
    pub fn nearest_distance(&self, query: [f64; 3]) -> Option<f64> {
        self.nearest(query).map(|(_, d2)| d2.sqrt())
    }

    fn search(&self, lo: usize, hi: usize, q: [f64; 3], best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for i in lo..hi {
                let d = dist2(self.points[i], q);
                if d < best.1 {
                    *best = (i, d);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let p = self.points[mid];
        let d = dist2(p, q);
        if d < best.1 {
            *best = (mid, d);
        }
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        if delta * delta < best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build(items: &mut [([f64; 3], usize)], axes: &mut [u8], depth: usize) {
    if items.len() <= LEAF_SIZE {
        return;
    }
    // split on the axis of largest spread
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(depth % 3);
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |x, y| x.0[axis].total_cmp(&y.0[axis]));
    axes[mid] = axis as u8;
    let (left, right) = items.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build(left, left_axes, depth + 1);
    build(&mut right[1..], &mut right_axes[1..], depth + 1);
}
