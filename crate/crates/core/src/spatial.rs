//! Uniform-grid nearest-neighbour search over static point sets.

use crate::geometry::Vec3;
use crate::splats::bounding_box;

pub struct PointGrid<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let (lo, hi) = bounding_box(points).unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let ext = hi - lo;
        let max_ext = ext.amax();
        let live: Vec<f64> = ext.iter().copied().filter(|&e| e > 1e-9 * max_ext.max(1e-300)).collect();
        let cell = if live.is_empty() || points.len() < 2 {
            1.0
        } else {
            let vol: f64 = live.iter().product();
            (2.0 * vol / points.len() as f64).powf(1.0 / live.len() as f64).max(max_ext * 1e-6)
        };
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 10));
        let mut grid = PointGrid { points, origin: lo, cell, dims, starts: Vec::new(), indices: Vec::new() };
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            indices[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.indices = indices;
        grid
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            (f.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// The `k` nearest points as `(index, distance)`, closest first.
    /// Ties are broken by index.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        let c = self.cell_of(q);
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            let lo = c.map(|v| v as isize - r as isize);
            let hi = c.map(|v| v as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    for x in lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1) {
                        let on_shell = [x, y, z].iter().zip(lo.iter().zip(hi.iter())).any(|(v, (l, h))| v == l || v == h);
                        if !on_shell {
                            continue;
                        }
                        let f = self.flat([x as usize, y as usize, z as usize]);
                        for &i in &self.indices[self.starts[f]..self.starts[f + 1]] {
                            let d = (self.points[i] - q).norm();
                            if best.len() < k || (d, i) < (best[k - 1].1, best[k - 1].0) {
                                let pos = best.partition_point(|&(j, e)| (e, j) < (d, i));
                                best.insert(pos, (i, d));
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            if best.len() == k && best[k - 1].1 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }

    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.k_nearest(q, 1).first().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..120),
            q in prop::array::uniform3(-7.0f64..7.0),
            flat in any::<bool>(),
            k in 1usize..5,
        ) {
            let pts: Vec<Vec3> = pts.iter().map(|a| Vec3::new(a[0], a[1], if flat { 0.0 } else { a[2] })).collect();
            let q = Vec3::new(q[0], q[1], q[2]);
            let grid = PointGrid::new(&pts);
            let got = grid.k_nearest(&q, k);
            let mut brute: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm())).collect();
            brute.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
            brute.truncate(k);
            prop_assert_eq!(got, brute);
        }
    }
}
