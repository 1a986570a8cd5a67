//! RNFL thickness on a ring around the BMO, the scalar baseline classifier.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Point3, ANTERIOR_RNFL, POSTERIOR_RNFL};
use crate::metrics::{roc_auc, RocResult};

pub const RING_ANGLES: usize = 360;
pub const RING_FACTOR: f64 = 1.4;
/// Window radius in units of the in-plane point spacing.
pub const WINDOW_FACTOR: f64 = 1.5;
/// Largest tolerated fraction of ring samples with an empty window.
pub const MAX_EMPTY_FRACTION: f64 = 0.5;

/// Mean distance of the aligned BMO points from the origin in the z=0 plane.
pub fn bmo_radius(bmo: &[Point3]) -> f64 {
    bmo.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / bmo.len() as f64
}

/// Points bucketed on an (x, y) grid for radius queries.
struct Grid<'a> {
    cell: f64,
    buckets: BTreeMap<(i64, i64), Vec<&'a Point3>>,
    /// Occupied cell index bounds: min i, max i, min j, max j.
    bounds: [i64; 4],
}

impl<'a> Grid<'a> {
    fn new(points: impl Iterator<Item = &'a Point3>, cell: f64) -> Self {
        let mut buckets: BTreeMap<(i64, i64), Vec<&'a Point3>> = BTreeMap::new();
        for p in points {
            buckets.entry(Self::key(p, cell)).or_default().push(p);
        }
        let mut bounds = [i64::MAX, i64::MIN, i64::MAX, i64::MIN];
        for &(i, j) in buckets.keys() {
            bounds = [bounds[0].min(i), bounds[1].max(i), bounds[2].min(j), bounds[3].max(j)];
        }
        Grid {
            cell,
            buckets,
            bounds,
        }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Points whose lateral distance from `(x, y)` is at most `r`.
    fn within(&self, x: f64, y: f64, r: f64) -> impl Iterator<Item = &'a Point3> + '_ {
        let (x0, y0) = Self::key(&[x - r, y - r, 0.0], self.cell);
        let (x1, y1) = Self::key(&[x + r, y + r, 0.0], self.cell);
        (x0..=x1)
            .flat_map(move |i| (y0..=y1).map(move |j| (i, j)))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .copied()
            .filter(move |p| (p[0] - x).hypot(p[1] - y) <= r)
    }

    /// Euclidean nearest neighbor, searching outward ring by ring.
    fn nearest(&self, q: &Point3) -> Option<f64> {
        if self.buckets.is_empty() {
            return None;
        }
        let (ci, cj) = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        for k in 0i64.. {
            for i in ci - k..=ci + k {
                for j in cj - k..=cj + k {
                    if (i - ci).abs() != k && (j - cj).abs() != k {
                        continue;
                    }
                    for p in self.buckets.get(&(i, j)).into_iter().flatten() {
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                        best = best.min(d);
                    }
                }
            }
            // anything outside rings 0..=k is at least k cells away laterally
            if best <= k as f64 * self.cell {
                break;
            }
            let [i0, i1, j0, j1] = self.bounds;
            if ci - k <= i0 && ci + k >= i1 && cj - k <= j0 && cj + k >= j1 {
                break;
            }
        }
        Some(best)
    }
}

/// Mean RNFL thickness on the circle of radius 1.4·r_BMO of an aligned cloud.
///
/// At each of 360 angles, anterior RNFL points within a cylinder of radius
/// 1.5 lateral spacings around the ring sample are paired with their nearest
/// posterior RNFL point; the smallest such distance is the local thickness.
/// Boundary points are voxel centers, so one axial spacing is added to span
/// the outer faces of both boundary voxels.
pub fn rnfl_thickness(cloud: &PointCloud, bmo: &[Point3], spacing: [f64; 3]) -> Result<f64> {
    if bmo.is_empty() {
        return Err(Error::Landmark("no BMO points".into()));
    }
    let ring = RING_FACTOR * bmo_radius(bmo);
    let lateral = spacing[0].max(spacing[1]);
    let window = WINDOW_FACTOR * lateral;
    let anterior: Vec<&Point3> = cloud
        .points
        .iter()
        .filter(|p| p.class == ANTERIOR_RNFL)
        .map(|p| &p.position)
        .filter(|p| (p[0].hypot(p[1]) - ring).abs() <= window)
        .collect();
    let posterior = Grid::new(
        cloud
            .points
            .iter()
            .filter(|p| p.class == POSTERIOR_RNFL)
            .map(|p| &p.position),
        2.0 * lateral,
    );
    let anterior = Grid::new(anterior.into_iter(), window);
    let mut sum = 0.0;
    let mut covered = 0usize;
    for a in 0..RING_ANGLES {
        let t = 2.0 * core::f64::consts::PI * a as f64 / RING_ANGLES as f64;
        let (x, y) = (ring * t.cos(), ring * t.sin());
        let local = anterior
            .within(x, y, window)
            .filter_map(|p| posterior.nearest(p))
            .fold(f64::INFINITY, f64::min);
        if local.is_finite() {
            sum += local + spacing[2];
            covered += 1;
        }
    }
    let empty = RING_ANGLES - covered;
    if empty as f64 > MAX_EMPTY_FRACTION * RING_ANGLES as f64 {
        return Err(Error::Coverage(format!(
            "{empty} of {RING_ANGLES} ring samples at radius {ring:.1} µm have no RNFL boundary"
        )));
    }
    Ok(sum / covered as f64)
}

/// AUC of `−thickness` as a glaucoma score.
pub fn baseline_auc(thickness: &[f64], labels: &[u8]) -> Result<RocResult> {
    let scores: Vec<f64> = thickness.iter().map(|t| -t).collect();
    roc_auc(&scores, labels)
}
