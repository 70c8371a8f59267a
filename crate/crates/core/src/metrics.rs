//! Segmentation quality measures: Dice, absolute relative volume difference,
//! average boundary distance, and the 95th-percentile Hausdorff distance.
//!
//! A boundary voxel is a foreground voxel with at least one six-connected
//! neighbour that is background or outside the grid. Distances are between
//! voxel centres in millimetres.

use serde::Serialize;
use thiserror::Error;

use crate::volgrid::{BinaryMask, Dims, Spacing};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dims mismatch: {0} vs {1}")]
    DimsMismatch(Dims, Dims),
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimsMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`, defined as 1 when both masks are empty.
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.dims().len() {
        let (x, y) = (a.is_set(i), b.is_set(i));
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `100 |(|A| / |B|) - 1|` with `b` the reference.
pub fn arvd(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let nb = b.count();
    if nb == 0 {
        return Err(MetricsError::EmptyMask("reference"));
    }
    Ok(100.0 * (a.count() as f64 / nb as f64 - 1.0).abs())
}

/// Boundary voxels of a mask, kept as grid coordinates plus spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    voxels: Vec<[i64; 3]>,
    spacing: Spacing,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[[i64; 3]] {
        &self.voxels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Voxel centres in millimetres.
    pub fn points_mm(&self) -> Vec<[f64; 3]> {
        let s = self.spacing.as_array();
        self.voxels
            .iter()
            .map(|v| [v[0] as f64 * s[0], v[1] as f64 * s[1], v[2] as f64 * s[2]])
            .collect()
    }
}

/// Euclidean distance between two voxel centres.
///
/// Works from integer offsets so results are invariant under translating
/// both voxels.
#[inline]
pub fn voxel_distance(a: &[i64; 3], b: &[i64; 3], spacing: &[f64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64 * spacing[0];
    let dy = (a[1] - b[1]) as f64 * spacing[1];
    let dz = (a[2] - b[2]) as f64 * spacing[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub fn boundary_extract(mask: &BinaryMask) -> BoundarySet {
    let d = mask.dims();
    let (nx, ny, nz) = (d.nx, d.ny, d.nz);
    let mut voxels = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.is_set(d.index(x, y, z)) {
                    continue;
                }
                let off = |cx: usize, cy: usize, cz: usize| !mask.is_set(d.index(cx, cy, cz));
                let edge = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || off(x - 1, y, z)
                    || off(x + 1, y, z)
                    || off(x, y - 1, z)
                    || off(x, y + 1, z)
                    || off(x, y, z - 1)
                    || off(x, y, z + 1);
                if edge {
                    voxels.push([x as i64, y as i64, z as i64]);
                }
            }
        }
    }
    BoundarySet {
        voxels,
        spacing: mask.spacing(),
    }
}

/// Bucketed nearest-neighbour index over boundary voxels.
///
/// Cells are searched in growing Chebyshev shells around the query; the
/// search stops once the nearest unexplored shell cannot beat the best
/// distance found. Distances come from [`voxel_distance`], so the result is
/// bit-identical to an exhaustive scan.
struct NearestIndex<'a> {
    set: &'a BoundarySet,
    cell: i64,
    origin: [i64; 3],
    shape: [i64; 3],
    buckets: Vec<Vec<u32>>,
    spacing: [f64; 3],
}

impl<'a> NearestIndex<'a> {
    fn new(set: &'a BoundarySet) -> Self {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for v in &set.voxels {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let cell = 4;
        let shape = std::array::from_fn(|k| (hi[k] - lo[k]) / cell + 1);
        let mut buckets = vec![Vec::new(); (shape[0] * shape[1] * shape[2]) as usize];
        for (i, v) in set.voxels.iter().enumerate() {
            let c: [i64; 3] = std::array::from_fn(|k| (v[k] - lo[k]) / cell);
            buckets[((c[2] * shape[1] + c[1]) * shape[0] + c[0]) as usize].push(i as u32);
        }
        Self {
            set,
            cell,
            origin: lo,
            shape,
            buckets,
            spacing: set.spacing.as_array(),
        }
    }

    fn nearest(&self, q: &[i64; 3]) -> f64 {
        let home: [i64; 3] =
            std::array::from_fn(|k| ((q[k] - self.origin[k]) / self.cell).clamp(0, self.shape[k] - 1));
        let min_step = self.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_ring = (0..3)
            .map(|k| home[k].max(self.shape[k] - 1 - home[k]))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Every voxel in ring r >= 1 sits at least (r-1)*cell + 1 grid
            // steps from the query along some axis, wherever the query is.
            if ring >= 1 && best <= ((ring - 1) * self.cell + 1) as f64 * min_step {
                break;
            }
            self.visit_ring(home, ring, |i| {
                let d = voxel_distance(q, &self.set.voxels[i as usize], &self.spacing);
                if d < best {
                    best = d;
                }
            });
        }
        best
    }

    fn visit_ring(&self, home: [i64; 3], ring: i64, mut f: impl FnMut(u32)) {
        let range = |k: usize| (home[k] - ring).max(0)..=(home[k] + ring).min(self.shape[k] - 1);
        for cz in range(2) {
            for cy in range(1) {
                for cx in range(0) {
                    let cheb = (cx - home[0])
                        .abs()
                        .max((cy - home[1]).abs())
                        .max((cz - home[2]).abs());
                    if cheb != ring {
                        continue;
                    }
                    let b = &self.buckets[((cz * self.shape[1] + cy) * self.shape[0] + cx) as usize];
                    b.iter().for_each(|&i| f(i));
                }
            }
        }
    }
}

/// For each voxel of `from`, the distance to the nearest voxel of `to`, in
/// the order of `from`.
pub fn directed_distances(from: &BoundarySet, to: &BoundarySet) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let index = NearestIndex::new(to);
    from.voxels.iter().map(|v| index.nearest(v)).collect()
}

/// Smallest `d` such that at least `pct`% of `values` are `<= d`.
pub fn nearest_rank_percentile(values: &[f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn boundaries(a: &BinaryMask, b: &BinaryMask) -> Result<(BoundarySet, BoundarySet), MetricsError> {
    check_dims(a, b)?;
    let ba = boundary_extract(a);
    let bb = boundary_extract(b);
    if ba.is_empty() {
        return Err(MetricsError::EmptyMask("first"));
    }
    if bb.is_empty() {
        return Err(MetricsError::EmptyMask("second"));
    }
    Ok((ba, bb))
}

/// Symmetric mean of the two directed mean boundary distances.
pub fn abd(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    let (ba, bb) = boundaries(a, b)?;
    Ok(abd_from_sets(&ba, &bb))
}

pub fn abd_from_sets(ba: &BoundarySet, bb: &BoundarySet) -> f64 {
    0.5 * (mean(&directed_distances(ba, bb)) + mean(&directed_distances(bb, ba)))
}

/// Max of the two directed 95th-percentile (nearest-rank) boundary distances.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    let (ba, bb) = boundaries(a, b)?;
    Ok(hd95_from_sets(&ba, &bb))
}

pub fn hd95_from_sets(ba: &BoundarySet, bb: &BoundarySet) -> f64 {
    let ab = nearest_rank_percentile(&directed_distances(ba, bb), 95.0);
    let ba_ = nearest_rank_percentile(&directed_distances(bb, ba), 95.0);
    ab.max(ba_)
}

/// Classic (100th percentile) symmetric Hausdorff distance.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    let (ba, bb) = boundaries(a, b)?;
    let m = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(m(directed_distances(&ba, &bb)).max(m(directed_distances(&bb, &ba))))
}

/// All four measures for one prediction against a reference.
///
/// Measures that are undefined for empty masks are reported as `None`
/// (serialised as `null`) and explained in `flags`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub arvd_pct: Option<f64>,
    pub abd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub flags: Vec<String>,
}

pub fn evaluate(pred: &BinaryMask, truth: &BinaryMask) -> Result<MetricsReport, MetricsError> {
    let dsc = dice_coefficient(pred, truth)?;
    let mut flags = Vec::new();
    let pred_empty = pred.count() == 0;
    let truth_empty = truth.count() == 0;
    if pred_empty {
        flags.push("pred_empty".to_string());
    }
    if truth_empty {
        flags.push("gt_empty".to_string());
    }
    let arvd_pct = arvd(pred, truth).ok();
    let (abd_mm, hd95_mm) = if pred_empty || truth_empty {
        (None, None)
    } else {
        let ba = boundary_extract(pred);
        let bb = boundary_extract(truth);
        (Some(abd_from_sets(&ba, &bb)), Some(hd95_from_sets(&ba, &bb)))
    };
    Ok(MetricsReport {
        dsc,
        arvd_pct,
        abd_mm,
        hd95_mm,
        flags,
    })
}
