//! Brute-force reference implementations of the evaluation measures.

use rand::Rng;
use volseg::volgrid::{BinaryMask, Dims, Spacing};

pub struct Reference {
    pub dsc: f64,
    pub arvd_pct: Option<f64>,
    pub abd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
}

fn at(m: &BinaryMask, x: i64, y: i64, z: i64) -> bool {
    let d = m.dims();
    if x < 0 || y < 0 || z < 0 || x >= d.nx as i64 || y >= d.ny as i64 || z >= d.nz as i64 {
        return false;
    }
    m.is_set(d.index(x as usize, y as usize, z as usize))
}

/// Foreground voxels with a 6-neighbour outside the mask, where everything
/// beyond the grid counts as outside. Scan order, x fastest.
pub fn boundary(m: &BinaryMask) -> Vec<[i64; 3]> {
    let d = m.dims();
    let mut out = Vec::new();
    for z in 0..d.nz as i64 {
        for y in 0..d.ny as i64 {
            for x in 0..d.nx as i64 {
                if !at(m, x, y, z) {
                    continue;
                }
                let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                if steps.iter().any(|s| !at(m, x + s[0], y + s[1], z + s[2])) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn dist(a: [i64; 3], b: [i64; 3], s: [f64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64 * s[0];
    let dy = (a[1] - b[1]) as f64 * s[1];
    let dz = (a[2] - b[2]) as f64 * s[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// All-pairs nearest distance from each point of `from` to `to`.
fn directed(from: &[[i64; 3]], to: &[[i64; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&p| to.iter().map(|&q| dist(p, q, s)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (0.95 * v.len() as f64).ceil() as usize;
    v[k.max(1) - 1]
}

pub fn reference(pred: &BinaryMask, truth: &BinaryMask) -> Reference {
    let n = pred.dims().len();
    let a = (0..n).filter(|&i| pred.is_set(i)).count();
    let b = (0..n).filter(|&i| truth.is_set(i)).count();
    let both = (0..n).filter(|&i| pred.is_set(i) && truth.is_set(i)).count();
    let dsc = if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 };
    let arvd_pct = (b > 0).then(|| 100.0 * (a as f64 / b as f64 - 1.0).abs());
    let (ba, bb) = (boundary(pred), boundary(truth));
    let s = pred.spacing().as_array();
    let (abd_mm, hd95_mm) = if ba.is_empty() || bb.is_empty() {
        (None, None)
    } else {
        let ab = directed(&ba, &bb, s);
        let ba_ = directed(&bb, &ba, s);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let abd = 0.5 * (mean(&ab) + mean(&ba_));
        (Some(abd), Some(percentile95(ab).max(percentile95(ba_))))
    };
    Reference {
        dsc,
        arvd_pct,
        abd_mm,
        hd95_mm,
    }
}

/// A random mask pair on a random grid of at most `max` voxels per axis:
/// a few boxes plus salt noise, occasionally empty.
pub fn random_pair(rng: &mut impl Rng, max: usize) -> (BinaryMask, BinaryMask) {
    let d = Dims::new(rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max));
    let choices = [0.5, 0.8, 1.0, 1.25, 2.0, 3.3];
    let pick = |r: &mut dyn rand::RngCore| choices[r.gen_range(0..choices.len())];
    let spacing = Spacing::new(pick(rng), pick(rng), pick(rng)).unwrap();
    let make = |rng: &mut dyn rand::RngCore| {
        let mut bits = vec![false; d.len()];
        if rng.gen_bool(0.05) {
            return BinaryMask::from_bools(d, spacing, &bits).unwrap();
        }
        for _ in 0..rng.gen_range(1..=3) {
            let lo: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..d.as_array()[a]));
            let hi: [usize; 3] = std::array::from_fn(|a| rng.gen_range(lo[a]..d.as_array()[a]) + 1);
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        bits[d.index(x, y, z)] = true;
                    }
                }
            }
        }
        let salt = rng.gen_range(0.0..0.1);
        for b in bits.iter_mut() {
            if rng.gen_bool(salt) {
                *b = !*b;
            }
        }
        BinaryMask::from_bools(d, spacing, &bits).unwrap()
    };
    (make(rng), make(rng))
}

/// Number of fields in which `evaluate` and the oracle differ bitwise.
pub fn mismatches(pred: &BinaryMask, truth: &BinaryMask) -> Vec<String> {
    let got = volseg::metrics::evaluate(pred, truth).unwrap();
    let want = reference(pred, truth);
    let mut bad = Vec::new();
    if got.dsc != want.dsc {
        bad.push(format!("dsc {} vs {}", got.dsc, want.dsc));
    }
    if got.arvd_pct != want.arvd_pct {
        bad.push(format!("arvd {:?} vs {:?}", got.arvd_pct, want.arvd_pct));
    }
    if got.abd_mm != want.abd_mm {
        bad.push(format!("abd {:?} vs {:?}", got.abd_mm, want.abd_mm));
    }
    if got.hd95_mm != want.hd95_mm {
        bad.push(format!("hd95 {:?} vs {:?}", got.hd95_mm, want.hd95_mm));
    }
    bad
}

/// A 4x4x4 cube at the origin corner plus one shifted by one voxel along x,
/// on a 10^3 unit grid.
pub fn shifted_cubes() -> (BinaryMask, BinaryMask) {
    let d = Dims::cube(10);
    let cube = |x0: usize| {
        let bits: Vec<bool> = (0..d.len())
            .map(|i| {
                let (x, y, z) = d.coords(i);
                (x0..x0 + 4).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z)
            })
            .collect();
        BinaryMask::from_bools(d, Spacing::UNIT, &bits).unwrap()
    };
    (cube(2), cube(3))
}
