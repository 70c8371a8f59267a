//! Elastic deformation: Gaussian displacements on a coarse control grid,
//! interpolated trilinearly to a dense field shared by image and mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::TrainError;
use crate::volgrid::{BinaryMask, Dims, Volume};

/// Grid extent at which `std_at_96` is expressed in voxels.
pub const REFERENCE_EXTENT: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeformSpec {
    /// Distance between control points, in voxels.
    pub control_spacing: usize,
    /// Displacement standard deviation for a 96-voxel grid; scaled by the
    /// largest grid extent over 96.
    pub std_at_96: f64,
}

impl Default for DeformSpec {
    fn default() -> Self {
        Self {
            control_spacing: 8,
            std_at_96: 15.0,
        }
    }
}

impl DeformSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.control_spacing < 2 || !(self.std_at_96 >= 0.0 && self.std_at_96.is_finite()) {
            return Err(TrainError::Config(format!(
                "deformation needs control spacing >= 2 and a finite non-negative std, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Displacement std in voxels for a grid of the given dims.
    pub fn std_voxels(&self, dims: Dims) -> f64 {
        let extent = dims.as_array().into_iter().max().unwrap_or(0) as f64;
        self.std_at_96 * extent / REFERENCE_EXTENT
    }
}

/// Per-voxel displacement, one component vector per axis (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dims: Dims,
    pub components: [Vec<f64>; 3],
}

impl DisplacementField {
    /// Mean Euclidean displacement length.
    pub fn mean_magnitude(&self) -> f64 {
        let [u, v, w] = &self.components;
        let n = self.dims.len().max(1) as f64;
        (0..self.dims.len())
            .map(|i| (u[i] * u[i] + v[i] * v[i] + w[i] * w[i]).sqrt())
            .sum::<f64>()
            / n
    }
}

/// Linear interpolation weights of `t` over a 1-D lattice of `n` points.
fn lattice(t: f64, n: usize) -> (usize, usize, f64) {
    let t = t.clamp(0.0, (n - 1) as f64);
    let i0 = t.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, t - i0 as f64)
}

fn trilinear(data: &[f64], d: Dims, p: [f64; 3]) -> f64 {
    let (x0, x1, fx) = lattice(p[0], d.nx);
    let (y0, y1, fy) = lattice(p[1], d.ny);
    let (z0, z1, fz) = lattice(p[2], d.nz);
    let at = |x, y, z| data[d.index(x, y, z)];
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

pub fn displacement_field(dims: Dims, spec: &DeformSpec, seed: u64) -> Result<DisplacementField, TrainError> {
    spec.validate()?;
    let s = spec.control_spacing;
    // Control points at 0, s, 2s, ... reaching at least the last voxel.
    let ctrl = Dims::new(
        (dims.nx - 1).div_ceil(s) + 1,
        (dims.ny - 1).div_ceil(s) + 1,
        (dims.nz - 1).div_ceil(s) + 1,
    );
    let std = spec.std_voxels(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse: [Vec<f64>; 3] = std::array::from_fn(|_| {
        (0..ctrl.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect()
    });
    let sf = s as f64;
    let components = std::array::from_fn(|a| {
        (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                trilinear(&coarse[a], ctrl, [x as f64 / sf, y as f64 / sf, z as f64 / sf])
            })
            .collect()
    });
    Ok(DisplacementField { dims, components })
}

/// Image sampled trilinearly, mask by nearest neighbour; samples outside
/// the grid clamp to the edge.
pub fn apply_field(image: &Volume, mask: &BinaryMask, field: &DisplacementField) -> Result<(Volume, BinaryMask), TrainError> {
    let d = image.dims();
    if mask.dims() != d || field.dims != d {
        return Err(TrainError::Config(format!(
            "deformation inputs disagree on dims: image {d}, mask {}, field {}",
            mask.dims(),
            field.dims
        )));
    }
    let src = image.to_f64();
    let m = mask.volume().data();
    let [u, v, w] = &field.components;
    let mut img = Vec::with_capacity(d.len());
    let mut bits = Vec::with_capacity(d.len());
    let clampi = |t: f64, n: usize| t.round().clamp(0.0, (n - 1) as f64) as usize;
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let p = [x as f64 + u[i], y as f64 + v[i], z as f64 + w[i]];
        img.push(trilinear(&src, d, p) as f32);
        let j = d.index(clampi(p[0], d.nx), clampi(p[1], d.ny), clampi(p[2], d.nz));
        bits.push(m[j] >= 0.5);
    }
    let out = Volume::new(d, image.spacing(), img).expect("length matches dims");
    let mask = BinaryMask::from_bools(d, mask.spacing(), &bits).expect("length matches dims");
    Ok((out, mask))
}

pub fn deform_augment(
    image: &Volume,
    mask: &BinaryMask,
    spec: &DeformSpec,
    seed: u64,
) -> Result<(Volume, BinaryMask), TrainError> {
    let field = displacement_field(image.dims(), spec, seed)?;
    apply_field(image, mask, &field)
}
