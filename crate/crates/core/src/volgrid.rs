//! Dense 3D grids with physical spacing, plus the VVF and MetaImage readers.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dimensions must be positive, got {0}")]
    InvalidDims(Dims),
    #[error("spacing must be strictly positive and finite, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("data length {found} does not match dims {dims} ({expected} voxels)")]
    DataLength { dims: Dims, expected: usize, found: usize },
    #[error("dims mismatch: {left} vs {right}")]
    DimsMismatch { left: Dims, right: Dims },
    #[error("voxel {index} = {value} is not binary")]
    NotBinary { index: usize, value: f32 },
    #[error("voxel {index} = {value} is outside [0, 1]")]
    NotProbability { index: usize, value: f32 },
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("unknown dtype token {0:?}")]
    UnknownDtype(String),
    #[error("payload holds {found} bytes, header requires {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("voxel {index} = {value} cannot be stored as u8")]
    NonIntegralVoxel { index: usize, value: f32 },
    #[error("unsupported MetaImage value for {key}: {value}")]
    Unsupported { key: String, value: String },
    #[error("missing MetaImage key {0}")]
    MissingKey(&'static str),
    #[error("compressed MetaImage payloads are not supported")]
    Compressed,
    #[error("raw data file {0} not found")]
    MissingRawFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Millimetres per voxel along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { sx: 1.0, sy: 1.0, sz: 1.0 };

    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = [sx, sy, sz];
        if s.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self { sx, sy, sz })
        } else {
            Err(VolumeError::InvalidSpacing(s))
        }
    }

    pub const fn as_array(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::UNIT
    }
}

/// On-disk voxel encoding for VVF files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn token(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f32" => Ok(Dtype::F32),
            other => Err(VolumeError::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
            return Err(VolumeError::InvalidDims(dims));
        }
        // Re-validate so hand-built `Spacing` literals cannot slip through.
        let spacing = Spacing::new(spacing.sx, spacing.sy, spacing.sz)?;
        if data.len() != dims.len() {
            return Err(VolumeError::DataLength {
                dims,
                expected: dims.len(),
                found: data.len(),
            });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.len()])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    /// Data widened to f64, the precision used for every reduction.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn check_same(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(VolumeError::DimsMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Volume, f: impl Fn(f32, f32) -> f32) -> Result<Volume> {
        self.check_same(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        })
    }

    pub fn add(&self, other: &Volume) -> Result<Volume> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Volume) -> Result<Volume> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Volume) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }
}

/// A volume whose voxels are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Volume);

impl BinaryMask {
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some((index, &value)) = volume
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(VolumeError::NotBinary { index, value });
        }
        Ok(Self(volume))
    }

    pub fn from_bools(dims: Dims, spacing: Spacing, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(Volume::new(dims, spacing, data)?))
    }

    /// Binarize with `v >= threshold` as foreground.
    pub fn threshold(volume: &Volume, threshold: f32) -> Self {
        let data = volume
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        Self(Volume {
            dims: volume.dims,
            spacing: volume.spacing,
            data,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.0.spacing
    }

    #[inline]
    pub fn is_set(&self, i: usize) -> bool {
        self.0.data[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn with_spacing(self, spacing: Spacing) -> Self {
        Self(self.0.with_spacing(spacing))
    }
}

/// A volume whose voxels lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Volume);

impl ProbabilityMap {
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some((index, &value)) = volume
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v))
        {
            return Err(VolumeError::NotProbability { index, value });
        }
        Ok(Self(volume))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }
}

impl From<BinaryMask> for ProbabilityMap {
    fn from(mask: BinaryMask) -> Self {
        ProbabilityMap(mask.0)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize to the VVF byte layout.
pub fn encode_vvf(v: &Volume, dtype: Dtype) -> Result<Vec<u8>> {
    let d = v.dims;
    let s = v.spacing;
    let mut out = format!(
        "VVF1\ndims {} {} {}\nspacing {} {} {}\ndtype {}\n\n",
        d.nx,
        d.ny,
        d.nz,
        s.sx,
        s.sy,
        s.sz,
        dtype.token()
    )
    .into_bytes();
    out.reserve(d.len() * dtype.width());
    match dtype {
        Dtype::U8 => {
            for (index, &value) in v.data.iter().enumerate() {
                if !(0.0..=255.0).contains(&value) || value.fract() != 0.0 {
                    return Err(VolumeError::NonIntegralVoxel { index, value });
                }
                out.push(value as u8);
            }
        }
        Dtype::F32 => {
            for &value in &v.data {
                out.extend_from_slice(&value.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_vvf(v: &Volume, dtype: Dtype, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_vvf(v, dtype)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize, line: usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::MalformedHeader {
            line,
            reason: "unterminated header line".into(),
        })?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| VolumeError::MalformedHeader {
        line,
        reason: "header is not ASCII".into(),
    })
}

fn parse_triple<T: std::str::FromStr>(text: &str, key: &str, line: usize) -> Result<[T; 3]> {
    let bad = |reason: String| VolumeError::MalformedHeader { line, reason };
    let mut parts = text.split(' ');
    if parts.next() != Some(key) {
        return Err(bad(format!("expected `{key} <a> <b> <c>`, got {text:?}")));
    }
    let vals: Vec<T> = parts
        .map(|p| p.parse::<T>().map_err(|_| bad(format!("bad number {p:?}"))))
        .collect::<Result<_>>()?;
    match <[T; 3]>::try_from(vals) {
        Ok(arr) => Ok(arr),
        Err(v) => Err(bad(format!("expected 3 values after {key}, got {}", v.len()))),
    }
}

/// Parse VVF bytes.
pub fn decode_vvf(bytes: &[u8]) -> Result<Volume> {
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos, 1)?;
    if magic != "VVF1" {
        return Err(VolumeError::MalformedHeader {
            line: 1,
            reason: format!("expected magic VVF1, got {magic:?}"),
        });
    }
    let [nx, ny, nz] = parse_triple::<usize>(next_line(bytes, &mut pos, 2)?, "dims", 2)?;
    let [sx, sy, sz] = parse_triple::<f64>(next_line(bytes, &mut pos, 3)?, "spacing", 3)?;
    let dtype_line = next_line(bytes, &mut pos, 4)?;
    let dtype: Dtype = match dtype_line.strip_prefix("dtype ") {
        Some(tok) => tok.parse()?,
        None => {
            return Err(VolumeError::MalformedHeader {
                line: 4,
                reason: format!("expected `dtype <u8|f32>`, got {dtype_line:?}"),
            })
        }
    };
    if !next_line(bytes, &mut pos, 5)?.is_empty() {
        return Err(VolumeError::MalformedHeader {
            line: 5,
            reason: "expected empty separator line".into(),
        });
    }
    let dims = Dims::new(nx, ny, nz);
    let spacing = Spacing::new(sx, sy, sz)?;
    let payload = &bytes[pos..];
    let expected = dims.len() * dtype.width();
    if payload.len() != expected {
        return Err(VolumeError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Volume::new(dims, spacing, data)
}

pub fn read_vvf(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_vvf(&bytes)
}

/// Read the MetaImage subset: 3D, uncompressed, little-endian,
/// `MET_UCHAR` or `MET_FLOAT`, detached raw payload.
pub fn read_mhd_subset(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;

    let mut dims = None;
    let mut spacing = Spacing::UNIT;
    let mut element = None;
    let mut data_file = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(VolumeError::MalformedHeader {
                line: n + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let unsupported = || VolumeError::Unsupported {
            key: key.to_string(),
            value: value.to_string(),
        };
        let triple = |kind: &str| format!("{kind} {}", value.split_whitespace().collect::<Vec<_>>().join(" "));
        match key {
            "ObjectType" if value != "Image" => return Err(unsupported()),
            "NDims" if value != "3" => return Err(unsupported()),
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(VolumeError::Compressed)
            }
            "CompressedData" if !value.eq_ignore_ascii_case("false") => return Err(unsupported()),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" | "ByteOrderMSB"
                if value.eq_ignore_ascii_case("true") =>
            {
                return Err(unsupported())
            }
            "DimSize" => {
                let [nx, ny, nz] = parse_triple::<usize>(&triple("DimSize"), "DimSize", n + 1)?;
                dims = Some(Dims::new(nx, ny, nz));
            }
            "ElementSpacing" => {
                let [sx, sy, sz] =
                    parse_triple::<f64>(&triple("ElementSpacing"), "ElementSpacing", n + 1)?;
                spacing = Spacing::new(sx, sy, sz)?;
            }
            "ElementType" => {
                element = Some(match value {
                    "MET_UCHAR" => Dtype::U8,
                    "MET_FLOAT" => Dtype::F32,
                    _ => return Err(unsupported()),
                })
            }
            "ElementDataFile" => data_file = Some(value.to_string()),
            _ => {}
        }
    }
    let dims = dims.ok_or(VolumeError::MissingKey("DimSize"))?;
    let dtype = element.ok_or(VolumeError::MissingKey("ElementType"))?;
    let data_file = data_file.ok_or(VolumeError::MissingKey("ElementDataFile"))?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(VolumeError::Unsupported {
            key: "ElementDataFile".into(),
            value: data_file,
        });
    }
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(&data_file);
    if !raw_path.is_file() {
        return Err(VolumeError::MissingRawFile(raw_path));
    }
    let payload = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let expected = dims.len() * dtype.width();
    if payload.len() != expected {
        return Err(VolumeError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let data = match dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Volume::new(dims, spacing, data)
}
