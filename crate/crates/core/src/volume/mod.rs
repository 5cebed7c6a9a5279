//! Volumes, masks and label volumes on a regular grid, stored x-fastest.
//!
//! The first (x) axis is the sagittal axis: flipping along it mirrors left
//! and right hemispheres.

mod vvol;

pub use vvol::{load_labels, load_mask, load_volume, save_labels, save_mask, save_volume, Dtype};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn coords(dims: Dims, index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let y = (index / dims[0]) % dims[1];
    let z = index / (dims[0] * dims[1]);
    [x, y, z]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Invalid(format!("dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Dense single-channel scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume, rejecting length mismatches and non-finite voxels.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} values for dims {:?} ({} voxels)",
                data.len(),
                dims,
                voxel_count(dims)
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(value.is_finite());
        Volume {
            dims,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Binary voxel mask; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} mask values for dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!(
                "mask value {} at voxel {index} is not 0 or 1",
                data[index]
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Mask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.data[index] != 0
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.data[index] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Voxels set in `self` but not in `other`.
    pub fn minus(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a != 0 && b == 0) as u8)
            .collect();
        Ok(Mask { dims: self.dims, data })
    }
}

/// Integer label volume (atlas / parcellation); 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u16>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} labels for dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }
}

/// Maps intensities affinely onto `[0, 1]`. A constant volume maps to zeros.
pub fn minmax_scale(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Volume::zeros(v.dims);
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64 - lo) / range) as f32).clamp(0.0, 1.0))
        .collect();
    Volume { dims: v.dims, data }
}

/// Per-axis sample positions and weights for resampling `n_in` onto `n_out`
/// cells with aligned cell centres.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling onto `target` dims. Output voxel centres are
/// aligned with input voxel centres, so halving an axis averages pairs.
pub fn downsample(v: &Volume, target: Dims) -> Result<Volume> {
    check_dims(target)?;
    if target == v.dims {
        return Ok(v.clone());
    }
    let [tx, ty, tz] = [
        axis_taps(v.dims[0], target[0]),
        axis_taps(v.dims[1], target[1]),
        axis_taps(v.dims[2], target[2]),
    ];
    let at = |x: usize, y: usize, z: usize| v.data[linear_index(v.dims, x, y, z)] as f64;
    let mut data = Vec::with_capacity(voxel_count(target));
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
                let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
                let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
                let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                data.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Ok(Volume { dims: target, data })
}

/// Mirrors the volume along the sagittal (x) axis.
pub fn flip_sagittal(v: &Volume) -> Volume {
    let nx = v.dims[0];
    let mut data = v.data.clone();
    for row in data.chunks_exact_mut(nx) {
        row.reverse();
    }
    Volume { dims: v.dims, data }
}

/// Shifts the volume by `offset` voxels along x, filling vacated voxels with 0.
pub fn translate_sagittal(v: &Volume, offset: i64) -> Result<Volume> {
    let nx = v.dims[0];
    if offset.unsigned_abs() as usize >= nx {
        return Err(Error::Invalid(format!(
            "translation {offset} out of range for {nx} sagittal voxels"
        )));
    }
    if offset == 0 {
        return Ok(v.clone());
    }
    let shift = offset.unsigned_abs() as usize;
    let mut data = vec![0.0f32; v.data.len()];
    for (src, dst) in v.data.chunks_exact(nx).zip(data.chunks_exact_mut(nx)) {
        if offset > 0 {
            dst[shift..].copy_from_slice(&src[..nx - shift]);
        } else {
            dst[..nx - shift].copy_from_slice(&src[shift..]);
        }
    }
    Ok(Volume { dims: v.dims, data })
}
