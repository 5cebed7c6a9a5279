use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::{coords, linear_index, Mask, Volume};

/// Neighborhood search for lesion filling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FillParams {
    pub initial_radius: usize,
    pub max_radius: usize,
    /// NAWM voxels required before a neighborhood is accepted.
    pub min_samples: usize,
    /// Add Gaussian noise with the neighborhood's NAWM standard deviation.
    pub noise: bool,
}

impl Default for FillParams {
    fn default() -> Self {
        FillParams {
            initial_radius: 2,
            max_radius: 8,
            min_samples: 10,
            noise: true,
        }
    }
}

impl FillParams {
    pub fn validate(&self) -> Result<()> {
        if self.initial_radius < 1 || self.initial_radius > self.max_radius {
            return Err(Error::Invalid(format!(
                "need 1 <= initial_radius ({}) <= max_radius ({})",
                self.initial_radius, self.max_radius
            )));
        }
        if self.min_samples < 1 {
            return Err(Error::Invalid("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// `(mean, std, count)` of the NAWM intensities in the cube of half-width
/// `r` around `center`.
fn cube_stats(v: &Volume, nawm: &Mask, center: [usize; 3], r: usize) -> (f64, f64, usize) {
    let dims = v.dims();
    let lo = |a: usize| center[a].saturating_sub(r);
    let hi = |a: usize| (center[a] + r).min(dims[a] - 1);
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let i = linear_index(dims, x, y, z);
                if nawm.contains(i) {
                    let val = v.data()[i] as f64;
                    sum += val;
                    sq += val * val;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt(), n)
}

/// Replaces every lesion voxel by the mean normal-appearing white matter
/// (white matter outside the lesions) intensity of the smallest cubic
/// neighborhood, growing from `initial_radius` to `max_radius`, that holds
/// at least `min_samples` such voxels. Lesions with no adequate
/// neighborhood use the global NAWM statistics. With `noise`, a seeded
/// Gaussian draw with the neighborhood's standard deviation is added.
pub fn fill_lesions(v: &Volume, lesions: &Mask, wm: &Mask, p: &FillParams, seed: u64) -> Result<Volume> {
    p.validate()?;
    if v.dims() != lesions.dims() || v.dims() != wm.dims() {
        return Err(Error::Shape(format!(
            "volume {:?}, lesion mask {:?}, white-matter mask {:?}",
            v.dims(),
            lesions.dims(),
            wm.dims()
        )));
    }
    if lesions.is_empty() {
        return Ok(v.clone());
    }
    let nawm = wm.minus(lesions)?;
    let global = {
        let vals: Vec<f64> = (0..v.len()).filter(|&i| nawm.contains(i)).map(|i| v.data()[i] as f64).collect();
        if vals.is_empty() {
            return Err(Error::Invalid("lesions present but no normal-appearing white matter".into()));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    };
    let mut rng = seeded(seed);
    let mut out = v.data().to_vec();
    for i in (0..v.len()).filter(|&i| lesions.contains(i)) {
        let center = coords(v.dims(), i);
        let (mean, std) = (p.initial_radius..=p.max_radius)
            .map(|r| cube_stats(v, &nawm, center, r))
            .find(|&(_, _, n)| n >= p.min_samples)
            .map(|(m, s, _)| (m, s))
            .unwrap_or(global);
        let mut value = mean;
        if p.noise && std > 0.0 {
            value += Normal::new(0.0, std).expect("finite std").sample(&mut rng);
        }
        out[i] = value as f32;
    }
    Volume::new(v.dims(), out)
}
