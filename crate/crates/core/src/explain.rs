//! Relevance heatmaps: layer-wise relevance propagation with the epsilon
//! rule, gradient sensitivity maps, and a few heatmap reductions.
//!
//! Relevance starts at the pre-sigmoid logit. Dense and conv layers
//! redistribute with `R_i = x_i * sum_j w_ij * R_j / (z_j + eps * sign(z_j))`
//! where `z_j` is the layer's full pre-activation (bias included), so bias
//! relevance is absorbed. Max pooling is winner-takes-all; ELU, flatten and
//! (inert) dropout pass relevance through unchanged.

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mode, Network, Real, Tensor};
use crate::rng;
use crate::volume::{Dims, Mask, Volume};

/// Signed per-voxel relevance; positive values support the patient class.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    dims: Dims,
    data: Vec<f32>,
}

impl Heatmap {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let v = Volume::new(dims, data)?;
        Ok(Heatmap::from(v))
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, self.data.clone()).expect("heatmaps are finite")
    }

    pub fn negated(&self) -> Heatmap {
        Heatmap {
            dims: self.dims,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }
}

impl From<Volume> for Heatmap {
    fn from(v: Volume) -> Self {
        Heatmap {
            dims: v.dims(),
            data: v.into_data(),
        }
    }
}

fn to_heatmap<T: Real>(dims: Dims, values: &[T]) -> Result<Heatmap> {
    let data: Vec<f32> = values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
    Heatmap::new(dims, data).map_err(|e| match e {
        Error::NonFinite { index } => Error::Invalid(format!("non-finite relevance at voxel {index}")),
        other => other,
    })
}

/// Relevance at every layer boundary: entry `i` is the relevance of the
/// input to layer `i` (entry 0 is the input volume). Entries above the
/// logit are empty.
pub fn relevance_layers<T: Real>(net: &Network<T>, input: Tensor<T>, epsilon: f64) -> Result<Vec<Vec<T>>> {
    let trace = net.forward_tensor(input, Mode::Eval, &mut rng::seeded(0))?;
    let top = trace.logit_index();
    let eps = T::lit(epsilon);
    let mut layers = vec![Vec::new(); net.layers().len() + 1];
    layers[top] = vec![trace.logit()];
    for i in (0..top).rev() {
        let r = &layers[i + 1];
        let x = &trace.acts[i];
        let z = &trace.acts[i + 1].data;
        let stabilized = || -> Vec<T> {
            r.iter()
                .zip(z)
                .map(|(&rj, &zj)| {
                    let denom = if zj >= T::zero() { zj + eps } else { zj - eps };
                    if denom == T::zero() {
                        T::zero()
                    } else {
                        rj / denom
                    }
                })
                .collect()
        };
        let below: Vec<T> = match *net.layers().get(i).unwrap() {
            LayerSpec::Conv3d { out_channels, kernel, padding, .. } => {
                let s = stabilized();
                let geom = crate::nn::conv_geom(x.shape, out_channels, kernel, padding)?;
                let c = geom.backward_input(&s, &net.params()[i].weights);
                x.data.iter().zip(&c).map(|(&xi, &ci)| xi * ci).collect()
            }
            LayerSpec::Dense { in_features, out_features } => {
                let s = stabilized();
                let w = &net.params()[i].weights;
                (0..in_features)
                    .map(|k| {
                        let mut c = T::zero();
                        for o in 0..out_features {
                            c += w[o * in_features + k] * s[o];
                        }
                        x.data[k] * c
                    })
                    .collect()
            }
            LayerSpec::MaxPool3d { .. } => {
                let idx = trace.pool_argmax(i).expect("pool trace");
                let mut d = vec![T::zero(); x.data.len()];
                for (&rj, &j) in r.iter().zip(idx) {
                    d[j as usize] += rj;
                }
                d
            }
            LayerSpec::Elu { .. } | LayerSpec::Flatten | LayerSpec::Dropout { .. } | LayerSpec::SigmoidOutput => {
                r.clone()
            }
        };
        if let Some(k) = below.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite relevance at layer {i}, unit {k}")));
        }
        layers[i] = below;
    }
    Ok(layers)
}

/// Epsilon-rule LRP heatmap of `input` (the usual operating point is
/// `epsilon = 0.001`).
pub fn lrp<T: Real>(net: &Network<T>, input: &Volume, epsilon: f64) -> Result<Heatmap> {
    if input.dims() != net.input_dims() {
        return Err(Error::Shape(format!(
            "input dims {:?}, network expects {:?}",
            input.dims(),
            net.input_dims()
        )));
    }
    let mut layers = relevance_layers(net, Tensor::from_volume(input), epsilon)?;
    to_heatmap(input.dims(), &layers.swap_remove(0))
}

/// `|d logit / d x_i|` for every voxel.
pub fn sensitivity<T: Real>(net: &Network<T>, input: &Volume) -> Result<Heatmap> {
    let trace = net.forward_eval(input)?;
    let g = net.backprop(&trace, T::one(), true)?.input.expect("input gradient");
    let abs: Vec<T> = g.data.iter().map(|v| v.abs()).collect();
    to_heatmap(input.dims(), &abs)
}

pub fn relevance_sum(h: &Heatmap) -> f64 {
    h.data.iter().map(|&v| v as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareMode {
    /// Positive relevance inside the mask over positive relevance overall.
    #[default]
    Positive,
    /// Absolute relevance inside the mask over absolute relevance overall.
    Absolute,
}

/// Fraction of relevance that falls inside `mask`; 0 when the mask is empty
/// or there is no relevance of the counted kind.
pub fn relevance_share_in_mask(h: &Heatmap, mask: &Mask, mode: ShareMode) -> Result<f64> {
    if h.dims != mask.dims() {
        return Err(Error::Shape(format!("heatmap {:?} vs mask {:?}", h.dims, mask.dims())));
    }
    let weight = |v: f32| match mode {
        ShareMode::Positive => (v as f64).max(0.0),
        ShareMode::Absolute => (v as f64).abs(),
    };
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, &v) in h.data.iter().enumerate() {
        let w = weight(v);
        total += w;
        if mask.contains(i) {
            inside += w;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Voxel-wise mean of equally sized heatmaps.
pub fn average_heatmap(hs: &[Heatmap]) -> Result<Heatmap> {
    let first = hs.first().ok_or_else(|| Error::Invalid("no heatmaps to average".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for h in hs {
        if h.dims != first.dims {
            return Err(Error::Shape(format!("heatmap {:?} vs {:?}", h.dims, first.dims)));
        }
        for (a, &v) in acc.iter_mut().zip(&h.data) {
            *a += v as f64;
        }
    }
    let n = hs.len() as f64;
    Heatmap::new(first.dims, acc.into_iter().map(|a| (a / n) as f32).collect())
}
