//! The 3D CNN: layer specifications, forward/backward passes, Adam,
//! training with early stopping and the VNET checkpoint format.

mod adam;
mod kernels;
mod network;
mod tensor;
mod train;
mod vnet;

pub use adam::{Adam, AdamState};
pub use network::{loss, sigmoid, Gradients, Mode, Network, Params, Trace};
pub use tensor::{Real, Shape, Tensor};
pub use train::{
    evaluate_split, fine_tune, train, train_trials, EarlyStopping, EpochRecord,
    Sample, StopDecision, TrainConfig, TrainHistory,
};
pub use vnet::{load_model, model_bytes, save_model, Checkpoint, HistorySummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        padding: Padding,
    },
    Elu {
        alpha: f64,
    },
    /// Non-overlapping max pooling (stride equals the window).
    MaxPool3d {
        window: [usize; 3],
    },
    /// Inverted dropout: active only in [`Mode::Train`].
    Dropout {
        rate: f64,
    },
    Flatten,
    /// Fully connected layer over the flattened input.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Marks the scalar logit; the probability is its sigmoid.
    SigmoidOutput,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel: [3, 3, 3],
            padding: Padding::Same,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel.iter().product::<usize>(),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => out_features * in_features,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv3d { out_channels, .. } => out_channels,
            LayerSpec::Dense { out_features, .. } => out_features,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn has_params(&self) -> bool {
        self.param_count() > 0
    }

    /// Glorot fan-in and fan-out.
    pub(crate) fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let k: usize = kernel.iter().product();
                (in_channels * k, out_channels * k)
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (in_features, out_features),
            _ => (0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel.contains(&0) {
                    return bad(format!("degenerate conv layer {self:?}"));
                }
            }
            LayerSpec::Elu { alpha } if !(alpha.is_finite() && alpha >= 0.0) => {
                return bad(format!("ELU alpha {alpha} must be finite and >= 0"));
            }
            LayerSpec::MaxPool3d { window } if window.contains(&0) => {
                return bad(format!("pool window {window:?} must be positive"));
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return bad(format!("dropout rate {rate} outside [0, 1)"));
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => {
                return bad(format!("degenerate dense layer {self:?}"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                if input.channels != in_channels {
                    return Err(Error::Shape(format!(
                        "conv expects {in_channels} channels, got {}",
                        input.channels
                    )));
                }
                Ok(Shape::new(
                    out_channels,
                    kernels::ConvGeom::new(input, out_channels, kernel, padding)?.out_dims,
                ))
            }
            LayerSpec::MaxPool3d { window } => {
                let mut dims = [0; 3];
                for a in 0..3 {
                    dims[a] = input.dims[a] / window[a];
                    if dims[a] == 0 {
                        return Err(Error::Shape(format!(
                            "pool window {window:?} larger than input {:?}",
                            input.dims
                        )));
                    }
                }
                Ok(Shape::new(input.channels, dims))
            }
            LayerSpec::Elu { .. } | LayerSpec::Dropout { .. } => Ok(input),
            LayerSpec::Flatten => Ok(Shape::features(input.len())),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input.len() != in_features {
                    return Err(Error::Shape(format!(
                        "dense expects {in_features} features, got {}",
                        input.len()
                    )));
                }
                Ok(Shape::features(out_features))
            }
            LayerSpec::SigmoidOutput => {
                if input.len() != 1 {
                    return Err(Error::Shape(format!(
                        "sigmoid output needs a single logit, got {} values",
                        input.len()
                    )));
                }
                Ok(input)
            }
        }
    }
}

/// The convolutional classifier family: `n` blocks of
/// conv(3x3x3) -> ELU -> [max-pool(2) -> dropout], then a single dense unit
/// with sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_dims: Dims,
    pub conv_channels: Vec<usize>,
    /// One flag per conv block: pool (and dropout) after its ELU.
    pub pool_after: Vec<bool>,
    pub kernel: [usize; 3],
    pub padding: Padding,
    pub elu_alpha: f64,
    pub dropout_rate: f64,
    /// L2 coefficient per conv layer, applied to its weights only.
    pub conv_l2: Vec<f64>,
}

impl Default for ArchConfig {
    /// Desk-scale network for 32x38x32 phantoms: the four-block layout
    /// with 8 filters per block.
    fn default() -> Self {
        ArchConfig {
            input_dims: [32, 38, 32],
            conv_channels: vec![8; 4],
            ..ArchConfig::paper([96, 114, 96])
        }
    }
}

impl ArchConfig {
    /// Four conv layers of 64 filters, pooling after every ELU, dropout 0.3
    /// and L2 = 0.01 on the third and fourth conv layers.
    pub fn paper(input_dims: Dims) -> Self {
        ArchConfig {
            input_dims,
            conv_channels: vec![64; 4],
            pool_after: vec![true; 4],
            kernel: [3, 3, 3],
            padding: Padding::Same,
            elu_alpha: 1.0,
            dropout_rate: 0.3,
            conv_l2: vec![0.0, 0.0, 0.01, 0.01],
        }
    }

    /// Expands the config into a layer list plus per-layer L2 coefficients.
    pub fn layers(&self) -> Result<(Vec<LayerSpec>, Vec<f64>)> {
        let n = self.conv_channels.len();
        if n == 0 {
            return Err(Error::Invalid("at least one conv layer is required".into()));
        }
        if self.pool_after.len() != n || self.conv_l2.len() != n {
            return Err(Error::Invalid(format!(
                "{n} conv layers but {} pool flags and {} L2 coefficients",
                self.pool_after.len(),
                self.conv_l2.len()
            )));
        }
        let mut layers = Vec::new();
        let mut l2 = Vec::new();
        let mut channels = 1;
        let mut shape = Shape::new(1, self.input_dims);
        let mut push = |layer: LayerSpec, lambda: f64, shape: &mut Shape| -> Result<()> {
            *shape = layer.output_shape(*shape)?;
            layers.push(layer);
            l2.push(lambda);
            Ok(())
        };
        for i in 0..n {
            let conv = LayerSpec::Conv3d {
                in_channels: channels,
                out_channels: self.conv_channels[i],
                kernel: self.kernel,
                padding: self.padding,
            };
            push(conv, self.conv_l2[i], &mut shape)?;
            push(LayerSpec::Elu { alpha: self.elu_alpha }, 0.0, &mut shape)?;
            if self.pool_after[i] {
                push(LayerSpec::MaxPool3d { window: [2, 2, 2] }, 0.0, &mut shape)?;
                push(LayerSpec::Dropout { rate: self.dropout_rate }, 0.0, &mut shape)?;
            }
            channels = self.conv_channels[i];
        }
        push(LayerSpec::Flatten, 0.0, &mut shape)?;
        push(LayerSpec::dense(shape.len(), 1), 0.0, &mut shape)?;
        push(LayerSpec::SigmoidOutput, 0.0, &mut shape)?;
        Ok((layers, l2))
    }

    /// Parameters in the conv layers alone.
    pub fn conv_param_count(&self) -> Result<usize> {
        Ok(self
            .layers()?
            .0
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv3d { .. }))
            .map(LayerSpec::param_count)
            .sum())
    }

    /// Length of the flattened feature vector feeding the dense layer.
    pub fn flatten_dim(&self) -> Result<usize> {
        let (layers, _) = self.layers()?;
        layers
            .iter()
            .find_map(|l| match *l {
                LayerSpec::Dense { in_features, .. } => Some(in_features),
                _ => None,
            })
            .ok_or_else(|| Error::Invalid("architecture has no dense layer".into()))
    }
}

/// Convolution geometry for relevance and gradient routines outside `nn`.
pub(crate) fn conv_geom(input: Shape, out_channels: usize, kernel: [usize; 3], padding: Padding) -> Result<kernels::ConvGeom> {
    kernels::ConvGeom::new(input, out_channels, kernel, padding)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_parameter_counts() {
        assert_eq!(LayerSpec::conv(1, 64).param_count(), 1792);
        assert_eq!(LayerSpec::conv(64, 64).param_count(), 110_656);
        assert_eq!(LayerSpec::dense(1, 1).param_count(), 2);
        assert_eq!(LayerSpec::dense(128, 1).param_count(), 129);
    }

    #[test]
    fn four_conv_stack_has_333760_conv_parameters() {
        let arch = ArchConfig::paper([96, 114, 96]);
        assert_eq!(arch.conv_param_count().unwrap(), 64 * 28 + 3 * 64 * (64 * 27 + 1));
        assert_eq!(arch.conv_param_count().unwrap(), 333_760);
        // 96x114x96 -> 48x57x48 -> 24x28x24 -> 12x14x12 -> 6x7x6
        assert_eq!(arch.flatten_dim().unwrap(), 64 * 6 * 7 * 6);
    }

    #[test]
    fn three_pool_schedule_changes_only_the_dense_layer() {
        let arch = ArchConfig {
            pool_after: vec![true, true, false, true],
            ..ArchConfig::paper([96, 114, 96])
        };
        assert_eq!(arch.conv_param_count().unwrap(), 333_760);
        assert_eq!(arch.flatten_dim().unwrap(), 64 * 12 * 14 * 12);
    }

    #[test]
    fn validation_catches_bad_layers() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::conv(0, 3).validate().is_err());
        assert!(LayerSpec::MaxPool3d { window: [2, 0, 2] }.validate().is_err());
        assert!(LayerSpec::dense(4, 1)
            .output_shape(Shape::new(1, [2, 2, 2]))
            .is_err());
        let arch = ArchConfig {
            input_dims: [4, 4, 4],
            ..ArchConfig::default()
        };
        assert!(arch.layers().is_err(), "four pools cannot fit a 4^3 input");
    }

    #[test]
    fn layer_specs_serialize_with_type_tags() {
        let json = serde_json::to_string(&LayerSpec::Elu { alpha: 1.0 }).unwrap();
        assert_eq!(json, r#"{"type":"elu","alpha":1.0}"#);
        let back: LayerSpec = serde_json::from_str(r#"{"type":"flatten"}"#).unwrap();
        assert_eq!(back, LayerSpec::Flatten);
    }
}
