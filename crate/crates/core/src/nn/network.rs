use rand::Rng;

use super::kernels::ConvGeom;
use super::tensor::{dot, Real, Shape, Tensor};
use super::{ArchConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights and biases of one layer (both empty for parameter-free layers).
/// Conv weights are `[out][in][kz][ky][kx]`, dense weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Params<T> {
    fn zeros_for(layer: &LayerSpec) -> Self {
        Params {
            weights: vec![T::zero(); layer.weight_len()],
            bias: vec![T::zero(); layer.bias_len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sequential network over single-channel volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_dims: Dims,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    params: Vec<Params<T>>,
    l2: Vec<f64>,
}

/// Everything a forward pass records for backpropagation and LRP.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    logit_at: usize,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    /// Input index of each pooled output's maximum.
    Argmax(Vec<u32>),
    /// Per-element dropout multiplier (0 or 1/(1-rate)).
    DropMask(Vec<T>),
}

impl<T: Real> Trace<T> {
    /// Pre-sigmoid score.
    pub fn logit(&self) -> T {
        self.acts[self.logit_at].data[0]
    }

    pub fn probability(&self) -> T {
        sigmoid(self.logit())
    }

    /// Argmax indices recorded by the pooling layer at `layer`, if any.
    pub fn pool_argmax(&self, layer: usize) -> Option<&[u32]> {
        match &self.aux[layer] {
            Aux::Argmax(a) => Some(a),
            _ => None,
        }
    }

    pub(crate) fn logit_index(&self) -> usize {
        self.logit_at
    }
}

/// Per-layer parameter gradients, plus the input gradient when requested.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Params<T>>,
    pub input: Option<Tensor<T>>,
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy on `sigmoid(logit)` plus `sum_l lambda_l * ||W_l||^2`.
pub fn loss<T: Real>(logit: T, label: u8, net: &Network<T>) -> T {
    let bce = if label == 1 {
        softplus(-logit)
    } else {
        softplus(logit)
    };
    bce + net.l2_penalty()
}

fn elu<T: Real>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * x.exp_m1()
    }
}

impl<T: Real> Network<T> {
    /// Builds a network with Glorot-uniform weights drawn from `seed` and
    /// zero biases.
    pub fn new(input_dims: Dims, layers: Vec<LayerSpec>, l2: Vec<f64>, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(input_dims, layers, l2)?;
        let mut rng = rng::seeded(seed);
        for (layer, p) in net.layers.iter().zip(net.params.iter_mut()) {
            if !layer.has_params() {
                continue;
            }
            let (fan_in, fan_out) = layer.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in p.weights.iter_mut() {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    pub fn from_arch(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let (layers, l2) = arch.layers()?;
        Self::new(arch.input_dims, layers, l2, seed)
    }

    /// Network with every parameter set to zero; shapes are fully checked.
    pub fn zeroed(input_dims: Dims, layers: Vec<LayerSpec>, l2: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network has no layers".into()));
        }
        if l2.len() != layers.len() {
            return Err(Error::Invalid(format!(
                "{} L2 coefficients for {} layers",
                l2.len(),
                layers.len()
            )));
        }
        if let Some(i) = l2.iter().position(|&l| !(l.is_finite() && l >= 0.0)) {
            return Err(Error::Invalid(format!("bad L2 coefficient at layer {i}")));
        }
        let mut shapes = vec![Shape::new(1, input_dims)];
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::SigmoidOutput) && i + 1 != layers.len() {
                return Err(Error::Invalid("sigmoid output must be the last layer".into()));
            }
            let out = layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(out);
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::Shape(format!(
                "network must end in a single logit, got {:?}",
                shapes.last().unwrap()
            )));
        }
        let params = layers.iter().map(Params::zeros_for).collect();
        Ok(Network {
            input_dims,
            layers,
            shapes,
            params,
            l2,
        })
    }

    /// Replaces all parameters; shapes must match the layer specs.
    pub fn with_params(mut self, params: Vec<Params<T>>) -> Result<Self> {
        if params.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, p)) in self.layers.iter().zip(&params).enumerate() {
            if p.weights.len() != layer.weight_len() || p.bias.len() != layer.bias_len() {
                return Err(Error::Shape(format!("parameter block {i} does not match {layer:?}")));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        Network {
            input_dims: self.input_dims,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Params {
                    weights: conv(&p.weights),
                    bias: conv(&p.bias),
                })
                .collect(),
            l2: self.l2.clone(),
        }
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Params<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Params<T>] {
        &mut self.params
    }

    pub fn l2(&self) -> &[f64] {
        &self.l2
    }

    /// Trainable parameter count derived from the layer specs.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Number of parameter values actually allocated.
    pub fn allocated_params(&self) -> usize {
        self.params.iter().map(Params::len).sum()
    }

    pub fn l2_penalty(&self) -> T {
        let mut total = T::zero();
        for (p, &lambda) in self.params.iter().zip(&self.l2) {
            if lambda > 0.0 {
                total += T::lit(lambda) * p.weights.iter().map(|&w| w * w).sum::<T>();
            }
        }
        total
    }

    fn check_input(&self, dims: Dims) -> Result<()> {
        if dims != self.input_dims {
            return Err(Error::Shape(format!(
                "input dims {dims:?}, network expects {:?}",
                self.input_dims
            )));
        }
        Ok(())
    }

    pub fn forward<R: Rng + ?Sized>(&self, input: &Volume, mode: Mode, rng: &mut R) -> Result<Trace<T>> {
        self.check_input(input.dims())?;
        self.forward_tensor(Tensor::from_volume(input), mode, rng)
    }

    /// Deterministic inference pass (dropout inert).
    pub fn forward_eval(&self, input: &Volume) -> Result<Trace<T>> {
        self.check_input(input.dims())?;
        self.forward_tensor(Tensor::from_volume(input), Mode::Eval, &mut rng::seeded(0))
    }

    /// `(logit, probability)` in eval mode.
    pub fn predict(&self, input: &Volume) -> Result<(T, T)> {
        let t = self.forward_eval(input)?;
        Ok((t.logit(), t.probability()))
    }

    pub fn forward_tensor<R: Rng + ?Sized>(
        &self,
        input: Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Trace<T>> {
        if input.shape != self.shapes[0] || input.data.len() != input.shape.len() {
            return Err(Error::Shape(format!(
                "input tensor {:?}, network expects {:?}",
                input.shape, self.shapes[0]
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let out_shape = self.shapes[i + 1];
            let p = &self.params[i];
            let (data, a) = match *layer {
                LayerSpec::Conv3d {
                    out_channels,
                    kernel,
                    padding,
                    ..
                } => {
                    let g = ConvGeom::new(x.shape, out_channels, kernel, padding)?;
                    (g.forward(&x.data, &p.weights, &p.bias), Aux::None)
                }
                LayerSpec::Elu { alpha } => {
                    let alpha = T::lit(alpha);
                    (x.data.iter().map(|&v| elu(v, alpha)).collect(), Aux::None)
                }
                LayerSpec::MaxPool3d { window } => {
                    let (out, idx) = max_pool(x, out_shape, window);
                    (out, Aux::Argmax(idx))
                }
                LayerSpec::Dropout { rate } => {
                    if mode == Mode::Train && rate > 0.0 {
                        let keep = T::lit(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x.data.len())
                            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                            .collect();
                        let out = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (out, Aux::DropMask(mask))
                    } else {
                        (x.data.clone(), Aux::None)
                    }
                }
                LayerSpec::Flatten | LayerSpec::SigmoidOutput => (x.data.clone(), Aux::None),
                LayerSpec::Dense { in_features, out_features } => {
                    let out = (0..out_features)
                        .map(|o| {
                            p.bias[o] + dot(&p.weights[o * in_features..(o + 1) * in_features], &x.data)
                        })
                        .collect();
                    (out, Aux::None)
                }
            };
            acts.push(Tensor { shape: out_shape, data });
            aux.push(a);
        }
        let logit_at = match self.layers.last() {
            Some(LayerSpec::SigmoidOutput) => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        Ok(Trace { acts, aux, logit_at })
    }

    fn check_trace(&self, trace: &Trace<T>) -> Result<()> {
        let stale = trace.acts.len() != self.layers.len() + 1
            || trace.aux.len() != self.layers.len()
            || trace.acts.iter().zip(&self.shapes).any(|(a, s)| a.shape != *s);
        if stale {
            return Err(Error::Shape("activations do not belong to this network".into()));
        }
        Ok(())
    }

    /// Backpropagates `seed = d(objective)/d(logit)` through the network.
    /// Regularization is not included.
    pub fn backprop(&self, trace: &Trace<T>, seed: T, want_input: bool) -> Result<Gradients<T>> {
        self.check_trace(trace)?;
        let mut params: Vec<Params<T>> = self.layers.iter().map(Params::zeros_for).collect();
        let mut grad = vec![seed];
        for i in (0..trace.logit_at).rev() {
            let layer = &self.layers[i];
            let x = &trace.acts[i];
            let need_below = i > 0 || want_input;
            grad = match *layer {
                LayerSpec::Conv3d {
                    out_channels,
                    kernel,
                    padding,
                    ..
                } => {
                    let g = ConvGeom::new(x.shape, out_channels, kernel, padding)?;
                    let (d_in, d_w, d_b) = g.backward(&x.data, &grad, &self.params[i].weights, need_below);
                    params[i] = Params { weights: d_w, bias: d_b };
                    d_in.unwrap_or_default()
                }
                LayerSpec::Elu { alpha } => {
                    let alpha = T::lit(alpha);
                    let y = &trace.acts[i + 1].data;
                    grad.iter()
                        .zip(&x.data)
                        .zip(y)
                        .map(|((&g, &xv), &yv)| if xv > T::zero() { g } else { g * (yv + alpha) })
                        .collect()
                }
                LayerSpec::MaxPool3d { .. } => {
                    let idx = trace.pool_argmax(i).expect("pool trace");
                    let mut d = vec![T::zero(); x.data.len()];
                    for (&g, &j) in grad.iter().zip(idx) {
                        d[j as usize] += g;
                    }
                    d
                }
                LayerSpec::Dropout { .. } => match &trace.aux[i] {
                    Aux::DropMask(m) => grad.iter().zip(m).map(|(&g, &k)| g * k).collect(),
                    _ => grad,
                },
                LayerSpec::Flatten | LayerSpec::SigmoidOutput => grad,
                LayerSpec::Dense { in_features, out_features } => {
                    let w = &self.params[i].weights;
                    let mut d_w = vec![T::zero(); w.len()];
                    let mut d_in = vec![T::zero(); in_features];
                    for o in 0..out_features {
                        let g = grad[o];
                        let row = o * in_features;
                        for k in 0..in_features {
                            d_w[row + k] = g * x.data[k];
                            d_in[k] += g * w[row + k];
                        }
                    }
                    params[i] = Params { weights: d_w, bias: grad.clone() };
                    d_in
                }
            };
        }
        let input = want_input.then(|| Tensor {
            shape: self.shapes[0],
            data: grad,
        });
        Ok(Gradients { params, input })
    }

    /// Exact gradient of [`loss`] for `label`, including the L2 terms.
    pub fn backward(&self, trace: &Trace<T>, label: u8, want_input: bool) -> Result<Gradients<T>> {
        let seed = trace.probability() - T::lit(label as f64);
        let mut grads = self.backprop(trace, seed, want_input)?;
        self.add_l2_grad(&mut grads.params);
        Ok(grads)
    }

    /// Adds `2 * lambda * w` to each regularized layer's weight gradient.
    pub fn add_l2_grad(&self, grads: &mut [Params<T>]) {
        for ((g, p), &lambda) in grads.iter_mut().zip(&self.params).zip(&self.l2) {
            if lambda > 0.0 {
                let two_l = T::lit(2.0 * lambda);
                for (gw, &w) in g.weights.iter_mut().zip(&p.weights) {
                    *gw += two_l * w;
                }
            }
        }
    }
}

/// Non-overlapping max pooling. Ties go to the lowest linear input index.
fn max_pool<T: Real>(x: &Tensor<T>, out: Shape, window: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let [nx, ny, _] = x.shape.dims;
    let [ox, oy, oz] = out.dims;
    let [wx, wy, wz] = window;
    let spatial = x.shape.spatial();
    let mut values = Vec::with_capacity(out.len());
    let mut index = Vec::with_capacity(out.len());
    for c in 0..out.channels {
        let base = c * spatial;
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut best = base + xx * wx + nx * (y * wy + ny * z * wz);
                    for dz in 0..wz {
                        for dy in 0..wy {
                            let row = base + nx * ((y * wy + dy) + ny * (z * wz + dz));
                            for dx in 0..wx {
                                let j = row + xx * wx + dx;
                                if x.data[j] > x.data[best] {
                                    best = j;
                                }
                            }
                        }
                    }
                    values.push(x.data[best]);
                    index.push(best as u32);
                }
            }
        }
    }
    (values, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Volume {
        Volume::new([1, 1, 1], vec![v]).unwrap()
    }

    fn dense_1x1(w: f64, b: f64) -> Network<f64> {
        Network::zeroed([1, 1, 1], vec![LayerSpec::dense(1, 1), LayerSpec::SigmoidOutput], vec![0.0; 2])
            .unwrap()
            .with_params(vec![
                Params { weights: vec![w], bias: vec![b] },
                Params { weights: vec![], bias: vec![] },
            ])
            .unwrap()
    }

    #[test]
    fn dense_closed_form_forward_and_backward() {
        let net = dense_1x1(2.0, 0.0);
        assert_eq!(net.count_params(), 2);
        let t = net.forward_eval(&scalar(3.0)).unwrap();
        assert_eq!(t.logit(), 6.0);
        assert!((t.probability() - 0.997_527_376).abs() < 1e-8);
        let g = net.backward(&t, 1, true).unwrap();
        let dz = sigmoid(6.0) - 1.0;
        assert!((g.params[0].bias[0] - dz).abs() < 1e-15);
        assert!((g.params[0].weights[0] - 3.0 * dz).abs() < 1e-15);
        assert!((g.input.unwrap().data[0] - 2.0 * dz).abs() < 1e-15);
    }

    #[test]
    fn loss_values_and_stability() {
        let net = dense_1x1(1.0, 0.0);
        assert!((loss(0.0, 1, &net) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(0.0, 0, &net) - std::f64::consts::LN_2).abs() < 1e-15);
        let big = loss(100.0, 1, &net);
        assert!(big.is_finite() && big < 1e-40);
        assert!((loss(-1000.0, 1, &net) - 1000.0).abs() < 1e-9);
        assert!((loss(1000.0f32, 0, &net.cast::<f32>()) - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn elu_values() {
        let net = Network::<f64>::zeroed(
            [2, 1, 1],
            vec![LayerSpec::Elu { alpha: 1.0 }, LayerSpec::dense(2, 1)],
            vec![0.0; 2],
        )
        .unwrap();
        let t = net
            .forward_eval(&Volume::new([2, 1, 1], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        assert!((t.acts[1].data[0] - (-0.632_120_558_8)).abs() < 1e-9);
        assert_eq!(t.acts[1].data[1], 2.0);
    }

    #[test]
    fn l2_gradient_adds_two_lambda_w() {
        let layers = vec![LayerSpec::dense(1, 1)];
        let plain = Network::<f64>::new([1, 1, 1], layers.clone(), vec![0.0], 5).unwrap();
        let reg = Network::<f64>::new([1, 1, 1], layers, vec![0.01], 5).unwrap();
        let x = scalar(0.7);
        let g0 = plain.backward(&plain.forward_eval(&x).unwrap(), 1, false).unwrap();
        let g1 = reg.backward(&reg.forward_eval(&x).unwrap(), 1, false).unwrap();
        let w = reg.params()[0].weights[0];
        assert!((g1.params[0].weights[0] - g0.params[0].weights[0] - 0.02 * w).abs() < 1e-15);
        assert_eq!(g1.params[0].bias, g0.params[0].bias);
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = ArchConfig {
            input_dims: [16, 16, 16],
            ..ArchConfig::default()
        };
        let a = Network::<f32>::from_arch(&arch, 9).unwrap();
        let b = Network::<f32>::from_arch(&arch, 9).unwrap();
        let c = Network::<f32>::from_arch(&arch, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().all(|p| p.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(a.count_params(), a.allocated_params());
    }

    #[test]
    fn dropout_zero_matches_eval_and_train_mode_scales() {
        let layers = vec![LayerSpec::Dropout { rate: 0.0 }, LayerSpec::dense(8, 1)];
        let net = Network::<f64>::new([2, 2, 2], layers, vec![0.0; 2], 1).unwrap();
        let x = Volume::new([2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let mut rng = rng::seeded(0);
        let tr = net.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(tr.logit(), net.forward_eval(&x).unwrap().logit());
    }

    #[test]
    fn dropout_expectation_matches_eval_for_linear_net() {
        let layers = vec![LayerSpec::Dropout { rate: 0.3 }, LayerSpec::dense(27, 1)];
        let net = Network::<f64>::new([3, 3, 3], layers, vec![0.0; 2], 4).unwrap();
        let x = Volume::new([3, 3, 3], (0..27).map(|i| 1.0 + (i % 5) as f32).collect()).unwrap();
        let eval = net.forward_eval(&x).unwrap().logit();
        let mut rng = rng::seeded(2);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| net.forward(&x, Mode::Train, &mut rng).unwrap().logit())
            .sum::<f64>()
            / n as f64;
        assert!(((mean - eval) / eval).abs() < 0.02, "{mean} vs {eval}");
    }

    #[test]
    fn pooling_argmax_reproduces_values_and_breaks_ties_low() {
        let layers = vec![LayerSpec::MaxPool3d { window: [2, 2, 2] }, LayerSpec::Flatten, LayerSpec::dense(2, 1)];
        let net = Network::<f64>::new([4, 2, 2], layers, vec![0.0; 3], 0).unwrap();
        let mut data = vec![1.0f32; 16];
        data[6] = 5.0; // x=2,y=1,z=0 in the second window
        let x = Volume::new([4, 2, 2], data).unwrap();
        let t = net.forward_eval(&x).unwrap();
        let idx = t.pool_argmax(0).unwrap();
        assert_eq!(idx, &[0, 6]);
        for (v, &j) in t.acts[1].data.iter().zip(idx) {
            assert_eq!(*v, t.acts[0].data[j as usize]);
        }
        let g = net.backprop(&t, 1.0, true).unwrap().input.unwrap();
        let nonzero: Vec<usize> = g.data.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert!(nonzero.iter().all(|i| idx.contains(&(*i as u32))));
    }

    #[test]
    fn stale_trace_and_wrong_dims_are_rejected() {
        let a = Network::<f64>::new([2, 1, 1], vec![LayerSpec::dense(2, 1)], vec![0.0], 0).unwrap();
        let b = Network::<f64>::new([3, 1, 1], vec![LayerSpec::dense(3, 1)], vec![0.0], 0).unwrap();
        let t = b.forward_eval(&Volume::zeros([3, 1, 1])).unwrap();
        assert!(a.backward(&t, 1, false).is_err());
        assert!(a.forward_eval(&Volume::zeros([3, 1, 1])).is_err());
        assert!(Network::<f64>::zeroed([2, 1, 1], vec![LayerSpec::dense(3, 1)], vec![0.0]).is_err());
    }
}
