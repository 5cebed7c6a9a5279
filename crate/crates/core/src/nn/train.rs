use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamState};
use super::network::{sigmoid, Mode, Network, Params};
use super::tensor::Tensor;
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::eval::classification_metrics;
use crate::rng::{child_seed, seeded};
use crate::volume::{flip_sagittal, translate_sagittal, Volume};

use crate::preprocess::stratified_holdout;

/// A labeled training or evaluation volume (label 1 = patient).
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Random sagittal flips (p = 0.5) and shifts in {-2..=2} voxels.
    pub augment: bool,
    /// Fraction of the training subjects held out for validation.
    pub split_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 40,
            patience: 15,
            augment: true,
            split_fraction: 0.15,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Invalid("patience must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "validation fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Absent when the validation split holds a single class.
    pub val_balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.checked_sub(1).and_then(|i| self.epochs.get(i))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_balanced_accuracy\n");
        for e in &self.epochs {
            let bacc = e
                .val_balanced_accuracy
                .map(|b| format!("{b:.6}"))
                .unwrap_or_else(|| "NA".into());
            s.push_str(&format!("{},{:.8},{:.8},{}\n", e.epoch, e.train_loss, e.val_loss, bacc));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn check_samples(net: &Network, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if !samples.iter().any(|s| s.label == 1) || !samples.iter().any(|s| s.label == 0) {
        return Err(Error::Invalid("training set must contain both classes".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(Error::Invalid(format!("subject {} has label {}", s.id, s.label)));
    }
    if let Some(s) = samples.iter().find(|s| s.volume.dims() != net.input_dims()) {
        return Err(Error::Shape(format!(
            "subject {} has dims {:?}, network expects {:?}",
            s.id,
            s.volume.dims(),
            net.input_dims()
        )));
    }
    Ok(())
}

fn augment<R: Rng>(v: &Volume, rng: &mut R) -> Result<Volume> {
    let flipped = rng.random_bool(0.5);
    let reach = (v.dims()[0] as i64 - 1).min(2);
    let shift = rng.random_range(-reach..=reach);
    let base = if flipped { flip_sagittal(v) } else { v.clone() };
    translate_sagittal(&base, shift)
}

fn bce(logit: f64, label: u8) -> f64 {
    let z = if label == 1 { -logit } else { logit };
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn add_into(acc: &mut [Params<f32>], g: &[Params<f32>]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, y) in a.weights.iter_mut().zip(&g.weights) {
            *x += *y;
        }
        for (x, y) in a.bias.iter_mut().zip(&g.bias) {
            *x += *y;
        }
    }
}

/// `(mean BCE + L2, balanced accuracy)` in eval mode.
fn validate(net: &Network, samples: &[&Sample]) -> Result<(f64, Option<f64>)> {
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let (logit, p) = net.predict(&s.volume)?;
        loss += bce(logit as f64, s.label);
        probs.push(p as f64);
        labels.push(s.label);
    }
    let loss = loss / samples.len() as f64 + net.l2_penalty() as f64;
    Ok((loss, classification_metrics(&probs, &labels)?.balanced_accuracy))
}

/// Trains `net` with Adam on a stratified 85/15 train/validation split of
/// `samples`, early-stopping on validation loss and returning the
/// parameters of the best-validation-loss epoch.
pub fn train(net: Network, samples: &[Sample], cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train_with_split(net, samples, cfg, cfg.rng_seed)
}

fn train_with_split(
    mut net: Network,
    samples: &[Sample],
    cfg: &TrainConfig,
    split_seed: u64,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    check_samples(&net, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let is_val = stratified_holdout(&labels, cfg.split_fraction, child_seed(split_seed, 1))?;
    let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| !is_val[i]).collect();
    let val: Vec<&Sample> = (0..samples.len()).filter(|&i| is_val[i]).map(|i| &samples[i]).collect();
    if train_idx.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "{} subjects are too few for a {:.2} validation split",
            samples.len(),
            cfg.split_fraction
        )));
    }

    let adam = cfg.adam();
    let mut state = AdamState::new(net.params());
    let mut rng = seeded(cfg.rng_seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = net.params().to_vec();
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Params<f32>> = net
                .params()
                .iter()
                .map(|p| Params {
                    weights: vec![0.0; p.weights.len()],
                    bias: vec![0.0; p.bias.len()],
                })
                .collect();
            for &i in batch {
                let s = &samples[i];
                let input = if cfg.augment {
                    augment(&s.volume, &mut rng)?
                } else {
                    s.volume.clone()
                };
                let trace = net.forward_tensor(Tensor::from_volume(&input), Mode::Train, &mut rng)?;
                let logit = trace.logit();
                epoch_loss += bce(logit as f64, s.label);
                let g = net.backprop(&trace, sigmoid(logit) - s.label as f32, false)?;
                add_into(&mut acc, &g.params);
            }
            let scale = 1.0 / batch.len() as f32;
            for p in acc.iter_mut() {
                p.weights.iter_mut().chain(p.bias.iter_mut()).for_each(|g| *g *= scale);
            }
            net.add_l2_grad(&mut acc);
            adam.step(net.params_mut(), &acc, &mut state);
        }
        let train_loss = epoch_loss / train_idx.len() as f64 + net.l2_penalty() as f64;
        let (val_loss, val_bacc) = validate(&net, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Invalid(format!("validation loss diverged at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_balanced_accuracy: val_bacc,
        });
        let decision = stopper.update(epoch, val_loss);
        if decision.improved {
            best = net.params().to_vec();
        }
        if decision.stop {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    let net = net.with_params(best)?;
    Ok((net, history))
}

/// Training initialized from a checkpoint. The checkpoint must have exactly
/// the architecture `arch` describes; every layer stays trainable.
pub fn fine_tune(
    checkpoint: Network,
    arch: &ArchConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    check_arch(&checkpoint, arch)?;
    train(checkpoint, samples, cfg)
}

fn check_arch(checkpoint: &Network, arch: &ArchConfig) -> Result<()> {
    let (layers, _) = arch.layers()?;
    if checkpoint.layers() != layers.as_slice() || checkpoint.input_dims() != arch.input_dims {
        return Err(Error::Shape(format!(
            "checkpoint architecture (input {:?}, {} layers) does not match the configured one (input {:?}, {} layers)",
            checkpoint.input_dims(),
            checkpoint.layers().len(),
            arch.input_dims,
            layers.len()
        )));
    }
    Ok(())
}

/// Runs `trials` independent trainings and keeps the one with the best
/// validation balanced accuracy at its kept epoch (ties: lower validation
/// loss, then earlier trial). Trials differ in initialization (unless
/// `init` is given), shuffling, augmentation and dropout draws; the
/// validation split is shared.
pub fn train_trials(
    arch: &ArchConfig,
    init: Option<&Network>,
    samples: &[Sample],
    cfg: &TrainConfig,
    trials: usize,
) -> Result<(Network, TrainHistory, usize)> {
    if trials == 0 {
        return Err(Error::Invalid("at least one trial is required".into()));
    }
    let mut best: Option<(Network, TrainHistory, usize)> = None;
    for trial in 0..trials {
        let trial_cfg = TrainConfig {
            rng_seed: if trial == 0 { cfg.rng_seed } else { child_seed(cfg.rng_seed, 100 + trial as u64) },
            ..cfg.clone()
        };
        let net = match init {
            Some(ckpt) => {
                check_arch(ckpt, arch)?;
                ckpt.clone()
            }
            None => Network::from_arch(arch, child_seed(trial_cfg.rng_seed, 2))?,
        };
        let (net, hist) = train_with_split(net, samples, &trial_cfg, cfg.rng_seed)?;
        let key = |h: &TrainHistory| {
            let b = h.best();
            (
                b.and_then(|r| r.val_balanced_accuracy).unwrap_or(f64::NEG_INFINITY),
                b.map(|r| -r.val_loss).unwrap_or(f64::NEG_INFINITY),
            )
        };
        let better = match &best {
            None => true,
            Some((_, h, _)) => key(&hist) > key(h),
        };
        if better {
            best = Some((net, hist, trial));
        }
    }
    Ok(best.unwrap())
}

/// Eval-mode `(logit, probability)` for each sample.
pub fn evaluate_split(net: &Network, samples: &[Sample]) -> Result<Vec<(f32, f32)>> {
    samples.iter().map(|s| net.predict(&s.volume)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    #[test]
    fn early_stopping_with_rising_validation_loss() {
        let mut es = EarlyStopping::new(15);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            if es.update(epoch, epoch as f64).stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(16));
        assert_eq!(es.best_epoch(), 1);
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let x = if label == 1 { 1.0 + (i % 7) as f32 * 0.1 } else { -1.0 - (i % 5) as f32 * 0.1 };
                Sample {
                    id: format!("s{i}"),
                    volume: Volume::new([1, 1, 1], vec![x]).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn toy_net(seed: u64) -> Network {
        Network::new([1, 1, 1], vec![LayerSpec::dense(1, 1), LayerSpec::SigmoidOutput], vec![0.0; 2], seed).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 4,
            max_epochs: 30,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        let samples = toy_samples(40);
        let (net, hist) = train(toy_net(3), &samples, &toy_cfg()).unwrap();
        let losses: Vec<f64> = hist.epochs.iter().take(5).map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        let preds = evaluate_split(&net, &samples).unwrap();
        let probs: Vec<f64> = preds.iter().map(|p| p.1 as f64).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let m = classification_metrics(&probs, &labels).unwrap();
        assert_eq!(m.balanced_accuracy, Some(1.0));
        assert!(hist.best_epoch >= 1 && hist.best_epoch <= hist.epochs.len());
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(30);
        let a = train(toy_net(1), &samples, &toy_cfg()).unwrap();
        let b = train(toy_net(1), &samples, &toy_cfg()).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn zero_epochs_keeps_the_initial_parameters() {
        let samples = toy_samples(20);
        let net = toy_net(8);
        let cfg = TrainConfig { max_epochs: 0, ..toy_cfg() };
        let (out, hist) = train(net.clone(), &samples, &cfg).unwrap();
        assert_eq!(out, net);
        assert_eq!(hist.best_epoch, 0);
    }

    #[test]
    fn rejects_single_class_and_empty_sets() {
        let one_class: Vec<Sample> = toy_samples(10).into_iter().filter(|s| s.label == 1).collect();
        assert!(train(toy_net(0), &one_class, &toy_cfg()).is_err());
        assert!(train(toy_net(0), &[], &toy_cfg()).is_err());
    }

    #[test]
    fn fine_tune_checks_architecture() {
        let arch = ArchConfig {
            input_dims: [16, 16, 16],
            conv_channels: vec![2, 2],
            pool_after: vec![true, true],
            conv_l2: vec![0.0, 0.01],
            ..ArchConfig::default()
        };
        let other = ArchConfig {
            conv_channels: vec![2, 3],
            ..arch.clone()
        };
        let ckpt = Network::from_arch(&other, 0).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        assert!(matches!(fine_tune(ckpt, &arch, &[], &cfg), Err(Error::Shape(_))));
    }
}
