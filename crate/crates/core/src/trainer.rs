//! Mini-batch training of the network on windowed samples with the
//! KL(target ‖ prediction) loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{derive_seed, Dataset, WindowedSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{check_params, forward, forward_graph, init_params, IenConfig, IenVars};
use crate::optim::{adam_step, AdamConfig, OptimizerState, ParamSet};
use crate::tensor::Tensor;

/// Random access to training samples.
pub trait Samples {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<WindowedSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for [WindowedSample] {
    fn len(&self) -> usize {
        <[WindowedSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<WindowedSample> {
        Ok(self[index].clone())
    }
}

impl Samples for Vec<WindowedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<WindowedSample> {
        Ok(self[index].clone())
    }
}

/// Windows of a dataset, materialized on access.
pub struct DatasetWindows<'a> {
    dataset: &'a Dataset,
    index: Vec<(usize, usize)>,
}

impl<'a> DatasetWindows<'a> {
    /// Every window of every trial.
    pub fn all(dataset: &'a Dataset) -> Self {
        DatasetWindows { dataset, index: dataset.window_index() }
    }

    /// Selected `(trial, window)` pairs.
    pub fn pairs(dataset: &'a Dataset, index: Vec<(usize, usize)>) -> Self {
        DatasetWindows { dataset, index }
    }
}

impl Samples for DatasetWindows<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn get(&self, index: usize) -> Result<WindowedSample> {
        let (t, k) = self.index[index];
        self.dataset.sample(t, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Steps between progress events; 0 disables them.
    pub eval_every: usize,
    pub loss_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            shuffle: true,
            eval_every: 50,
            loss_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainLog {
    /// One JSON object per step, one per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, l) in self.step_losses.iter().enumerate() {
            out += &serde_json::json!({"step": i + 1, "loss": l}).to_string();
            out.push('\n');
        }
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out += &serde_json::json!({"epoch": i + 1, "mean_loss": l}).to_string();
            out.push('\n');
        }
        out += &serde_json::json!({
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock_s": self.wall_clock_s,
            "steps": self.step_losses.len(),
        })
        .to_string();
        out.push('\n');
        Ok(out)
    }
}

/// Progress notifications from [`train_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    Step { step: usize, loss: f64 },
    Epoch { epoch: usize, mean_loss: f64 },
}

/// Hex SHA-256 of the serialized network and training configuration.
pub fn config_hash(ien: &IenConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(ien, train)).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

fn check_sample(config: &IenConfig, s: &WindowedSample) -> Result<()> {
    let g = config.grid;
    if s.gt_heatmap.shape() != [1, g.height, g.width] {
        return Err(Error::ConfigMismatch(format!(
            "heatmap {:?} for grid {}x{}",
            s.gt_heatmap.shape(),
            g.height,
            g.width
        )));
    }
    let hs = s.hand_window.shape();
    if hs.len() != 4 || hs[1..] != [config.hand_channels, g.height, g.width] {
        return Err(Error::ConfigMismatch(format!(
            "hand window {hs:?} for {} channels on {}x{}",
            config.hand_channels, g.height, g.width
        )));
    }
    Ok(())
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    params: &ParamSet<f32>,
    config: &IenConfig,
    sample: &WindowedSample,
    eps: f64,
) -> Result<(f64, ParamSet<f32>)> {
    check_sample(config, sample)?;
    let mut g = Graph::new();
    let vars = IenVars::register(&mut g, params, true);
    let a = g.constant(sample.scene_channels.clone());
    let pred = forward_graph(&mut g, &vars, config, a, &sample.hand_window)?;
    let target = g.constant(sample.gt_heatmap.clone());
    let loss = g.kl_divergence(target, pred, eps as f32)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect();
    Ok((value, out))
}

/// [`train_with`] from a fresh initialization and without progress events.
pub fn train(
    samples: &dyn Samples,
    config: &IenConfig,
    train_config: &TrainConfig,
) -> Result<(ParamSet<f32>, TrainLog)> {
    let init = init_params(config, derive_seed(train_config.seed, 0x1417))?;
    train_with(samples, config, train_config, init, &mut |_| {})
}

/// Adam on the batch-mean KL loss. Batches follow a per-epoch shuffle seeded
/// from `train_config.seed`; gradients are summed in sample order.
pub fn train_with(
    samples: &dyn Samples,
    config: &IenConfig,
    train_config: &TrainConfig,
    mut params: ParamSet<f32>,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<(ParamSet<f32>, TrainLog)> {
    train_config.validate()?;
    config.validate()?;
    check_params(config, &params)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let started = Instant::now();
    let adam = AdamConfig { learning_rate: train_config.learning_rate, ..AdamConfig::default() };
    let mut state = OptimizerState::new(adam, &params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        wall_clock_s: 0.0,
        seed: train_config.seed,
        config_hash: config_hash(config, train_config),
    };
    for epoch in 0..train_config.epochs {
        if train_config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_config.seed, epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let step = log.step_losses.len() + 1;
            let mut sum: ParamSet<f32> = ParamSet::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_gradients(&params, config, &samples.get(i)?, train_config.loss_eps)
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFiniteLoss { step },
                        other => other,
                    })?;
                batch_loss += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for t in sum.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || sum.values().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            adam_step(&mut params, &sum, &mut state)?;
            if params.values().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            log.step_losses.push(mean);
            epoch_total += batch_loss;
            if train_config.eval_every > 0 && step % train_config.eval_every == 0 {
                on_event(TrainEvent::Step { step, loss: mean });
            }
        }
        let mean_loss = epoch_total / samples.len() as f64;
        log.epoch_losses.push(mean_loss);
        on_event(TrainEvent::Epoch { epoch: epoch + 1, mean_loss });
    }
    log.wall_clock_s = started.elapsed().as_secs_f64();
    Ok((params, log))
}

/// KL(target ‖ pred) with smoothing `eps`, accumulated in 64-bit.
pub fn kl_value(target: &Tensor<f32>, pred: &Tensor<f32>, eps: f64) -> f64 {
    target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| {
            let (t, p) = (t as f64, p as f64);
            if t == 0.0 {
                0.0
            } else {
                t * ((t + eps) / (p + eps)).ln()
            }
        })
        .sum()
}

/// Mean KL over `samples` for predictions made by `predict`.
pub fn evaluate_loss_with(
    samples: &dyn Samples,
    eps: f64,
    predict: &mut dyn FnMut(&WindowedSample) -> Result<Tensor<f32>>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut total = 0.0;
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        let pred = predict(&s)?;
        total += kl_value(&s.gt_heatmap, &pred, eps);
    }
    Ok(total / samples.len() as f64)
}

/// Mean KL of the network's predictions over `samples`.
pub fn evaluate_loss(
    params: &ParamSet<f32>,
    config: &IenConfig,
    samples: &dyn Samples,
    eps: f64,
) -> Result<f64> {
    evaluate_loss_with(samples, eps, &mut |s| {
        check_sample(config, s)?;
        forward(params, config, &s.scene_channels, &s.hand_window)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::motion::RenderMode;
    use crate::scene::Grid;

    fn tiny_data() -> (Dataset, IenConfig) {
        let mut dc = DatasetConfig::new(2, RenderMode::DepthLike, 3);
        dc.grid = Grid::new(32, 32);
        dc.sigma = 2.0;
        dc.window.cap = 2;
        let cfg = IenConfig { grid: dc.grid, ..IenConfig::tiny(1) };
        (build_dataset(&dc).unwrap(), cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (ds, cfg) = tiny_data();
        let samples = DatasetWindows::all(&ds);
        let tc = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 0.0, ..TrainConfig::default() };
        let init = init_params(&cfg, derive_seed(tc.seed, 0x1417)).unwrap();
        let (p, log) = train(&samples, &cfg, &tc).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.step_losses.len(), 4);
        assert_eq!(log.epoch_losses[0], log.epoch_losses[1]);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = tiny_data();
        let samples = DatasetWindows::all(&ds);
        let tc = TrainConfig { epochs: 2, batch_size: 3, learning_rate: 1e-2, ..TrainConfig::default() };
        let (a, la) = train(&samples, &cfg, &tc).unwrap();
        let (b, lb) = train(&samples, &cfg, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.step_losses, lb.step_losses);
        assert_eq!(la.step_losses.len(), 4);
    }

    #[test]
    fn forced_prediction_gives_zero_loss() {
        let (ds, cfg) = tiny_data();
        let samples = DatasetWindows::all(&ds);
        let l = evaluate_loss_with(&samples, 1e-8, &mut |s| Ok(s.gt_heatmap.clone())).unwrap();
        assert!(l.abs() < 1e-9);
        let p = init_params(&cfg, 1).unwrap();
        let a = evaluate_loss(&p, &cfg, &samples, 1e-8).unwrap();
        assert_eq!(a, evaluate_loss(&p, &cfg, &samples, 1e-8).unwrap());
        assert!(a > 0.0);
    }
}
