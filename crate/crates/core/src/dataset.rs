//! Trials of (affordance channels, rendered reach) with Gaussian target
//! heatmaps, sliding-window samples, and the on-disk dataset archive.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, BlobWriter};
use crate::error::{Error, Result};
use crate::motion::{generate_reach, render_sequence, sample_start, RenderMode};
use crate::scene::{
    apply_detector_noise, generate_scene, render_affordance_channels, DetectorNoise, Grid, Scene,
};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const DATASET_KIND: &str = "ien-dataset";

/// Normalized isotropic Gaussian over pixel centers, shape `[1, H, W]`.
pub fn gaussian_heatmap(center: (f64, f64), sigma: f64, grid: Grid) -> Result<Tensor<f32>> {
    let (cx, cy) = center;
    let inside = cx.is_finite()
        && cy.is_finite()
        && (0.0..=(grid.width as f64 - 1.0)).contains(&cx)
        && (0.0..=(grid.height as f64 - 1.0)).contains(&cy);
    if !inside {
        return Err(Error::CenterOutOfGrid { x: cx, y: cy });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut raw = Vec::with_capacity(grid.pixels());
    for y in 0..grid.height {
        for x in 0..grid.width {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            raw.push((-d2 * inv).exp());
        }
    }
    let total: f64 = raw.iter().sum();
    let data = raw.iter().map(|v| (v / total) as f32).collect();
    Tensor::new(&[1, grid.height, grid.width], data)
}

/// Sliding-window parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub length: usize,
    pub stride: usize,
    pub cap: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams { length: 10, stride: 1, cap: 50 }
    }
}

impl WindowParams {
    /// Number of windows over a sequence of `frames` frames.
    pub fn count(&self, frames: usize) -> usize {
        if frames < self.length || self.length == 0 {
            return 0;
        }
        ((frames - self.length) / self.stride.max(1) + 1).min(self.cap)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    /// Affordance channels after detector noise, `[5, H, W]`.
    pub scene_channels: Tensor<f32>,
    /// Scene as seen by the detector; bboxes and target index are post-noise.
    pub scene: Scene,
    /// Rendered reach, `[T, C, H, W]`.
    pub hand_stack: Tensor<f32>,
    pub mode: RenderMode,
    /// Center of the target's detected bbox.
    pub target_center: (f64, f64),
    pub seed: u64,
}

impl Trial {
    pub fn frames(&self) -> usize {
        self.hand_stack.shape()[0]
    }

    /// The first `len` hand frames.
    pub fn prefix(&self, len: usize) -> Result<Tensor<f32>> {
        self.hand_stack.slice_outer(0, len)
    }

    pub fn heatmap(&self, sigma: f64) -> Result<Tensor<f32>> {
        gaussian_heatmap(self.target_center, sigma, self.scene.grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub scene_channels: Tensor<f32>,
    /// `[L, C, H, W]`
    pub hand_window: Tensor<f32>,
    /// `[1, H, W]`
    pub gt_heatmap: Tensor<f32>,
}

/// Window `index` of a trial under `params`.
pub fn window(trial: &Trial, params: WindowParams, sigma: f64, index: usize) -> Result<WindowedSample> {
    let frames = trial.frames();
    if frames < params.length {
        return Err(Error::TooShort { len: frames, window: params.length });
    }
    if index >= params.count(frames) {
        return Err(Error::InvalidArgument(format!("window {index} out of range")));
    }
    Ok(WindowedSample {
        scene_channels: trial.scene_channels.clone(),
        hand_window: trial.hand_stack.slice_outer(index * params.stride.max(1), params.length)?,
        gt_heatmap: trial.heatmap(sigma)?,
    })
}

/// All windows of a trial, starting at frames `0, stride, 2·stride, …`.
pub fn slide_windows(trial: &Trial, params: WindowParams, sigma: f64) -> Result<Vec<WindowedSample>> {
    let frames = trial.frames();
    if frames < params.length {
        return Err(Error::TooShort { len: frames, window: params.length });
    }
    (0..params.count(frames)).map(|k| window(trial, params, sigma, k)).collect()
}

/// Everything that determines a dataset build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_trials: usize,
    pub mode: RenderMode,
    pub noise: DetectorNoise,
    pub grid: Grid,
    pub window: WindowParams,
    /// Ground-truth heatmap spread in pixels.
    pub sigma: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(n_trials: usize, mode: RenderMode, seed: u64) -> Self {
        DatasetConfig {
            n_trials,
            mode,
            noise: DetectorNoise::default(),
            grid: Grid::new(64, 64),
            window: WindowParams::default(),
            sigma: 4.0,
            seed,
        }
    }
}

/// Mixes a stream tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates one trial: scene, detector noise, reach and rendering.
pub fn generate_trial(
    grid: Grid,
    mode: RenderMode,
    noise: &DetectorNoise,
    seed: u64,
) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(2..=3);
    let scene = generate_scene(n_objects, grid, derive_seed(seed, 1))?;
    let start = sample_start(grid, derive_seed(seed, 2));
    let traj = generate_reach(start, &scene, derive_seed(seed, 3));
    let hand_stack = render_sequence(&traj, mode, grid, derive_seed(seed, 4));
    let clean = render_affordance_channels(&scene);
    let (scene_channels, detected) = apply_detector_noise(&clean, &scene, noise, derive_seed(seed, 5))?;
    let target_center = detected.target().bbox.center();
    Ok(Trial { scene_channels, scene: detected, hand_stack, mode, target_center, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub scene: Scene,
    pub target_center: (f64, f64),
    /// Offset of the trial's first blob within the blob section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub trial_count: usize,
    pub window_count: usize,
    pub config: DatasetConfig,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<Trial>,
}

/// Generates `config.n_trials` trials in index order.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trials = (0..config.n_trials)
        .map(|_| generate_trial(config.grid, config.mode, &config.noise, rng.random()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_trials(config.clone(), trials)
}

impl Dataset {
    pub fn from_trials(config: DatasetConfig, trials: Vec<Trial>) -> Result<Self> {
        let mut offset = 0u64;
        let mut records = Vec::with_capacity(trials.len());
        for t in &trials {
            if t.scene.grid != config.grid || t.mode != config.mode {
                return Err(Error::ConfigMismatch(format!("trial {} differs from config", t.seed)));
            }
            records.push(TrialRecord {
                seed: t.seed,
                scene: t.scene.clone(),
                target_center: t.target_center,
                offset,
            });
            offset += (blob_len(&t.scene_channels) + blob_len(&t.hand_stack)) as u64;
        }
        let window_count = trials.iter().map(|t| config.window.count(t.frames())).sum();
        Ok(Dataset {
            manifest: DatasetManifest {
                version: DATASET_VERSION,
                trial_count: trials.len(),
                window_count,
                config,
                trials: records,
            },
            trials,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn window_count(&self) -> usize {
        self.manifest.window_count
    }

    /// `(trial, window)` index pairs in dataset order.
    pub fn window_index(&self) -> Vec<(usize, usize)> {
        let p = self.config().window;
        self.trials
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..p.count(t.frames())).map(move |k| (i, k)))
            .collect()
    }

    pub fn sample(&self, trial: usize, index: usize) -> Result<WindowedSample> {
        let cfg = self.config();
        window(&self.trials[trial], cfg.window, cfg.sigma, index)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = BlobWriter::new();
        for (t, rec) in self.trials.iter().zip(&self.manifest.trials) {
            let offset = w.push(format!("trial{}/scene", rec.seed), &t.scene_channels);
            debug_assert_eq!(offset, rec.offset);
            w.push(format!("trial{}/hand", rec.seed), &t.hand_stack);
        }
        w.finish(DATASET_KIND, &self.manifest)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let reader = ArchiveReader::<DatasetManifest>::parse(bytes, DATASET_KIND)?;
        let m = &reader.header;
        let corrupt = |msg: String| Error::CorruptArchive(msg);
        if m.version != DATASET_VERSION {
            return Err(corrupt(format!("dataset version {}", m.version)));
        }
        if m.trial_count != m.trials.len() || reader.entries().len() != 2 * m.trials.len() {
            return Err(corrupt(format!(
                "manifest lists {} trials, {} records and {} blobs",
                m.trial_count,
                m.trials.len(),
                reader.entries().len()
            )));
        }
        let cfg = &m.config;
        let mut trials = Vec::with_capacity(m.trials.len());
        for (i, rec) in m.trials.iter().enumerate() {
            if reader.entries()[2 * i].offset != rec.offset {
                return Err(corrupt(format!("trial {i} offset mismatch")));
            }
            let scene_channels = reader.tensor::<f32>(2 * i)?;
            let hand_stack = reader.tensor::<f32>(2 * i + 1)?;
            let g = cfg.grid;
            let hs = hand_stack.shape();
            if scene_channels.shape() != [5, g.height, g.width]
                || hs.len() != 4
                || hs[1] != cfg.mode.channels()
                || hs[2..] != [g.height, g.width]
            {
                return Err(corrupt(format!("trial {i} tensor shapes disagree with the manifest")));
            }
            rec.scene.validate().map_err(|e| corrupt(format!("trial {i}: {e}")))?;
            trials.push(Trial {
                scene_channels,
                scene: rec.scene.clone(),
                hand_stack,
                mode: cfg.mode,
                target_center: rec.target_center,
                seed: rec.seed,
            });
        }
        let ds = Dataset::from_trials(cfg.clone(), trials)?;
        if ds.manifest != *m {
            return Err(corrupt("manifest counts inconsistent with blobs".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn blob_len(t: &Tensor<f32>) -> usize {
    16 + 4 * t.shape().len() + 4 * t.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_ratio_and_normalization() {
        let g = Grid::new(64, 64);
        let h = gaussian_heatmap((32.0, 32.0), 4.0, g).unwrap();
        let sum: f64 = h.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let ratio = h.at3(0, 32, 32) as f64 / h.at3(0, 32, 36) as f64;
        assert!((ratio - 0.5f64.exp()).abs() < 1e-5, "{ratio}");
        assert!(matches!(
            gaussian_heatmap((64.0, 3.0), 4.0, g),
            Err(Error::CenterOutOfGrid { .. })
        ));
    }

    #[test]
    fn window_counts() {
        let p = WindowParams::default();
        assert_eq!(p.count(60), 50);
        assert_eq!(p.count(10), 1);
        assert_eq!(p.count(9), 0);
        assert_eq!(WindowParams { cap: 100, ..p }.count(60), 51);
    }

    #[test]
    fn build_is_deterministic_and_round_trips() {
        let mut cfg = DatasetConfig::new(3, RenderMode::DepthLike, 5);
        cfg.grid = Grid::new(32, 32);
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(a.window_count(), 150);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 7]).is_err());
    }
}
