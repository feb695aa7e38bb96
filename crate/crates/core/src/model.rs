//! The intention estimation network: an affordance conv branch and a
//! ConvLSTM hand branch fused by channel concatenation, followed by a small
//! U-Net and a spatial softmax.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, BlobWriter};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{convlstm_cell, ConvLstmVars};
use crate::optim::ParamSet;
use crate::scene::{Grid, AFFORDANCE_CHANNELS};
use crate::tensor::{Element, Tensor};

const CHECKPOINT_KIND: &str = "ien-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IenConfig {
    pub grid: Grid,
    pub affordance_channels: usize,
    pub hand_channels: usize,
    pub convlstm_hidden: usize,
    pub convlstm_kernel: usize,
    /// Width of both affordance-branch convolutions.
    pub affordance_hidden: usize,
    /// Channel count per U-Net level, finest first.
    pub encoder_widths: Vec<usize>,
    /// Number of pooling levels.
    pub depth: usize,
    pub use_affordance: bool,
    /// Longest hand sequence accepted by [`forward`].
    pub max_sequence: usize,
}

impl IenConfig {
    /// 64x64 grid, 16 hidden ConvLSTM channels, widths `[32, 64, 128]`.
    pub fn reference(hand_channels: usize) -> Self {
        IenConfig {
            grid: Grid::new(64, 64),
            affordance_channels: AFFORDANCE_CHANNELS,
            hand_channels,
            convlstm_hidden: 16,
            convlstm_kernel: 3,
            affordance_hidden: 16,
            encoder_widths: vec![32, 64, 128],
            depth: 2,
            use_affordance: true,
            max_sequence: 15,
        }
    }

    /// A small 16x16 network for gradient checks and quick experiments.
    pub fn tiny(hand_channels: usize) -> Self {
        IenConfig {
            grid: Grid::new(16, 16),
            convlstm_hidden: 3,
            affordance_hidden: 3,
            encoder_widths: vec![4, 6, 8],
            ..IenConfig::reference(hand_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigMismatch(m));
        let scale = 1usize << self.depth;
        if self.grid.height == 0 || self.grid.height % scale != 0 || self.grid.width % scale != 0 {
            return bad(format!("grid {:?} not divisible by 2^{}", self.grid, self.depth));
        }
        if self.encoder_widths.len() != self.depth + 1 {
            return bad(format!(
                "{} encoder widths for depth {}",
                self.encoder_widths.len(),
                self.depth
            ));
        }
        let counts = [
            self.affordance_channels,
            self.hand_channels,
            self.convlstm_hidden,
            self.affordance_hidden,
            self.max_sequence,
        ];
        if counts.contains(&0) || self.encoder_widths.contains(&0) {
            return bad("channel counts and sequence limit must be positive".into());
        }
        if self.convlstm_kernel % 2 == 0 {
            return bad(format!("ConvLSTM kernel {} must be odd", self.convlstm_kernel));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in sorted name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        let (a, h, k) = (self.affordance_hidden, self.convlstm_hidden, self.convlstm_kernel);
        let mut conv = |name: &str, out: usize, inp: usize, ksize: usize| {
            s.insert(format!("{name}.w"), vec![out, inp, ksize, ksize]);
            s.insert(format!("{name}.b"), vec![out]);
        };
        conv("aff0", a, self.affordance_channels, 3);
        conv("aff1", a, a, 3);
        let w = &self.encoder_widths;
        conv("enc0", w[0], a + h, 3);
        for l in 1..=self.depth {
            conv(&format!("enc{l}"), w[l], w[l - 1], 3);
        }
        for l in 0..self.depth {
            conv(&format!("dec{l}"), w[l], w[l + 1] + w[l], 3);
        }
        conv("head", 1, w[0], 1);
        s.insert("lstm.wx".into(), vec![4 * h, self.hand_channels, k, k]);
        s.insert("lstm.wh".into(), vec![4 * h, h, k, k]);
        s.insert("lstm.b".into(), vec![4 * h]);
        s
    }
}

/// Fan-in scaled uniform initialization, `U(±sqrt(6/fan_in))`.
///
/// Biases start at zero except the ConvLSTM forget gate (+1). The output
/// head is shrunk tenfold so a fresh network predicts a nearly flat heatmap.
pub fn init_params<T: Element>(config: &IenConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.convlstm_hidden;
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let t = if shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if name == "head.w" {
                bound *= 0.1;
            }
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        } else if name == "lstm.b" {
            Tensor::from_fn(&shape, |i| {
                if (h..2 * h).contains(&i) {
                    T::one()
                } else {
                    T::zero()
                }
            })
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors `config` calls for.
pub fn check_params<T: Element>(config: &IenConfig, params: &ParamSet<T>) -> Result<()> {
    let shapes = config.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} parameters, config expects {}",
            params.len(),
            shapes.len()
        )));
    }
    for (name, shape) in &shapes {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::ConfigMismatch(format!(
                    "{name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::ConfigMismatch(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

/// Parameter leaves of one graph, by name.
pub struct IenVars {
    vars: BTreeMap<String, Var>,
}

impl IenVars {
    /// Adds the parameters to `g`, as trainable leaves if `trainable`.
    pub fn register<T: Element>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        IenVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn conv<T: Element>(&self, g: &mut Graph<T>, name: &str, x: Var, pad: usize) -> Result<Var> {
        g.conv2d(x, self.get(&format!("{name}.w")), Some(self.get(&format!("{name}.b"))), 1, pad)
    }
}

fn check_inputs<T: Element>(
    config: &IenConfig,
    affordance: &Tensor<T>,
    hand_seq: &Tensor<T>,
) -> Result<usize> {
    let g = config.grid;
    if affordance.shape() != [config.affordance_channels, g.height, g.width] {
        return Err(Error::ShapeMismatch(format!(
            "affordance {:?}, expected [{}, {}, {}]",
            affordance.shape(),
            config.affordance_channels,
            g.height,
            g.width
        )));
    }
    let s = hand_seq.shape();
    if s.len() != 4 || s[1..] != [config.hand_channels, g.height, g.width] || s[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "hand sequence {s:?}, expected [L, {}, {}, {}]",
            config.hand_channels, g.height, g.width
        )));
    }
    if s[0] > config.max_sequence {
        return Err(Error::SequenceTooLong { len: s[0], max: config.max_sequence });
    }
    Ok(s[0])
}

/// Affordance features, or zeros of the same shape when the branch is ablated.
pub fn affordance_branch<T: Element>(
    g: &mut Graph<T>,
    vars: &IenVars,
    config: &IenConfig,
    affordance: Var,
) -> Result<Var> {
    if !config.use_affordance {
        let gr = config.grid;
        return Ok(g.constant(Tensor::zeros(&[config.affordance_hidden, gr.height, gr.width])));
    }
    let a = vars.conv(g, "aff0", affordance, 1)?;
    let a = g.relu(a)?;
    let a = vars.conv(g, "aff1", a, 1)?;
    g.relu(a)
}

/// Rolls the ConvLSTM over `frames` from a zero state; returns every hidden map.
pub fn hand_branch<T: Element>(
    g: &mut Graph<T>,
    vars: &IenVars,
    config: &IenConfig,
    frames: &[Var],
) -> Result<Vec<Var>> {
    let gr = config.grid;
    let zeros = Tensor::zeros(&[config.convlstm_hidden, gr.height, gr.width]);
    let mut h = g.constant(zeros.clone());
    let mut c = g.constant(zeros);
    let w = ConvLstmVars {
        input_kernel: vars.get("lstm.wx"),
        hidden_kernel: vars.get("lstm.wh"),
        bias: vars.get("lstm.b"),
    };
    let mut hidden = Vec::with_capacity(frames.len());
    for &x in frames {
        (h, c) = convlstm_cell(g, x, h, c, &w)?;
        hidden.push(h);
    }
    Ok(hidden)
}

/// Fusion plus U-Net; returns the normalized `[1, H, W]` heatmap.
pub fn fusion_head<T: Element>(
    g: &mut Graph<T>,
    vars: &IenVars,
    config: &IenConfig,
    aff_features: Var,
    hidden: Var,
) -> Result<Var> {
    let fused = g.concat_channels(aff_features, hidden)?;
    let e = vars.conv(g, "enc0", fused, 1)?;
    let mut skips = vec![g.relu(e)?];
    for l in 1..=config.depth {
        let p = g.maxpool2d(skips[l - 1])?;
        let e = vars.conv(g, &format!("enc{l}"), p, 1)?;
        skips.push(g.relu(e)?);
    }
    let mut d = skips[config.depth];
    for l in (0..config.depth).rev() {
        let up = g.upsample2d(d)?;
        let cat = g.concat_channels(up, skips[l])?;
        let z = vars.conv(g, &format!("dec{l}"), cat, 1)?;
        d = g.relu(z)?;
    }
    let logits = vars.conv(g, "head", d, 0)?;
    g.softmax_spatial(logits)
}

fn frame_vars<T: Element>(g: &mut Graph<T>, hand_seq: &Tensor<T>, len: usize) -> Result<Vec<Var>> {
    (0..len)
        .map(|i| {
            let f = hand_seq.slice_outer(i, 1)?;
            let shape = f.shape()[1..].to_vec();
            Ok(g.constant(f.reshape(&shape)?))
        })
        .collect()
}

/// Records the full network on `g` and returns the heatmap node.
pub fn forward_graph<T: Element>(
    g: &mut Graph<T>,
    vars: &IenVars,
    config: &IenConfig,
    affordance: Var,
    hand_seq: &Tensor<T>,
) -> Result<Var> {
    let len = check_inputs(config, g.value(affordance), hand_seq)?;
    let frames = frame_vars(g, hand_seq, len)?;
    let a = affordance_branch(g, vars, config, affordance)?;
    let hidden = hand_branch(g, vars, config, &frames)?;
    fusion_head(g, vars, config, a, *hidden.last().expect("at least one frame"))
}

/// Heatmap `[1, H, W]` for one affordance tensor and hand sequence `[L, C, H, W]`.
pub fn forward<T: Element>(
    params: &ParamSet<T>,
    config: &IenConfig,
    affordance: &Tensor<T>,
    hand_seq: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_params(config, params)?;
    let mut g = Graph::new();
    let vars = IenVars::register(&mut g, params, false);
    let a = g.constant(affordance.clone());
    let out = forward_graph(&mut g, &vars, config, a, hand_seq)?;
    Ok(g.value(out).clone())
}

/// Heatmaps for several prefix lengths of one sequence, sharing the
/// recurrent rollout. Equivalent to calling [`forward`] on each prefix.
pub fn forward_prefixes<T: Element>(
    params: &ParamSet<T>,
    config: &IenConfig,
    affordance: &Tensor<T>,
    hand_seq: &Tensor<T>,
    lengths: &[usize],
) -> Result<Vec<Tensor<T>>> {
    check_params(config, params)?;
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if lengths.contains(&0) {
        return Err(Error::InvalidArgument("prefix length must be at least 1".into()));
    }
    if longest > hand_seq.shape().first().copied().unwrap_or(0) {
        return Err(Error::TooShort { len: hand_seq.shape()[0], window: longest });
    }
    let prefix = hand_seq.slice_outer(0, longest)?;
    check_inputs(config, affordance, &prefix)?;
    let mut g = Graph::new();
    let vars = IenVars::register(&mut g, params, false);
    let a = g.constant(affordance.clone());
    let frames = frame_vars(&mut g, &prefix, longest)?;
    let feats = affordance_branch(&mut g, &vars, config, a)?;
    let hidden = hand_branch(&mut g, &vars, config, &frames)?;
    lengths
        .iter()
        .map(|&k| {
            let out = fusion_head(&mut g, &vars, config, feats, hidden[k - 1])?;
            Ok(g.value(out).clone())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: IenConfig,
    params: Vec<String>,
}

pub fn checkpoint_bytes(params: &ParamSet<f32>, config: &IenConfig) -> Result<Vec<u8>> {
    check_params(config, params)?;
    let mut w = BlobWriter::new();
    for (name, t) in params {
        w.push(name.clone(), t);
    }
    let header = CheckpointHeader { config: config.clone(), params: params.keys().cloned().collect() };
    w.finish(CHECKPOINT_KIND, &header)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamSet<f32>, IenConfig)> {
    let r = ArchiveReader::<CheckpointHeader>::parse(bytes, CHECKPOINT_KIND)?;
    let h = &r.header;
    if h.params.len() != r.entries().len()
        || h.params.iter().zip(r.entries()).any(|(n, e)| *n != e.name)
    {
        return Err(Error::CorruptArchive("parameter list disagrees with blobs".into()));
    }
    h.config.validate()?;
    let mut params = ParamSet::new();
    for (i, name) in h.params.iter().enumerate() {
        let t = r.tensor::<f32>(i)?;
        if !t.is_finite() {
            return Err(Error::CorruptArchive(format!("{name} holds non-finite values")));
        }
        params.insert(name.clone(), t);
    }
    check_params(&h.config, &params)?;
    Ok((params, h.config.clone()))
}

pub fn save_checkpoint(params: &ParamSet<f32>, config: &IenConfig, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, checkpoint_bytes(params, config)?)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamSet<f32>, IenConfig)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
