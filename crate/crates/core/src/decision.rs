//! Early target decisions from heatmaps: bbox mass per object, normalized
//! probabilities, thresholded commitment, and f-value tables over trials.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, generate_trial, Trial};
use crate::error::{Error, Result};
use crate::model::{forward_prefixes, IenConfig};
use crate::motion::RenderMode;
use crate::optim::ParamSet;
use crate::scene::{BBox, DetectorNoise, Grid};
use crate::tensor::Tensor;

/// Heatmap mass inside each bbox. Overlapping boxes each count shared pixels.
pub fn object_confidences(heatmap: &Tensor<f32>, bboxes: &[BBox]) -> Result<Vec<f64>> {
    let (c, h, w) = heatmap.dims3()?;
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("heatmap has {c} channels")));
    }
    bboxes
        .iter()
        .map(|b| {
            if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(Error::BboxOutOfGrid([b.x, b.y, b.w, b.h]));
            }
            let mut s = 0.0f64;
            for y in b.y..b.y + b.h {
                for &v in &heatmap.data()[y * w + b.x..y * w + b.x + b.w] {
                    s += v as f64;
                }
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    pub values: Vec<f64>,
    /// All confidences were zero and `values` is the uniform fallback.
    pub degenerate: bool,
}

/// `p_i = c_i / Σc`, or uniform with the degenerate flag when `Σc = 0`.
pub fn normalize_confidences(confidences: &[f64]) -> Probabilities {
    let total: f64 = confidences.iter().sum();
    if total > 0.0 {
        Probabilities { values: confidences.iter().map(|c| c / total).collect(), degenerate: false }
    } else {
        let n = confidences.len().max(1) as f64;
        Probabilities { values: vec![1.0 / n; confidences.len()], degenerate: true }
    }
}

/// The argmax object if its probability strictly exceeds `threshold`.
/// Ties go to the lowest id; degenerate inputs never decide.
pub fn decide(probabilities: &Probabilities, threshold: f64) -> Option<usize> {
    if probabilities.degenerate {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probabilities.values.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.filter(|&(_, p)| p > threshold).map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProbability {
    pub object_id: usize,
    pub confidence: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Hand frames consumed, counting from 1.
    pub frame_index: usize,
    pub chosen: Option<usize>,
    pub probabilities: Vec<ObjectProbability>,
    pub threshold: f64,
}

/// Full decision record for one heatmap.
pub fn decision_for(
    heatmap: &Tensor<f32>,
    bboxes: &[BBox],
    frame_index: usize,
    threshold: f64,
) -> Result<Decision> {
    let conf = object_confidences(heatmap, bboxes)?;
    let probs = normalize_confidences(&conf);
    Ok(Decision {
        frame_index,
        chosen: decide(&probs, threshold),
        probabilities: conf
            .iter()
            .zip(&probs.values)
            .enumerate()
            .map(|(i, (&c, &p))| ObjectProbability { object_id: i, confidence: c, probability: p })
            .collect(),
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FValue {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Micro-averaged precision, recall and f over trials; no decision counts
/// as a false negative.
pub fn f_value(decisions: &[Option<usize>], truths: &[usize]) -> Result<FValue> {
    if decisions.len() != truths.len() {
        return Err(Error::LengthMismatch(decisions.len(), truths.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (d, &t) in decisions.iter().zip(truths) {
        match d {
            Some(c) if *c == t => tp += 1,
            Some(_) => fp += 1,
            None => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fp + fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FValue { precision, recall, f, tp, fp, fn_ })
}

/// Per-trial probabilities after each prefix length `1..=max_frames`.
pub fn probability_trace(
    params: &ParamSet<f32>,
    config: &IenConfig,
    trial: &Trial,
    lengths: &[usize],
) -> Result<Vec<Probabilities>> {
    let heatmaps = forward_prefixes(params, config, &trial.scene_channels, &trial.hand_stack, lengths)?;
    let bboxes = trial.scene.bboxes();
    heatmaps
        .iter()
        .map(|h| Ok(normalize_confidences(&object_confidences(h, &bboxes)?)))
        .collect()
}

/// First 1-based frame whose probabilities yield a decision.
pub fn earliest_in_trace(trace: &[Probabilities], threshold: f64) -> Option<usize> {
    trace.iter().position(|p| decide(p, threshold).is_some()).map(|i| i + 1)
}

/// Earliest frame in `1..=min(15, T)` at which the model commits.
pub fn earliest_decision_frame(
    params: &ParamSet<f32>,
    config: &IenConfig,
    trial: &Trial,
    threshold: f64,
) -> Result<Option<usize>> {
    let max = config.max_sequence.min(trial.frames());
    let lengths: Vec<usize> = (1..=max).collect();
    let trace = probability_trace(params, config, trial, &lengths)?;
    Ok(earliest_in_trace(&trace, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationCase {
    DepthAO,
    DepthO,
    RgbAO,
    RgbO,
}

impl AblationCase {
    pub const ALL: [AblationCase; 4] =
        [AblationCase::DepthAO, AblationCase::DepthO, AblationCase::RgbAO, AblationCase::RgbO];

    pub fn name(self) -> &'static str {
        match self {
            AblationCase::DepthAO => "depth-ao",
            AblationCase::DepthO => "depth-o",
            AblationCase::RgbAO => "rgb-ao",
            AblationCase::RgbO => "rgb-o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation case {s:?}")))
    }

    /// RGB cases use hand-extracted frames.
    pub fn mode(self) -> RenderMode {
        match self {
            AblationCase::DepthAO | AblationCase::DepthO => RenderMode::DepthLike,
            AblationCase::RgbAO | AblationCase::RgbO => RenderMode::RgbHandExtracted,
        }
    }

    pub fn use_affordance(self) -> bool {
        matches!(self, AblationCase::DepthAO | AblationCase::RgbAO)
    }
}

/// Stream tag separating held-out test seeds from training seeds.
const TEST_STREAM: u64 = 0x7e57;

/// Held-out trials shared by every case evaluated with the same seed.
pub fn test_trials(grid: Grid, mode: RenderMode, n: usize, seed: u64) -> Result<Vec<Trial>> {
    let base = derive_seed(seed, TEST_STREAM);
    (0..n)
        .map(|i| generate_trial(grid, mode, &DetectorNoise::default(), derive_seed(base, i as u64)))
        .collect()
}

pub const TABLE_FRAMES: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const TABLE_THRESHOLDS: [f64; 2] = [0.6, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScoreCell {
    pub case: AblationCase,
    pub threshold: f64,
    pub frame: usize,
    pub n_trials: usize,
    pub score: FValue,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FScoreTable {
    pub cells: Vec<FScoreCell>,
}

const CSV_HEADER: &str = "case,threshold,frame,precision,recall,f,TP,FP,FN";

impl FScoreTable {
    pub fn get(&self, case: AblationCase, threshold: f64, frame: usize) -> Option<&FScoreCell> {
        self.cells.iter().find(|c| c.case == case && c.threshold == threshold && c.frame == frame)
    }

    pub fn f(&self, case: AblationCase, threshold: f64, frame: usize) -> Option<f64> {
        self.get(case, threshold, frame).map(|c| c.score.f)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let s = c.score;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.case.name(),
                c.threshold,
                c.frame,
                s.precision,
                s.recall,
                s.f,
                s.tp,
                s.fp,
                s.fn_
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::InvalidArgument("missing f-score CSV header".into()));
        }
        let bad = |line: &str| Error::InvalidArgument(format!("bad f-score row {line:?}"));
        let mut cells = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            let score = FValue {
                precision: num(f[3])?,
                recall: num(f[4])?,
                f: num(f[5])?,
                tp: int(f[6])?,
                fp: int(f[7])?,
                fn_: int(f[8])?,
            };
            cells.push(FScoreCell {
                case: AblationCase::parse(f[0])?,
                threshold: num(f[1])?,
                frame: int(f[2])?,
                n_trials: score.tp + score.fp + score.fn_,
                score,
            });
        }
        Ok(FScoreTable { cells })
    }

    /// One block per threshold, one row per case, f-values by frame.
    pub fn to_text(&self) -> String {
        let mut thresholds: Vec<f64> = Vec::new();
        let mut frames: Vec<usize> = Vec::new();
        let mut cases: Vec<AblationCase> = Vec::new();
        for c in &self.cells {
            if !thresholds.contains(&c.threshold) {
                thresholds.push(c.threshold);
            }
            if !frames.contains(&c.frame) {
                frames.push(c.frame);
            }
            if !cases.contains(&c.case) {
                cases.push(c.case);
            }
        }
        let mut out = String::new();
        for th in thresholds {
            let _ = writeln!(out, "th_target = {th}");
            let _ = write!(out, "{:<12}", "case/frame");
            for f in &frames {
                let _ = write!(out, "{f:>7}");
            }
            out.push('\n');
            for case in &cases {
                let _ = write!(out, "{:<12}", case.name());
                for &f in &frames {
                    match self.f(*case, th, f) {
                        Some(v) => {
                            let _ = write!(out, "{v:>7.3}");
                        }
                        None => {
                            let _ = write!(out, "{:>7}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// A trained model and its test trials for one ablation case.
pub struct CaseInput<'a> {
    pub case: AblationCase,
    pub params: &'a ParamSet<f32>,
    pub config: &'a IenConfig,
    pub trials: &'a [Trial],
}

/// Per-trial probabilities at each evaluated frame, for plotting and the UI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub case: AblationCase,
    pub trial_seed: u64,
    pub truth: usize,
    pub frames: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Decides every trial at every frame and threshold and tabulates f-values.
pub fn run_ablation(
    inputs: &[CaseInput],
    frames: &[usize],
    thresholds: &[f64],
) -> Result<(FScoreTable, Vec<TraceRecord>)> {
    let mut table = FScoreTable::default();
    let mut traces = Vec::new();
    for input in inputs {
        if input.config.use_affordance != input.case.use_affordance() {
            return Err(Error::ConfigMismatch(format!(
                "{} model has use_affordance = {}",
                input.case.name(),
                input.config.use_affordance
            )));
        }
        if let Some(t) = input.trials.iter().find(|t| t.mode != input.case.mode()) {
            return Err(Error::ConfigMismatch(format!(
                "{} trial {} rendered as {:?}",
                input.case.name(),
                t.seed,
                t.mode
            )));
        }
        let per_trial: Vec<Vec<Probabilities>> = input
            .trials
            .iter()
            .map(|t| probability_trace(input.params, input.config, t, frames))
            .collect::<Result<_>>()?;
        let truths: Vec<usize> = input.trials.iter().map(|t| t.scene.target_index).collect();
        for &th in thresholds {
            for (fi, &frame) in frames.iter().enumerate() {
                let decisions: Vec<Option<usize>> =
                    per_trial.iter().map(|tr| decide(&tr[fi], th)).collect();
                table.cells.push(FScoreCell {
                    case: input.case,
                    threshold: th,
                    frame,
                    n_trials: truths.len(),
                    score: f_value(&decisions, &truths)?,
                });
            }
        }
        for (t, tr) in input.trials.iter().zip(&per_trial) {
            traces.push(TraceRecord {
                case: input.case,
                trial_seed: t.seed,
                truth: t.scene.target_index,
                frames: frames.to_vec(),
                probabilities: tr.iter().map(|p| p.values.clone()).collect(),
            });
        }
    }
    Ok((table, traces))
}

/// Traces as line-delimited JSON.
pub fn traces_to_jsonl(traces: &[TraceRecord]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out += &serde_json::to_string(t)?;
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f64]) -> Probabilities {
        Probabilities { values: v.to_vec(), degenerate: false }
    }

    #[test]
    fn uniform_mass_in_box() {
        let h = Tensor::full(&[1, 64, 64], 1.0f32 / 4096.0);
        let c = object_confidences(&h, &[BBox { x: 3, y: 5, w: 16, h: 16 }]).unwrap();
        assert!((c[0] - 0.0625).abs() < 1e-9);
        let all = object_confidences(&h, &[BBox { x: 0, y: 0, w: 64, h: 64 }]).unwrap();
        assert!((all[0] - 1.0).abs() < 1e-6);
        assert!(matches!(
            object_confidences(&h, &[BBox { x: 60, y: 0, w: 5, h: 5 }]),
            Err(Error::BboxOutOfGrid(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let p = normalize_confidences(&[0.3, 0.1]);
        assert!((p.values[0] - 0.75).abs() < 1e-12 && (p.values[1] - 0.25).abs() < 1e-12);
        let d = normalize_confidences(&[0.0, 0.0, 0.0]);
        assert!(d.degenerate);
        assert_eq!(d.values, vec![1.0 / 3.0; 3]);
        assert_eq!(decide(&d, 0.1), None);
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(&probs(&[0.75, 0.25]), 0.6), Some(0));
        assert_eq!(decide(&probs(&[0.55, 0.45]), 0.6), None);
        assert_eq!(decide(&probs(&[0.6, 0.4]), 0.6), None);
        assert_eq!(decide(&probs(&[0.4, 0.4, 0.2]), 0.3), Some(0));
        assert_eq!(decide(&probs(&[1.0, 0.0]), 1.0), None);
    }

    #[test]
    fn f_value_examples() {
        let truths = vec![0usize; 50];
        let mut d = vec![Some(0); 30];
        d.extend(vec![Some(1); 10]);
        d.extend(vec![None; 10]);
        let s = f_value(&d, &truths).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (30, 10, 10));
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.6).abs() < 1e-12);
        assert!((s.f - 2.0 * 0.45 / 1.35).abs() < 1e-12);
        assert_eq!(f_value(&vec![Some(0); 5], &[0; 5]).unwrap().f, 1.0);
        let none = f_value(&[None, None], &[0, 1]).unwrap();
        assert_eq!((none.precision, none.recall, none.f), (0.0, 0.0, 0.0));
        assert!(matches!(f_value(&[None], &[0, 1]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn earliest_frame_in_trace() {
        let trace: Vec<Probabilities> =
            [0.5, 0.55, 0.58, 0.59, 0.6, 0.7, 0.9].iter().map(|&p| probs(&[p, 1.0 - p])).collect();
        assert_eq!(earliest_in_trace(&trace, 0.6), Some(6));
        assert_eq!(earliest_in_trace(&trace, 1.0), None);
    }

    #[test]
    fn csv_round_trip() {
        let cell = |case, th, frame, f| FScoreCell {
            case,
            threshold: th,
            frame,
            n_trials: 3,
            score: FValue { precision: f, recall: f / 3.0, f: f * 0.7, tp: 1, fp: 1, fn_: 1 },
        };
        let t = FScoreTable {
            cells: vec![cell(AblationCase::DepthAO, 0.6, 2, 0.1), cell(AblationCase::RgbO, 0.8, 12, 1.0 / 7.0)],
        };
        assert_eq!(FScoreTable::from_csv(&t.to_csv()).unwrap(), t);
        assert!(t.to_text().contains("depth-ao"));
    }
}
