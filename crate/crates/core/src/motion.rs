//! Simulated reaching hands: minimum-jerk trajectories with grasp preshaping,
//! rendered as depth-like or RGB-like frames in the scene's pixel frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AffordanceClass, Grid, Scene};
use crate::tensor::Tensor;

/// Frames per recorded reach.
pub const REACH_FRAMES: usize = 60;
pub const REACH_FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preshape {
    WrapPre,
    HandlePre,
}

impl Preshape {
    fn code(self) -> f64 {
        match self {
            Preshape::WrapPre => 0.0,
            Preshape::HandlePre => 1.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v {
            c if c == 0.0 => Ok(Preshape::WrapPre),
            c if c == 1.0 => Ok(Preshape::HandlePre),
            _ => Err(Error::InvalidArgument(format!("unknown preshape code {v}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    /// Hand centroid `(x, y)` in grid pixels.
    pub position: (f64, f64),
    /// 0 = closed, 1 = fully open.
    pub aperture: f64,
    pub preshape: Preshape,
    /// Apparent hand radius in pixels.
    pub scale: f64,
}

/// Rendering modes for hand frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RenderMode {
    DepthLike,
    RgbLike,
    RgbHandExtracted,
}

impl RenderMode {
    pub fn channels(self) -> usize {
        match self {
            RenderMode::DepthLike => 1,
            RenderMode::RgbLike | RenderMode::RgbHandExtracted => 3,
        }
    }
}

/// Minimum-jerk progress `10τ³ − 15τ⁴ + 6τ⁵` for `τ ∈ [0, 1]`.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Variability of simulated reaches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    /// Per-frame Gaussian position noise (px).
    pub position_sigma: f64,
    /// Maximum lateral bow of the path (px).
    pub curvature_max: f64,
    /// Hand radius range at the start of the reach.
    pub start_radius: (f64, f64),
    /// Hand radius range on arrival.
    pub end_radius: (f64, f64),
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            position_sigma: 0.8,
            curvature_max: 6.0,
            start_radius: (4.0, 7.0),
            end_radius: (8.0, 12.0),
        }
    }
}

impl MotionConfig {
    /// Defaults rescaled from the 64x64 reference grid.
    pub fn for_grid(grid: Grid) -> Self {
        let k = grid.width.min(grid.height) as f64 / 64.0;
        let d = MotionConfig::default();
        MotionConfig {
            position_sigma: d.position_sigma * k,
            curvature_max: d.curvature_max * k,
            start_radius: (d.start_radius.0 * k, d.start_radius.1 * k),
            end_radius: (d.end_radius.0 * k, d.end_radius.1 * k),
        }
    }

    /// Same hand sizes, no positional noise and a straight path.
    pub fn noiseless(self) -> Self {
        MotionConfig { position_sigma: 0.0, curvature_max: 0.0, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<HandState>,
    pub fps: f64,
    pub start: (f64, f64),
    pub target: (f64, f64),
    pub duration_s: f64,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    fps: f64,
    duration_s: f64,
    start: [f64; 2],
    target: [f64; 2],
    frames: Vec<[f64; 5]>,
}

impl Trajectory {
    /// JSON with each frame as `[x, y, aperture, preshape, scale]`
    /// (`preshape` 0 = wrap, 1 = handle).
    pub fn to_json(&self) -> Result<String> {
        let j = TrajectoryJson {
            fps: self.fps,
            duration_s: self.duration_s,
            start: [self.start.0, self.start.1],
            target: [self.target.0, self.target.1],
            frames: self
                .frames
                .iter()
                .map(|f| [f.position.0, f.position.1, f.aperture, f.preshape.code(), f.scale])
                .collect(),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: TrajectoryJson = serde_json::from_str(s)?;
        let frames = j
            .frames
            .iter()
            .map(|f| {
                Ok(HandState {
                    position: (f[0], f[1]),
                    aperture: f[2],
                    preshape: Preshape::from_code(f[3])?,
                    scale: f[4],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Trajectory {
            frames,
            fps: j.fps,
            start: (j.start[0], j.start[1]),
            target: (j.target[0], j.target[1]),
            duration_s: j.duration_s,
        })
    }
}

/// Grasp type and grasp point for reaching the scene's target from `start`.
///
/// The handle is taken when it faces the approaching hand; otherwise the
/// body is wrapped.
pub fn grasp_plan(scene: &Scene, start: (f64, f64)) -> (Preshape, (f64, f64)) {
    let target = scene.target();
    let masks = target.masks();
    let body = masks
        .centroid(AffordanceClass::WrapGrasp)
        .unwrap_or_else(|| target.bbox.center());
    let (hx, hy) = target.handle_direction();
    let (cx, cy) = target.bbox.center();
    let facing = hx * (start.0 - cx) + hy * (start.1 - cy) > 0.0;
    match masks.centroid(AffordanceClass::HandleGrasp) {
        Some(handle) if facing => (Preshape::HandlePre, handle),
        _ => (Preshape::WrapPre, body),
    }
}

/// Hand entry point along the bottom edge, on the right-hand side.
pub fn sample_start(grid: Grid, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4152_54);
    let w = grid.width as f64;
    (rng.random_range(0.45 * w..0.85 * w), grid.height as f64 - 2.0)
}

/// [`generate_reach_with`] using the grid-scaled default [`MotionConfig`].
pub fn generate_reach(start: (f64, f64), scene: &Scene, seed: u64) -> Trajectory {
    generate_reach_with(&MotionConfig::for_grid(scene.grid), start, scene, seed)
}

/// Simulates a 60-frame reach from `start` to the target's grasp point.
pub fn generate_reach_with(
    cfg: &MotionConfig,
    start: (f64, f64),
    scene: &Scene,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (preshape, target) = grasp_plan(scene, start);
    let r0 = uniform(&mut rng, cfg.start_radius);
    let r1 = uniform(&mut rng, cfg.end_radius);
    let bow = uniform(&mut rng, (-cfg.curvature_max, cfg.curvature_max));
    let peak_aperture = rng.random_range(0.8..1.0);
    let base_aperture = 0.3;
    let noise = Normal::new(0.0, cfg.position_sigma.max(0.0)).expect("valid sigma");

    let (dx, dy) = (target.0 - start.0, target.1 - start.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-9);
    let (nx, ny) = (-dy / len, dx / len);

    let frames = (0..REACH_FRAMES)
        .map(|i| {
            let tau = i as f64 / REACH_FRAMES as f64;
            let s = min_jerk(tau);
            let lateral = bow * (std::f64::consts::PI * s).sin();
            // tremor fades out at both ends so start and grasp point are hit
            let envelope = (std::f64::consts::PI * s).sin();
            let (ex, ey) = if cfg.position_sigma > 0.0 {
                (envelope * noise.sample(&mut rng), envelope * noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            HandState {
                position: (
                    start.0 + s * dx + lateral * nx + ex,
                    start.1 + s * dy + lateral * ny + ey,
                ),
                aperture: base_aperture
                    + (peak_aperture - base_aperture) * (std::f64::consts::PI * tau).sin(),
                preshape,
                scale: r0 + (r1 - r0) * s,
            }
        })
        .collect();
    Trajectory {
        frames,
        fps: REACH_FPS,
        start,
        target,
        duration_s: REACH_FRAMES as f64 / REACH_FPS,
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Pixel sets making up the hand silhouette, before clipping to the grid.
struct HandShape {
    palm: Vec<(i64, i64)>,
    /// Finger lobes; `true` marks fingers curled towards the palm.
    lobes: Vec<(Vec<(i64, i64)>, bool)>,
}

fn disc(cx: i64, cy: i64, r: f64) -> Vec<(i64, i64)> {
    let ri = r.ceil() as i64;
    let mut px = Vec::new();
    for y in -ri..=ri {
        for x in -ri..=ri {
            if ((x * x + y * y) as f64) <= r * r {
                px.push((cx + x, cy + y));
            }
        }
    }
    px
}

/// Finger directions (radians from "up", positive to the right) and whether
/// each finger is curled.
fn finger_layout(preshape: Preshape, aperture: f64) -> Vec<(f64, bool)> {
    let deg = std::f64::consts::PI / 180.0;
    match preshape {
        Preshape::WrapPre => {
            let step = (50.0 + 20.0 * aperture) * deg;
            let mut f: Vec<(f64, bool)> =
                (0..4).map(|k| ((k as f64 - 1.5) * step, false)).collect();
            f.push((-(1.5 * step + 75.0 * deg), false));
            f
        }
        Preshape::HandlePre => vec![
            (10.0 * deg, false),
            (-(50.0 + 15.0 * aperture) * deg, false),
            (75.0 * deg, true),
            (130.0 * deg, true),
            (185.0 * deg, true),
        ],
    }
}

/// Palm disc plus five finger lobes, all pairwise disjoint so the silhouette
/// area depends on the scale alone.
fn hand_shape(state: &HandState) -> HandShape {
    let cx = state.position.0.round() as i64;
    let cy = state.position.1.round() as i64;
    let r = state.scale.max(1.0);
    let palm_r = 0.45 * r;
    let lobe_r = (0.17 * r).max(0.8);
    let palm = disc(cx, cy, palm_r);
    let mut taken: std::collections::HashSet<(i64, i64)> = palm.iter().copied().collect();
    let mut lobes = Vec::new();
    for (angle, curled) in finger_layout(state.preshape, state.aperture) {
        let reach = if curled { 0.0 } else { 0.25 * r * state.aperture };
        let mut dist = palm_r + lobe_r + 0.6 + reach;
        let (sx, sy) = (angle.sin(), -angle.cos());
        loop {
            let lx = (cx as f64 + sx * dist).round() as i64;
            let ly = (cy as f64 + sy * dist).round() as i64;
            let lobe = disc(lx, ly, lobe_r);
            let blocked = lobe.iter().any(|p| {
                taken.contains(p)
                    || [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|(ox, oy)| taken.contains(&(p.0 + ox, p.1 + oy)))
            });
            if !blocked {
                taken.extend(lobe.iter().copied());
                lobes.push((lobe, curled));
                break;
            }
            dist += 0.5;
        }
    }
    HandShape { palm, lobes }
}

/// Binary hand mask clipped to the grid, row-major `H*W`.
pub fn hand_mask(state: &HandState, grid: Grid) -> Vec<bool> {
    let mut mask = vec![false; grid.pixels()];
    let shape = hand_shape(state);
    let all = shape.palm.iter().chain(shape.lobes.iter().flat_map(|(l, _)| l.iter()));
    for &(x, y) in all {
        if x >= 0 && y >= 0 && (x as usize) < grid.width && (y as usize) < grid.height {
            mask[y as usize * grid.width + x as usize] = true;
        }
    }
    mask
}

/// Unclipped silhouette pixel count.
pub fn silhouette_area(state: &HandState) -> usize {
    let s = hand_shape(state);
    s.palm.len() + s.lobes.iter().map(|(l, _)| l.len()).sum::<usize>()
}

const SKIN: [f32; 3] = [0.87, 0.66, 0.53];

/// Per-trial RGB backdrop: flat base colour, random rectangles (some skin
/// coloured) and pixel noise.
fn clutter(grid: Grid, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1u64 << 32);
    let plane = grid.pixels();
    let mut img = vec![0.0f32; 3 * plane];
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    for c in 0..3 {
        img[c * plane..(c + 1) * plane].fill(base[c]);
    }
    let n_rects = rng.random_range(6..12);
    for _ in 0..n_rects {
        let color: [f32; 3] = if rng.random::<f64>() < 0.3 {
            let k = rng.random_range(0.7..1.1);
            SKIN.map(|v| v * k)
        } else {
            std::array::from_fn(|_| rng.random_range(0.05..0.95))
        };
        let w = rng.random_range(2..=(grid.width / 3).max(3));
        let h = rng.random_range(2..=(grid.height / 3).max(3));
        let x0 = rng.random_range(0..grid.width.saturating_sub(w).max(1));
        let y0 = rng.random_range(0..grid.height.saturating_sub(h).max(1));
        for y in y0..(y0 + h).min(grid.height) {
            for x in x0..(x0 + w).min(grid.width) {
                for c in 0..3 {
                    img[c * plane + y * grid.width + x] = color[c];
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.02, 1.0);
    }
    img
}

fn render_with_backdrop(
    state: &HandState,
    mode: RenderMode,
    grid: Grid,
    backdrop: Option<&[f32]>,
    frame_seed: u64,
) -> Tensor<f32> {
    let plane = grid.pixels();
    let shape = hand_shape(state);
    let in_grid = |x: i64, y: i64| {
        (x >= 0 && y >= 0 && (x as usize) < grid.width && (y as usize) < grid.height)
            .then(|| y as usize * grid.width + x as usize)
    };
    match mode {
        RenderMode::DepthLike => {
            let mut img = vec![0.0f32; plane];
            let near = (0.3 + 0.7 * ((state.scale - 4.0) / 8.0).clamp(0.0, 1.0)) as f32;
            let palm_r = (0.45 * state.scale.max(1.0)) as f32;
            let (cx, cy) = (state.position.0.round() as i64, state.position.1.round() as i64);
            for &(x, y) in &shape.palm {
                if let Some(i) = in_grid(x, y) {
                    let d = (((x - cx).pow(2) + (y - cy).pow(2)) as f32).sqrt();
                    img[i] = near * (1.0 - 0.25 * (d / palm_r.max(1.0)).min(1.0));
                }
            }
            for (lobe, curled) in &shape.lobes {
                let v = if *curled { near } else { 0.7 * near };
                for &(x, y) in lobe {
                    if let Some(i) = in_grid(x, y) {
                        img[i] = v.min(1.0);
                    }
                }
            }
            Tensor::new(&[1, grid.height, grid.width], img).expect("frame shape")
        }
        RenderMode::RgbLike | RenderMode::RgbHandExtracted => {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            let gain: f32 = rng.random_range(0.55..1.0);
            let mut img = match (mode, backdrop) {
                (RenderMode::RgbLike, Some(b)) => b.to_vec(),
                (RenderMode::RgbLike, None) => clutter(grid, frame_seed),
                _ => vec![0.0f32; 3 * plane],
            };
            let all = shape.palm.iter().chain(shape.lobes.iter().flat_map(|(l, _)| l.iter()));
            for &(x, y) in all {
                if let Some(i) = in_grid(x, y) {
                    let speckle: f32 = rng.random_range(0.75..1.0);
                    for c in 0..3 {
                        img[c * plane + i] = (SKIN[c] * gain * speckle).clamp(0.0, 1.0);
                    }
                }
            }
            Tensor::new(&[3, grid.height, grid.width], img).expect("frame shape")
        }
    }
}

/// Renders one frame. Values lie in `[0, 1]`.
pub fn render_hand_frame(state: &HandState, mode: RenderMode, grid: Grid, seed: u64) -> Tensor<f32> {
    render_with_backdrop(state, mode, grid, None, seed)
}

/// Renders all frames into `[T, C, H, W]` with a backdrop fixed per trial.
pub fn render_sequence(traj: &Trajectory, mode: RenderMode, grid: Grid, seed: u64) -> Tensor<f32> {
    let backdrop = (mode == RenderMode::RgbLike).then(|| clutter(grid, seed));
    let frames: Vec<Tensor<f32>> = traj
        .frames
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let frame_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            render_with_backdrop(st, mode, grid, backdrop.as_deref(), frame_seed)
        })
        .collect();
    Tensor::stack(&frames).expect("uniform frame shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    const GRID: Grid = Grid::new(64, 64);

    #[test]
    fn min_jerk_boundaries() {
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
        assert!((min_jerk(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn straight_reach_passes_midpoint() {
        let scene = generate_scene(2, GRID, 3).unwrap();
        let start = sample_start(GRID, 3);
        let cfg = MotionConfig::default().noiseless();
        let traj = generate_reach_with(&cfg, start, &scene, 3);
        assert_eq!(traj.frames.len(), 60);
        let mid = traj.frames[30].position;
        let expect = ((start.0 + traj.target.0) / 2.0, (start.1 + traj.target.1) / 2.0);
        assert!((mid.0 - expect.0).abs() < 1e-9 && (mid.1 - expect.1).abs() < 1e-9);
        assert_eq!(traj.frames[0].position, start);
    }

    #[test]
    fn preshape_follows_handle_accessibility() {
        for seed in 0..100 {
            let scene = generate_scene(3, GRID, seed).unwrap();
            let start = sample_start(GRID, seed);
            let (pre, point) = grasp_plan(&scene, start);
            let t = scene.target();
            let m = t.masks();
            let (hx, hy) = t.handle_direction();
            let (cx, cy) = t.bbox.center();
            if hx * (start.0 - cx) + hy * (start.1 - cy) > 0.0 {
                assert_eq!(pre, Preshape::HandlePre);
                assert_eq!(Some(point), m.centroid(AffordanceClass::HandleGrasp));
            } else {
                assert_eq!(pre, Preshape::WrapPre);
                assert_eq!(Some(point), m.centroid(AffordanceClass::WrapGrasp));
            }
        }
    }

    #[test]
    fn depth_background_is_zero_and_area_grows_with_scale() {
        let mut st = HandState {
            position: (32.0, 32.0),
            aperture: 0.5,
            preshape: Preshape::WrapPre,
            scale: 4.0,
        };
        let mut last = 0;
        for k in 0..20 {
            st.scale = 4.0 + k as f64 * 0.4;
            let img = render_hand_frame(&st, RenderMode::DepthLike, GRID, 1);
            let mask = hand_mask(&st, GRID);
            let mut area = 0;
            for (v, m) in img.data().iter().zip(&mask) {
                if *m {
                    assert!(*v > 0.0 && *v <= 1.0);
                    area += 1;
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
            assert!(area >= last);
            last = area;
        }
    }

    #[test]
    fn extracted_rgb_is_masked_rgb() {
        let st = HandState {
            position: (20.3, 40.7),
            aperture: 0.6,
            preshape: Preshape::HandlePre,
            scale: 7.0,
        };
        let rgb = render_hand_frame(&st, RenderMode::RgbLike, GRID, 9);
        let ext = render_hand_frame(&st, RenderMode::RgbHandExtracted, GRID, 9);
        let mask = hand_mask(&st, GRID);
        let plane = GRID.pixels();
        for c in 0..3 {
            for p in 0..plane {
                let (a, b) = (rgb.data()[c * plane + p], ext.data()[c * plane + p]);
                if mask[p] {
                    assert_eq!(a, b);
                } else {
                    assert_eq!(b, 0.0);
                    assert!(a > 0.0);
                }
            }
        }
        assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn endpoints_and_scale_over_seeds() {
        for seed in 0..200 {
            let scene = generate_scene(2 + (seed % 2) as usize, GRID, seed).unwrap();
            let start = sample_start(GRID, seed);
            let traj = generate_reach(start, &scene, seed);
            let (_, grasp) = grasp_plan(&scene, start);
            let last = traj.frames.last().unwrap().position;
            let err = ((last.0 - grasp.0).powi(2) + (last.1 - grasp.1).powi(2)).sqrt();
            assert!(err <= 1.0, "seed {seed}: {err}");
            for w in traj.frames.windows(2) {
                assert!(w[1].scale > w[0].scale);
            }
            assert!(traj.frames.iter().all(|f| (0.0..=1.0).contains(&f.aperture)));
        }
    }

    #[test]
    fn preshapes_have_distinct_silhouettes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let base = HandState {
                position: (rng.random_range(12.0..52.0), rng.random_range(12.0..52.0)),
                aperture: rng.random_range(0.3..1.0),
                preshape: Preshape::WrapPre,
                scale: rng.random_range(4.0..12.0),
            };
            let other = HandState { preshape: Preshape::HandlePre, ..base };
            let (a, b) = (hand_mask(&base, GRID), hand_mask(&other, GRID));
            let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
            assert!(differ as f64 >= 0.05 * union as f64, "{differ}/{union}");
        }
    }

    #[test]
    fn sequence_is_deterministic_and_depth_area_grows() {
        let scene = generate_scene(3, GRID, 21).unwrap();
        let start = sample_start(GRID, 21);
        let traj = generate_reach_with(&MotionConfig::default().noiseless(), start, &scene, 21);
        let a = render_sequence(&traj, RenderMode::RgbLike, GRID, 5);
        let b = render_sequence(&traj, RenderMode::RgbLike, GRID, 5);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[60, 3, 64, 64]);
        let depth = render_sequence(&traj, RenderMode::DepthLike, GRID, 5);
        let plane = GRID.pixels();
        let mut last = 0;
        for f in 0..60 {
            let area = depth.data()[f * plane..(f + 1) * plane].iter().filter(|v| **v > 0.0).count();
            assert!(area >= last, "frame {f}");
            last = area;
        }
    }

    #[test]
    fn trajectory_json_round_trip() {
        let scene = generate_scene(2, GRID, 8).unwrap();
        let traj = generate_reach(sample_start(GRID, 8), &scene, 8);
        let back = Trajectory::from_json(&traj.to_json().unwrap()).unwrap();
        assert_eq!(back, traj);
    }
}
