//! Procedural tabletop scenes of cups and the affordance tensor a detector
//! would report for them.
//!
//! The five output channels are, in order: contain, wrap-grasp, handle-grasp,
//! background, and the union of filled bounding boxes.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of channels produced by [`render_affordance_channels`].
pub const AFFORDANCE_CHANNELS: usize = 5;
/// Channel index of the bounding-box mask.
pub const BBOX_CHANNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AffordanceClass {
    Contain,
    WrapGrasp,
    HandleGrasp,
    Background,
}

impl AffordanceClass {
    pub const ALL: [AffordanceClass; 4] = [
        AffordanceClass::Contain,
        AffordanceClass::WrapGrasp,
        AffordanceClass::HandleGrasp,
        AffordanceClass::Background,
    ];

    pub fn channel(self) -> usize {
        self as usize
    }
}

/// Integer rectangle in grid pixels: columns `x..x+w`, rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    /// Centroid in pixel-center coordinates `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + (self.w as f64 - 1.0) / 2.0, self.y as f64 + (self.h as f64 - 1.0) / 2.0)
    }

    pub fn fits(&self, grid: Grid) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= grid.width && self.y + self.h <= grid.height
    }
}

/// Scene resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl From<[usize; 2]> for Grid {
    fn from([height, width]: [usize; 2]) -> Self {
        Grid { height, width }
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.height, g.width]
    }
}

impl Grid {
    pub const fn new(height: usize, width: usize) -> Self {
        Grid { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Per-object affordance masks in bbox-local coordinates (row-major, `w*h`).
#[derive(Clone, Debug, PartialEq)]
pub struct CupMasks {
    pub bbox: BBox,
    pub contain: Vec<bool>,
    pub wrap: Vec<bool>,
    pub handle: Vec<bool>,
}

impl CupMasks {
    pub fn mask(&self, class: AffordanceClass) -> Option<&[bool]> {
        match class {
            AffordanceClass::Contain => Some(&self.contain),
            AffordanceClass::WrapGrasp => Some(&self.wrap),
            AffordanceClass::HandleGrasp => Some(&self.handle),
            AffordanceClass::Background => None,
        }
    }

    /// Grid pixels `(x, y)` set in the mask of `class`.
    pub fn pixels(&self, class: AffordanceClass) -> Vec<(usize, usize)> {
        let Some(m) = self.mask(class) else { return Vec::new() };
        m.iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| (self.bbox.x + i % self.bbox.w, self.bbox.y + i / self.bbox.w))
            .collect()
    }

    /// Mean pixel position of a mask, or `None` when it is empty.
    pub fn centroid(&self, class: AffordanceClass) -> Option<(f64, f64)> {
        let px = self.pixels(class);
        if px.is_empty() {
            return None;
        }
        let n = px.len() as f64;
        let (sx, sy) = px.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        Some((sx / n, sy / n))
    }
}

/// One cup. Masks are not stored; [`SceneObject::masks`] regenerates them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub bbox: BBox,
    /// Direction of the handle from the body centre, radians in image coordinates.
    pub orientation: f64,
    pub style_seed: u32,
}

/// Space kept between the cup body and the bbox edge for the handle.
const HANDLE_MARGIN: f64 = 3.0;

impl SceneObject {
    /// Unit direction the handle points to.
    pub fn handle_direction(&self) -> (f64, f64) {
        (self.orientation.cos(), self.orientation.sin())
    }

    /// Rasterizes the cup template: a body rectangle inset from the bbox, a
    /// top ellipse (contain), the rest of the body (wrap-grasp) and a handle
    /// blob on the side given by `orientation` (handle-grasp).
    pub fn masks(&self) -> CupMasks {
        let b = self.bbox;
        let mut style = ChaCha8Rng::seed_from_u64(self.style_seed as u64);
        let top_frac: f64 = style.random_range(0.25..0.4);
        let handle_r: f64 = style.random_range(1.2..1.9);

        let (w, h) = (b.w as f64, b.h as f64);
        let m = HANDLE_MARGIN.min((w.min(h) - 2.0) / 4.0).max(1.0);
        let (bx0, bx1) = (m, w - m);
        let (by0, by1) = (m, h - m);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let half_w = (bx1 - bx0) / 2.0;
        let half_h = (by1 - by0) / 2.0;
        let ell_h = ((by1 - by0) * top_frac).max(2.0);
        let ell_cy = by0 + ell_h / 2.0 - 0.5;

        let (dx, dy) = self.handle_direction();
        let tx = if dx.abs() > 1e-9 { half_w / dx.abs() } else { f64::INFINITY };
        let ty = if dy.abs() > 1e-9 { half_h / dy.abs() } else { f64::INFINITY };
        let reach = tx.min(ty) + m / 2.0;
        let (hx, hy) = (cx + dx * reach, cy + dy * reach);

        let n = b.w * b.h;
        let mut masks = CupMasks {
            bbox: b,
            contain: vec![false; n],
            wrap: vec![false; n],
            handle: vec![false; n],
        };
        for v in 0..b.h {
            for u in 0..b.w {
                let (uf, vf) = (u as f64, v as f64);
                let i = v * b.w + u;
                let in_body = uf + 0.5 > bx0 && uf + 0.5 < bx1 && vf + 0.5 > by0 && vf + 0.5 < by1;
                if in_body {
                    let ex = (uf - cx) / half_w.max(0.5);
                    let ey = (vf - ell_cy) / (ell_h / 2.0);
                    if ex * ex + ey * ey <= 1.0 {
                        masks.contain[i] = true;
                    } else {
                        masks.wrap[i] = true;
                    }
                } else if (uf - hx).powi(2) + (vf - hy).powi(2) <= handle_r * handle_r {
                    masks.handle[i] = true;
                }
            }
        }
        masks
    }
}

/// Cups on a table with one designated target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid: Grid,
    pub seed: u64,
    pub target_index: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_index]
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if !(2..=3).contains(&n) {
            return Err(Error::InvalidArgument(format!("scene has {n} objects")));
        }
        if self.target_index >= n {
            return Err(Error::InvalidArgument(format!("target index {}", self.target_index)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.fits(self.grid) {
                return Err(Error::BboxOutOfGrid(o.bbox.into()));
            }
            for other in &self.objects[i + 1..] {
                if o.bbox.overlaps(&other.bbox) {
                    return Err(Error::InvalidArgument(format!(
                        "objects {} and {} overlap",
                        o.id, other.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Scene> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Placement parameters for [`generate_scene_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_size: usize,
    pub max_size: usize,
    /// Clearance from the left, right and top grid edges.
    pub edge_margin: usize,
    /// Cups stay above this fraction of the grid height; the hand enters below.
    pub table_depth: f64,
    /// Minimum free pixels between two bboxes.
    pub gap: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_size: 12,
            max_size: 20,
            edge_margin: 4,
            table_depth: 0.75,
            gap: 1,
            max_attempts: 2000,
        }
    }
}

impl SceneConfig {
    /// Default placement scaled from the 64x64 reference grid.
    pub fn for_grid(grid: Grid) -> Self {
        let k = grid.width.min(grid.height) as f64 / 64.0;
        let d = SceneConfig::default();
        let scale = |v: usize| ((v as f64 * k).round() as usize).max(1);
        SceneConfig {
            min_size: scale(d.min_size).max(6),
            max_size: scale(d.max_size).max(7),
            edge_margin: scale(d.edge_margin),
            ..d
        }
    }
}

/// [`generate_scene_with`] using [`SceneConfig::for_grid`].
pub fn generate_scene(n_objects: usize, grid: Grid, seed: u64) -> Result<Scene> {
    generate_scene_with(&SceneConfig::for_grid(grid), n_objects, grid, seed)
}

/// Places `n_objects` cups by rejection sampling; deterministic per seed.
pub fn generate_scene_with(
    cfg: &SceneConfig,
    n_objects: usize,
    grid: Grid,
    seed: u64,
) -> Result<Scene> {
    if !(2..=3).contains(&n_objects) {
        return Err(Error::InvalidArgument(format!("n_objects must be 2 or 3, got {n_objects}")));
    }
    let fail = Error::PlacementFailure { objects: n_objects, height: grid.height, width: grid.width };
    let x_lo = cfg.edge_margin;
    let y_lo = cfg.edge_margin;
    let x_hi = grid.width.saturating_sub(cfg.edge_margin);
    let y_hi = ((grid.height as f64) * cfg.table_depth).floor() as usize;
    if x_hi <= x_lo + cfg.min_size || y_hi <= y_lo + cfg.min_size {
        return Err(fail);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(fail);
        }
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let orientation = rng.random_range(0.0..TAU);
        let style_seed: u32 = rng.random();
        if x_lo + w > x_hi || y_lo + h > y_hi {
            continue;
        }
        let x = rng.random_range(x_lo..=x_hi - w);
        let y = rng.random_range(y_lo..=y_hi - h);
        let bbox = BBox { x, y, w, h };
        let padded = BBox {
            x: x.saturating_sub(cfg.gap),
            y: y.saturating_sub(cfg.gap),
            w: w + 2 * cfg.gap,
            h: h + 2 * cfg.gap,
        };
        if objects.iter().any(|o| o.bbox.overlaps(&padded)) {
            // restart the layout so early placements do not box in later ones
            if attempts % 50 == 0 {
                objects.clear();
            }
            continue;
        }
        objects.push(SceneObject { id: objects.len(), bbox, orientation, style_seed });
    }
    let target_index = rng.random_range(0..n_objects);
    Ok(Scene { grid, seed, target_index, objects })
}

/// Renders the five-channel affordance tensor for a scene.
pub fn render_affordance_channels(scene: &Scene) -> Tensor<f32> {
    let Grid { height, width } = scene.grid;
    let plane = height * width;
    let mut data = vec![0.0f32; AFFORDANCE_CHANNELS * plane];
    for obj in &scene.objects {
        let masks = obj.masks();
        for class in [AffordanceClass::Contain, AffordanceClass::WrapGrasp, AffordanceClass::HandleGrasp]
        {
            for (x, y) in masks.pixels(class) {
                if x < width && y < height {
                    data[class.channel() * plane + y * width + x] = 1.0;
                }
            }
        }
        fill_bbox(&mut data[BBOX_CHANNEL * plane..(BBOX_CHANNEL + 1) * plane], width, &obj.bbox, 1.0);
    }
    for p in 0..plane {
        let any = data[p] > 0.0 || data[plane + p] > 0.0 || data[2 * plane + p] > 0.0;
        data[3 * plane + p] = if any { 0.0 } else { 1.0 };
    }
    Tensor::new(&[AFFORDANCE_CHANNELS, height, width], data).expect("channel shape")
}

fn fill_bbox(plane: &mut [f32], width: usize, b: &BBox, value: f32) {
    for y in b.y..b.y + b.h {
        plane[y * width + b.x..y * width + b.x + b.w].fill(value);
    }
}

/// Error model for the simulated affordance detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Probability that a set affordance pixel is dropped to 0.
    pub mask_dropout: f64,
    /// Maximum displacement of each bbox edge, in pixels.
    pub boundary_jitter: usize,
    /// Probability that a non-target object is missed entirely.
    pub false_negative: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise { mask_dropout: 0.05, boundary_jitter: 2, false_negative: 0.02 }
    }
}

impl DetectorNoise {
    pub const NONE: DetectorNoise =
        DetectorNoise { mask_dropout: 0.0, boundary_jitter: 0, false_negative: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mask_dropout", self.mask_dropout), ("false_negative", self.false_negative)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Corrupts detector output: drops whole non-target objects (never below two
/// objects), jitters bbox edges, and drops affordance pixels. Returns the noisy
/// channels and the scene as the detector reports it.
pub fn apply_detector_noise(
    channels: &Tensor<f32>,
    scene: &Scene,
    noise: &DetectorNoise,
    seed: u64,
) -> Result<(Tensor<f32>, Scene)> {
    noise.validate()?;
    let (c, height, width) = channels.dims3()?;
    if c != AFFORDANCE_CHANNELS || (height, width) != (scene.grid.height, scene.grid.width) {
        return Err(Error::ShapeMismatch(format!(
            "channels {:?} for a {}x{} scene",
            channels.shape(),
            scene.grid.height,
            scene.grid.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut out = channels.clone();

    let mut kept: Vec<bool> = vec![true; scene.objects.len()];
    let mut remaining = scene.objects.len();
    for (i, keep) in kept.iter_mut().enumerate() {
        let u: f64 = rng.random();
        if i != scene.target_index && u < noise.false_negative && remaining > 2 {
            *keep = false;
            remaining -= 1;
        }
    }

    let j = noise.boundary_jitter as i64;
    let mut boxes: Vec<BBox> = scene.bboxes();
    for i in 0..boxes.len() {
        let d: [i64; 4] = std::array::from_fn(|_| rng.random_range(-j..=j));
        if !kept[i] {
            continue;
        }
        let b = boxes[i];
        let x0 = (b.x as i64 + d[0]).clamp(0, width as i64 - 1);
        let y0 = (b.y as i64 + d[1]).clamp(0, height as i64 - 1);
        let x1 = (b.x as i64 + b.w as i64 + d[2]).clamp(x0 + 1, width as i64);
        let y1 = (b.y as i64 + b.h as i64 + d[3]).clamp(y0 + 1, height as i64);
        let cand = BBox {
            x: x0 as usize,
            y: y0 as usize,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        };
        let clash = (0..boxes.len()).any(|k| k != i && kept[k] && boxes[k].overlaps(&cand));
        if !clash {
            boxes[i] = cand;
        }
    }

    let changed = kept.iter().any(|k| !k) || boxes != scene.bboxes();
    if changed {
        let data = out.data_mut();
        for (i, obj) in scene.objects.iter().enumerate() {
            if !kept[i] {
                let masks = obj.masks();
                for class in
                    [AffordanceClass::Contain, AffordanceClass::WrapGrasp, AffordanceClass::HandleGrasp]
                {
                    for (x, y) in masks.pixels(class) {
                        data[class.channel() * plane + y * width + x] = 0.0;
                        data[AffordanceClass::Background.channel() * plane + y * width + x] = 1.0;
                    }
                }
            }
            fill_bbox(&mut data[BBOX_CHANNEL * plane..], width, &obj.bbox, 0.0);
        }
        for (i, b) in boxes.iter().enumerate() {
            if kept[i] {
                fill_bbox(&mut data[BBOX_CHANNEL * plane..], width, b, 1.0);
            }
        }
    }

    if noise.mask_dropout > 0.0 {
        for v in &mut out.data_mut()[..BBOX_CHANNEL * plane] {
            if *v != 0.0 && rng.random::<f64>() < noise.mask_dropout {
                *v = 0.0;
            }
        }
    }

    let mut objects = Vec::with_capacity(remaining);
    let mut target_index = 0;
    for (i, obj) in scene.objects.iter().enumerate() {
        if kept[i] {
            if i == scene.target_index {
                target_index = objects.len();
            }
            objects.push(SceneObject { bbox: boxes[i], ..obj.clone() });
        }
    }
    let noisy = Scene { grid: scene.grid, seed: scene.seed, target_index, objects };
    Ok((out, noisy))
}
