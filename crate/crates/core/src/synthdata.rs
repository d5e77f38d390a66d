//! Synthetic gesture videos.
//!
//! An actor (a filled body rectangle, an arm and a bright hand marker) performs one
//! of ten motion programs in front of a static cluttered background. Apparent
//! size follows the pinhole law `s = reference_scale * 4 / d`, so distance
//! shows up as fewer pixels per gesture against a fixed noise floor.
//!
//! Clip file layout, little-endian:
//!
//! ```text
//! magic        4 bytes  "GVID"
//! version      u32      1
//! n_frames     u16
//! height       u16
//! width        u16
//! channels     u8
//! dtype        u8       0 = f32
//! distance_m   f32
//! label_id     u16
//! data         n * C * H * W f32 in (t, c, y, x) order
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preproc::{BBox, VideoClip};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: [u8; 4] = *b"GVID";
pub const CLIP_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 2 + 2 + 2 + 1 + 1 + 4 + 2;
/// Rendered clips last four seconds; at the default 84 frames that is 21 fps.
/// The clip file does not store a rate, loaded clips get this one.
pub const CLIP_FPS: f32 = 21.0;
/// Distance at which the actor is `reference_scale` pixels tall.
pub const REFERENCE_DISTANCE_M: f64 = 4.0;
pub const MIN_DISTANCE_M: f64 = 4.0;
pub const MAX_DISTANCE_M: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureClass {
    GoBack,
    Beckoning,
    Lower,
    MoveLeft,
    FollowMe,
    MoveRight,
    Higher,
    Spin,
    Stop,
    Null,
}

impl GestureClass {
    pub const ALL: [GestureClass; 10] = [
        GestureClass::GoBack,
        GestureClass::Beckoning,
        GestureClass::Lower,
        GestureClass::MoveLeft,
        GestureClass::FollowMe,
        GestureClass::MoveRight,
        GestureClass::Higher,
        GestureClass::Spin,
        GestureClass::Stop,
        GestureClass::Null,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("gesture id {id} out of range 0..10")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureClass::GoBack => "go_back",
            GestureClass::Beckoning => "beckoning",
            GestureClass::Lower => "lower",
            GestureClass::MoveLeft => "move_left",
            GestureClass::FollowMe => "follow_me",
            GestureClass::MoveRight => "move_right",
            GestureClass::Higher => "higher",
            GestureClass::Spin => "spin",
            GestureClass::Stop => "stop",
            GestureClass::Null => "null",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frame_hw: (usize, usize),
    pub n_frames: usize,
    /// Actor height in pixels at 4 m.
    pub reference_scale: f64,
    pub noise_sigma: f64,
    pub clutter_count: usize,
    pub background: f64,
    pub body_intensity: f64,
    pub hand_intensity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_hw: (96, 96),
            n_frames: 84,
            reference_scale: 32.0,
            noise_sigma: 0.05,
            clutter_count: 3,
            background: 0.2,
            body_intensity: 0.6,
            hand_intensity: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_hw;
        if self.n_frames < 2 || self.n_frames > u16::MAX as usize {
            return Err(Error::invalid(format!("n_frames must be in 2..=65535, got {}", self.n_frames)));
        }
        if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::invalid(format!("bad frame size {h}x{w}")));
        }
        if !(self.noise_sigma >= 0.0) || !(self.reference_scale > 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0 and reference_scale > 0"));
        }
        // The largest pose (follow_me at its peak) must fit at the nearest distance.
        let s = self.reference_scale * MAX_SCALE_GAIN;
        if EXTENT_H * s > h as f64 || EXTENT_W * s > w as f64 {
            return Err(Error::invalid(format!(
                "actor does not fit a {h}x{w} frame at {MIN_DISTANCE_M} m"
            )));
        }
        Ok(())
    }

    pub fn scale_at(&self, distance_m: f64) -> f64 {
        self.reference_scale * REFERENCE_DISTANCE_M / distance_m
    }
}

// Actor geometry, in units of the actor scale s, relative to the body center.
const BODY_HALF_W: f64 = 0.175;
const BODY_HALF_H: f64 = 0.5;
const HAND_HALF: f64 = 0.08;
const ARM_HALF: f64 = 0.04;
// Shoulder of the gesturing (image-right) arm, relative to the body center.
const SHOULDER: (f64, f64) = (0.12, -0.35);
const MAX_SCALE_GAIN: f64 = 1.15;
// Loose bound of the full pose envelope used by the fit check.
const EXTENT_H: f64 = 1.4;
const EXTENT_W: f64 = 1.4;

/// Per-clip variation of a motion program.
#[derive(Debug, Clone, Copy)]
struct Style {
    phase: f64,
    amplitude: f64,
    sway_phase: f64,
}

/// Actor pose at time `u` in `[0, 1]`: body offset (in s), scale gain and
/// hand position (in s, relative to body center).
#[derive(Debug, Clone, Copy)]
struct Pose {
    body: (f64, f64),
    gain: f64,
    shoulder: (f64, f64),
    hand: (f64, f64),
}

fn pose(class: GestureClass, u: f64, st: &Style, jitter: (f64, f64)) -> Pose {
    use std::f64::consts::TAU;
    let a = st.amplitude;
    let sway = match class {
        GestureClass::Stop | GestureClass::Null => (0.0, 0.0),
        _ => (
            0.07 * (TAU * (1.5 * u + st.sway_phase)).sin(),
            0.03 * (TAU * (2.5 * u + st.sway_phase)).cos(),
        ),
    };
    let (gain, hand) = match class {
        GestureClass::GoBack => (MAX_SCALE_GAIN - 0.3 * u, (0.35, -0.05)),
        GestureClass::FollowMe => (2.0 - MAX_SCALE_GAIN + 0.3 * u, (0.35, -0.05)),
        GestureClass::Beckoning => (
            1.0,
            ((0.35 + 0.12 * a * (TAU * (3.0 * u + st.phase)).sin()), -0.3),
        ),
        GestureClass::Lower => (1.0, (0.4, -0.7 + 0.75 * a * u)),
        GestureClass::Higher => (1.0, (0.4, 0.05 - 0.75 * a * u)),
        GestureClass::MoveLeft => (1.0, (0.5 - 1.0 * a * u, -0.65)),
        GestureClass::MoveRight => (1.0, (-0.5 + 1.0 * a * u, -0.65)),
        GestureClass::Spin => {
            let th = TAU * (2.0 * u + st.phase);
            (1.0, (0.38 + 0.15 * a * th.cos(), -0.45 + 0.15 * a * th.sin()))
        }
        GestureClass::Stop => (1.0, (0.4, -0.65)),
        GestureClass::Null => (1.0, (0.2, 0.1)),
    };
    Pose {
        body: (sway.0 + jitter.0, sway.1 + jitter.1),
        gain,
        shoulder: (SHOULDER.0 + sway.0 + jitter.0, SHOULDER.1 + sway.1 + jitter.1),
        hand: (hand.0 + jitter.0, hand.1 + jitter.1),
    }
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn union(self, o: Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }
}

fn actor_rects(p: &Pose, s: f64, cx: f64, cy: f64) -> [Rect; 2] {
    let s = s * p.gain;
    let bx = cx + p.body.0 * s;
    let by = cy + p.body.1 * s;
    let hx = cx + p.hand.0 * s;
    let hy = cy + p.hand.1 * s;
    [
        Rect {
            x0: bx - BODY_HALF_W * s,
            y0: by - BODY_HALF_H * s,
            x1: bx + BODY_HALF_W * s,
            y1: by + BODY_HALF_H * s,
        },
        Rect {
            x0: hx - HAND_HALF * s,
            y0: hy - HAND_HALF * s,
            x1: hx + HAND_HALF * s,
            y1: hy + HAND_HALF * s,
        },
    ]
}

/// Paints `r` with exact per-pixel area coverage.
fn paint(plane: &mut [f32], w: usize, h: usize, r: Rect, value: f64) {
    let xa = r.x0.max(0.0).floor() as usize;
    let ya = r.y0.max(0.0).floor() as usize;
    let xb = (r.x1.min(w as f64).ceil() as usize).min(w);
    let yb = (r.y1.min(h as f64).ceil() as usize).min(h);
    for y in ya..yb {
        let cy = (r.y1.min(y as f64 + 1.0) - r.y0.max(y as f64)).max(0.0);
        if cy == 0.0 {
            continue;
        }
        for x in xa..xb {
            let cx = (r.x1.min(x as f64 + 1.0) - r.x0.max(x as f64)).max(0.0);
            let cov = cx * cy;
            if cov > 0.0 {
                let p = &mut plane[y * w + x];
                *p = (*p as f64 * (1.0 - cov) + value * cov) as f32;
            }
        }
    }
}

/// Paints a thick segment, coverage estimated on a 4x4 subpixel grid.
fn paint_segment(plane: &mut [f32], w: usize, h: usize, a: (f64, f64), b: (f64, f64), half: f64, value: f64) {
    const SUB: usize = 4;
    let xa = (a.0.min(b.0) - half).max(0.0).floor() as usize;
    let ya = (a.1.min(b.1) - half).max(0.0).floor() as usize;
    let xb = ((a.0.max(b.0) + half).min(w as f64).ceil() as usize).min(w);
    let yb = ((a.1.max(b.1) + half).min(h as f64).ceil() as usize).min(h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in ya..yb {
        for x in xa..xb {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let t = if len2 > 0.0 {
                        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (ex, ey) = (px - a.0 - t * dx, py - a.1 - t * dy);
                    hits += (ex * ex + ey * ey <= half * half) as usize;
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SUB * SUB) as f64;
                let p = &mut plane[y * w + x];
                *p = (*p as f64 * (1.0 - cov) + value * cov) as f32;
            }
        }
    }
}

/// Renders one clip and the ground-truth actor box (union over all frames).
pub fn render_clip(
    class: GestureClass,
    distance_m: f64,
    cfg: &SceneConfig,
    rng: &mut Rng,
) -> Result<(VideoClip, BBox)> {
    cfg.validate()?;
    if !(MIN_DISTANCE_M..=MAX_DISTANCE_M).contains(&distance_m) {
        return Err(Error::invalid(format!(
            "distance {distance_m} m outside [{MIN_DISTANCE_M}, {MAX_DISTANCE_M}]"
        )));
    }
    let s = cfg.scale_at(distance_m);
    if s < 1.0 {
        return Err(Error::invalid(format!(
            "actor scale {s:.3} px at {distance_m} m is below one pixel"
        )));
    }
    let (h, w) = cfg.frame_hw;
    let n = cfg.n_frames;
    let style = Style {
        phase: rng.uniform(),
        amplitude: rng.uniform_range(0.85, 1.15),
        sway_phase: rng.uniform(),
    };
    let times: Vec<f64> = (0..n).map(|t| t as f64 / (n - 1) as f64).collect();
    let jitter: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            if class == GestureClass::Null {
                // at most a third of a pixel
                let j = 0.33 / s;
                (rng.uniform_range(-j, j), rng.uniform_range(-j, j))
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let poses: Vec<Pose> = times
        .iter()
        .zip(&jitter)
        .map(|(&u, &j)| pose(class, u, &style, j))
        .collect();

    // Place the actor so the whole motion stays in frame.
    let envelope = poses
        .iter()
        .flat_map(|p| actor_rects(p, s, 0.0, 0.0))
        .reduce(Rect::union)
        .expect("n >= 2");
    let (lo_x, hi_x) = (-envelope.x0, w as f64 - envelope.x1);
    let (lo_y, hi_y) = (-envelope.y0, h as f64 - envelope.y1);
    if lo_x > hi_x || lo_y > hi_y {
        return Err(Error::invalid(format!(
            "actor motion at {distance_m} m does not fit a {h}x{w} frame"
        )));
    }
    let cx = rng.uniform_range(lo_x, hi_x);
    let cy = rng.uniform_range(lo_y, hi_y);
    let actor = Rect {
        x0: envelope.x0 + cx,
        y0: envelope.y0 + cy,
        x1: envelope.x1 + cx,
        y1: envelope.y1 + cy,
    };
    let gt = BBox {
        x0: actor.x0.floor().max(0.0) as usize,
        y0: actor.y0.floor().max(0.0) as usize,
        x1: (actor.x1.ceil() as usize).min(w),
        y1: (actor.y1.ceil() as usize).min(h),
    };

    // Static background with clutter blobs kept clear of the actor.
    let mut background = vec![cfg.background as f32; h * w];
    let margin = 2.0;
    for _ in 0..cfg.clutter_count {
        for _attempt in 0..50 {
            let size = rng.uniform_range(3.0, 8.0);
            let x0 = rng.uniform_range(0.0, (w as f64 - size).max(0.0));
            let y0 = rng.uniform_range(0.0, (h as f64 - size).max(0.0));
            let value = rng.uniform_range(0.3, 0.9);
            let blob = Rect { x0, y0, x1: x0 + size, y1: y0 + size };
            let clear = blob.x1 + margin <= actor.x0
                || blob.x0 - margin >= actor.x1
                || blob.y1 + margin <= actor.y0
                || blob.y0 - margin >= actor.y1;
            if clear {
                paint(&mut background, w, h, blob, value);
                break;
            }
        }
    }

    let mut data = Vec::with_capacity(n * h * w);
    for p in &poses {
        let mut frame = background.clone();
        let [body, hand] = actor_rects(p, s, cx, cy);
        paint(&mut frame, w, h, body, cfg.body_intensity);
        let sg = s * p.gain;
        let shoulder = (cx + p.shoulder.0 * sg, cy + p.shoulder.1 * sg);
        let wrist = (cx + p.hand.0 * sg, cy + p.hand.1 * sg);
        paint_segment(&mut frame, w, h, shoulder, wrist, ARM_HALF * sg, cfg.hand_intensity);
        paint(&mut frame, w, h, hand, cfg.hand_intensity);
        if cfg.noise_sigma > 0.0 {
            for v in &mut frame {
                *v += (cfg.noise_sigma * rng.normal()) as f32;
            }
        }
        data.extend_from_slice(&frame);
    }
    let frames = Tensor::new(vec![n, 1, h, w], data)?;
    let clip = VideoClip::new(frames, CLIP_FPS, distance_m as f32, class.id())?;
    Ok((clip, gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn bit(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// How many clips to draw per one-meter distance interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Clips per interval; labels cycle through the classes, so a multiple
    /// of 10 covers every class equally.
    pub per_meter_count: usize,
    /// Whole-meter range `[lo, hi)`.
    pub meters: (u32, u32),
    pub split: Split,
}

impl DatasetSpec {
    /// 40 clips per meter (4 per class): 640 clips over 4-20 m.
    pub fn desk_train() -> Self {
        Self {
            per_meter_count: 40,
            meters: (4, 20),
            split: Split::Train,
        }
    }

    /// 10 clips per meter (1 per class): 160 clips over 4-20 m.
    pub fn desk_test() -> Self {
        Self {
            per_meter_count: 10,
            meters: (4, 20),
            split: Split::Test,
        }
    }

    pub fn len(&self) -> usize {
        self.per_meter_count * (self.meters.1.saturating_sub(self.meters.0)) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.meters;
        if self.per_meter_count == 0 || hi <= lo {
            return Err(Error::invalid("dataset needs per_meter_count >= 1 and a non-empty meter range"));
        }
        if (lo as f64) < MIN_DISTANCE_M || (hi as f64) > MAX_DISTANCE_M {
            return Err(Error::invalid(format!(
                "meter range {lo}..{hi} outside [{MIN_DISTANCE_M}, {MAX_DISTANCE_M}]"
            )));
        }
        Ok(())
    }
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub distance_m: f32,
    pub label_id: usize,
    pub seed: u64,
    pub split: Split,
}

impl ManifestRecord {
    pub fn class(&self) -> Result<GestureClass> {
        GestureClass::from_id(self.label_id)
    }

    /// Renders the clip this record describes.
    pub fn render(&self, cfg: &SceneConfig) -> Result<(VideoClip, BBox)> {
        render_clip(self.class()?, self.distance_m as f64, cfg, &mut Rng::new(self.seed))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::invalid(format!("duplicate clip path {}", r.path)));
            }
            r.class()?;
            let d = r.distance_m as f64;
            if !(MIN_DISTANCE_M..=MAX_DISTANCE_M).contains(&d) {
                return Err(Error::invalid(format!("{}: distance {d} outside [4, 20]", r.path)));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(csv_err)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()
            .map_err(csv_err)?;
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }
}

/// Seed of clip `index`. The low bit carries the split, so train and test
/// seeds never coincide.
pub fn clip_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    (derive_seed(master_seed, index as u64) << 1) | split.bit()
}

/// Decides labels, distances and seeds without rendering anything.
pub fn plan_dataset(spec: &DatasetSpec, master_seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.len());
    for (i, meter) in (spec.meters.0..spec.meters.1).enumerate() {
        for j in 0..spec.per_meter_count {
            let index = i * spec.per_meter_count + j;
            let seed = clip_seed(master_seed, spec.split, index);
            // distance from its own stream so rendering draws stay independent
            let u = Rng::stream(seed, 0xd157).uniform();
            records.push(ManifestRecord {
                path: format!("{}/clip_{index:05}.gvid", spec.split.name()),
                distance_m: (meter as f64 + u) as f32,
                label_id: j % GestureClass::ALL.len(),
                seed,
                split: spec.split,
            });
        }
    }
    Ok(DatasetManifest { records })
}

/// Plans, renders and writes every clip of every split under `out_dir`,
/// followed by one `manifest.csv` covering all of them. Clips render in
/// parallel; the output does not depend on scheduling.
pub fn generate_dataset(
    specs: &[DatasetSpec],
    cfg: &SceneConfig,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut manifest = DatasetManifest::default();
    for spec in specs {
        manifest.records.extend(plan_dataset(spec, master_seed)?.records);
        let dir = out_dir.join(spec.split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    manifest.validate()?;
    manifest.records.par_iter().try_for_each(|r| {
        let (clip, _) = r.render(cfg)?;
        save_clip(&out_dir.join(&r.path), &clip)
    })?;
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u16")))
}

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + clip.frames().numel() * 4);
    out.extend_from_slice(&CLIP_MAGIC);
    out.write_u32::<LittleEndian>(CLIP_VERSION).expect("vec write");
    out.write_u16::<LittleEndian>(u16_of(clip.n_frames(), "n_frames")?).expect("vec write");
    out.write_u16::<LittleEndian>(u16_of(clip.height(), "height")?).expect("vec write");
    out.write_u16::<LittleEndian>(u16_of(clip.width(), "width")?).expect("vec write");
    let c = u8::try_from(clip.channels()).map_err(|_| Error::invalid("more than 255 channels"))?;
    out.push(c);
    out.push(0);
    out.write_f32::<LittleEndian>(clip.distance_m()).expect("vec write");
    out.write_u16::<LittleEndian>(u16_of(clip.label(), "label")?).expect("vec write");
    for &v in clip.frames().data() {
        out.write_f32::<LittleEndian>(v).expect("vec write");
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != CLIP_MAGIC {
        return Err(Error::BadMagic { expected: CLIP_MAGIC, found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>().expect("header length checked");
    if version != CLIP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.read_u16::<LittleEndian>().expect("header length checked") as usize;
    let h = r.read_u16::<LittleEndian>().expect("header length checked") as usize;
    let w = r.read_u16::<LittleEndian>().expect("header length checked") as usize;
    let c = r.read_u8().expect("header length checked") as usize;
    let dtype = r.read_u8().expect("header length checked");
    let distance = r.read_f32::<LittleEndian>().expect("header length checked");
    let label = r.read_u16::<LittleEndian>().expect("header length checked") as usize;
    if dtype != 0 {
        return Err(Error::HeaderMismatch(format!("unknown dtype code {dtype}")));
    }
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::HeaderMismatch(format!("zero extent in {n}x{c}x{h}x{w}")));
    }
    let numel = n * c * h * w;
    let expected = HEADER_LEN + numel * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::HeaderMismatch(format!(
            "{} bytes after the {numel} declared values",
            bytes.len() - expected
        )));
    }
    let mut data = vec![0f32; numel];
    r.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
    let frames = Tensor::new(vec![n, c, h, w], data)?;
    VideoClip::new(frames, CLIP_FPS, distance, label)
        .map_err(|e| Error::HeaderMismatch(e.to_string()))
}

pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let bytes = encode_clip(clip)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes).map_err(|e| e.in_file(path))
}

/// Resolves a record path against the manifest directory.
pub fn clip_path(root: &Path, record: &ManifestRecord) -> PathBuf {
    root.join(&record.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneConfig {
        SceneConfig {
            noise_sigma: 0.0,
            clutter_count: 0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn class_table() {
        assert_eq!(GestureClass::ALL.len(), 10);
        for (i, c) in GestureClass::ALL.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(GestureClass::from_id(i).unwrap(), *c);
        }
        assert_eq!(GestureClass::Null.name(), "null");
        assert!(GestureClass::from_id(10).is_err());
    }

    #[test]
    fn stop_without_noise_is_static() {
        let (clip, _) = render_clip(GestureClass::Stop, 7.0, &quiet(), &mut Rng::new(3)).unwrap();
        let first = clip.frame_slice(0).to_vec();
        for t in 1..clip.n_frames() {
            assert_eq!(clip.frame_slice(t), &first[..]);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        let a = render_clip(GestureClass::Spin, 11.3, &cfg, &mut Rng::new(9)).unwrap();
        let b = render_clip(GestureClass::Spin, 11.3, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn pinhole_height_ratio() {
        let cfg = quiet();
        let (_, near) = render_clip(GestureClass::Stop, 8.0, &cfg, &mut Rng::new(1)).unwrap();
        let (_, far) = render_clip(GestureClass::Stop, 16.0, &cfg, &mut Rng::new(1)).unwrap();
        // each box is within one pixel of its continuous extent
        let diff = near.height() as i64 - 2 * far.height() as i64;
        assert!(diff.abs() <= 3, "{} vs {}", near.height(), far.height());
    }

    #[test]
    fn classes_differ() {
        let cfg = SceneConfig::default();
        let clips: Vec<VideoClip> = GestureClass::ALL
            .iter()
            .map(|&c| render_clip(c, 12.0, &cfg, &mut Rng::new(5)).unwrap().0)
            .collect();
        for i in 0..clips.len() {
            for j in i + 1..clips.len() {
                assert_ne!(clips[i].frames(), clips[j].frames(), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn distance_bounds() {
        let cfg = SceneConfig::default();
        assert!(render_clip(GestureClass::Stop, 3.9, &cfg, &mut Rng::new(0)).is_err());
        assert!(render_clip(GestureClass::Stop, 20.5, &cfg, &mut Rng::new(0)).is_err());
        let tiny = SceneConfig { reference_scale: 4.0, ..cfg };
        assert!(render_clip(GestureClass::Stop, 20.0, &tiny, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn plan_counts_and_coverage() {
        assert_eq!(plan_dataset(&DatasetSpec::desk_train(), 1).unwrap().len(), 640);
        assert_eq!(plan_dataset(&DatasetSpec::desk_test(), 1).unwrap().len(), 160);
        let half = DatasetSpec { per_meter_count: 20, meters: (4, 20), split: Split::Train };
        let m = plan_dataset(&half, 1).unwrap();
        assert_eq!(m.len(), 320);
        for meter in 4..20u32 {
            let mut counts = [0usize; 10];
            for r in m.records.iter().filter(|r| r.distance_m.floor() as u32 == meter) {
                counts[r.label_id] += 1;
            }
            assert_eq!(counts, [2; 10]);
        }
        m.validate().unwrap();
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let train = plan_dataset(&DatasetSpec::desk_train(), 7).unwrap();
        let test = plan_dataset(&DatasetSpec::desk_test(), 7).unwrap();
        let seeds: std::collections::HashSet<u64> = train.records.iter().map(|r| r.seed).collect();
        assert!(test.records.iter().all(|r| !seeds.contains(&r.seed)));
    }

    #[test]
    fn clip_roundtrip_and_errors() {
        let cfg = SceneConfig { n_frames: 5, ..SceneConfig::default() };
        let (clip, _) = render_clip(GestureClass::Beckoning, 9.25, &cfg, &mut Rng::new(2)).unwrap();
        let bytes = encode_clip(&clip).unwrap();
        let back = decode_clip(&bytes).unwrap();
        assert_eq!(back, clip);
        assert_eq!(encode_clip(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(decode_clip(&bad), Err(Error::BadMagic { .. })));

        let mut more = bytes.clone();
        more[8..10].copy_from_slice(&6u16.to_le_bytes());
        assert!(matches!(decode_clip(&more), Err(Error::TruncatedPayload { .. })));

        assert!(matches!(decode_clip(&bytes[..bytes.len() - 3]), Err(Error::TruncatedPayload { .. })));

        let mut fewer = bytes.clone();
        fewer[8..10].copy_from_slice(&4u16.to_le_bytes());
        assert!(matches!(decode_clip(&fewer), Err(Error::HeaderMismatch(_))));

        let mut version = bytes;
        version[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_clip(&version), Err(Error::UnsupportedVersion(2))));
    }
}
