//! Moving-shapes clips with instance masks: shapes translate and rescale
//! smoothly over a textured background, optionally steered to cross.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpr_core::tracker::BBox;
use tpr_core::{Result, Tensor, TprError};

pub const CLASSES: usize = 3;
/// A shape counts as visible in a frame with at least this many pixels.
pub const MIN_VISIBLE_PIXELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; CLASSES] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }

    /// Whether the pixel centre `(px, py)` falls inside the shape of
    /// radius `r` centred at `(cx, cy)`.
    pub fn contains(self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // upward isosceles triangle inscribed in the r-square
                dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest size ratio between the first and last frame (<= 3).
    pub scale_change: f64,
    /// Probability that a shape's trajectory is steered through the centre.
    pub overlap_bias: f64,
    /// Pixels per frame for unsteered shapes.
    pub speed: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 50,
            frames: 8,
            height: 96,
            width: 96,
            min_shapes: 1,
            max_shapes: 4,
            min_radius: 5.0,
            max_radius: 20.0,
            scale_change: 3.0,
            overlap_bias: 0.5,
            speed: 2.0,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TprError::Invalid(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad(format!("frames and frame size must be positive: {self:?}"));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("frame {}x{} must be a multiple of 8", self.height, self.width));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!("shape count range {}..={} is invalid", self.min_shapes, self.max_shapes));
        }
        if !(1.0..=3.0).contains(&self.scale_change) {
            return bad(format!("scale_change must be in [1, 3], got {}", self.scale_change));
        }
        if !(0.0..=1.0).contains(&self.overlap_bias) {
            return bad(format!("overlap_bias must be in [0, 1], got {}", self.overlap_bias));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad(format!("radius range {}..{} is invalid", self.min_radius, self.max_radius));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGt {
    pub id: u64,
    pub class: usize,
    /// Row-major `H*W` mask.
    pub mask: Vec<bool>,
    pub bbox: BBox,
}

impl InstanceGt {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipGroundTruth {
    pub height: usize,
    pub width: usize,
    /// Visible instances per frame.
    pub frames: Vec<Vec<InstanceGt>>,
}

impl ClipGroundTruth {
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.frames.iter().flatten().map(|i| i.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Whether two instances' boxes overlap by at least `iou` in some frame.
    pub fn has_overlap(&self, iou: f64) -> bool {
        self.frames.iter().any(|f| {
            f.iter()
                .enumerate()
                .any(|(i, a)| f[i + 1..].iter().any(|b| a.bbox.iou(&b.bbox) >= iou))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub gt: ClipGroundTruth,
}

/// Tight box of a mask, `None` when empty.
pub fn mask_bbox(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > 0).then(|| BBox {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: x1 as f64,
        y1: y1 as f64,
    })
}

pub fn rasterize(kind: ShapeKind, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            m[y * w + x] = kind.contains(cx, cy, r, x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    m
}

#[derive(Clone, Debug)]
struct Track {
    kind: ShapeKind,
    color: [f64; 3],
    p0: (f64, f64),
    p1: (f64, f64),
    r0: f64,
    r1: f64,
}

impl Track {
    fn at(&self, t: usize, frames: usize) -> (f64, f64, f64) {
        let a = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
        let cx = self.p0.0 + (self.p1.0 - self.p0.0) * a;
        let cy = self.p0.1 + (self.p1.1 - self.p0.1) * a;
        (cx, cy, self.r0 * (self.r1 / self.r0).powf(a))
    }
}

const CLASS_HUE: [[f64; 3]; CLASSES] = [[0.9, 0.35, 0.3], [0.3, 0.85, 0.35], [0.35, 0.4, 0.95]];

fn sample_track(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Track {
    let kind = ShapeKind::ALL[rng.gen_range(0..CLASSES)];
    let hue = CLASS_HUE[kind.class()];
    let color = hue.map(|c| (c + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0));
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let r0 = cfg.min_radius * (cfg.max_radius / cfg.min_radius).powf(rng.gen::<f64>());
    let ratio = cfg.scale_change.powf(rng.gen_range(-1.0..=1.0));
    let r1 = (r0 * ratio).clamp(cfg.min_radius, cfg.max_radius);
    let p0 = (rng.gen_range(0.15 * w..0.85 * w), rng.gen_range(0.15 * h..0.85 * h));
    let span = cfg.frames.saturating_sub(1) as f64;
    let p1 = if rng.gen::<f64>() < cfg.overlap_bias {
        (w / 2.0 + rng.gen_range(-6.0..6.0), h / 2.0 + rng.gen_range(-6.0..6.0))
    } else {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        (p0.0 + a.cos() * cfg.speed * span, p0.1 + a.sin() * cfg.speed * span)
    };
    let p1 = (p1.0.clamp(0.1 * w, 0.9 * w), p1.1.clamp(0.1 * h, 0.9 * h));
    Track { kind, color, p0, p1, r0, r1 }
}

/// Renders a clip from explicit tracks; later tracks are drawn on top.
fn render(cfg: &SynthConfig, tracks: &[Track], rng: &mut ChaCha8Rng) -> Clip {
    let (h, w) = (cfg.height, cfg.width);
    let phase: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for (i, tr) in tracks.iter().enumerate() {
            let (cx, cy, r) = tr.at(t, cfg.frames);
            for (o, inside) in owner.iter_mut().zip(rasterize(tr.kind, cx, cy, r, h, w)) {
                if inside {
                    *o = Some(i);
                }
            }
        }
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let n = cfg.noise * rng.gen_range(-1.0..1.0);
                    let v = match owner[y * w + x] {
                        Some(i) => tracks[i].color[c] + 0.5 * n,
                        None => {
                            let (fx, fy) = (x as f64, y as f64);
                            0.3 + 0.1 * (fx * 0.31 + 6.0 * phase[c]).sin() * (fy * 0.23 + 3.0 * phase[c]).cos() + n
                        }
                    };
                    data[(c * h + y) * w + x] = v;
                }
            }
        }
        frames.push(Tensor::new(vec![3, h, w], data).expect("frame shape"));
        let mut insts = Vec::new();
        for (i, tr) in tracks.iter().enumerate() {
            let mask: Vec<bool> = owner.iter().map(|&o| o == Some(i)).collect();
            if let Some(bbox) = mask_bbox(&mask, h, w) {
                insts.push(InstanceGt {
                    id: i as u64 + 1,
                    class: tr.kind.class(),
                    mask,
                    bbox,
                });
            }
        }
        gt_frames.push(insts);
    }
    Clip {
        frames,
        gt: ClipGroundTruth {
            height: h,
            width: w,
            frames: gt_frames,
        },
    }
}

fn visible_enough(clip: &Clip, n: usize) -> bool {
    let need = clip.frames.len().min(2);
    (1..=n as u64).all(|id| {
        clip.gt
            .frames
            .iter()
            .filter(|f| f.iter().any(|i| i.id == id && i.area() >= MIN_VISIBLE_PIXELS))
            .count()
            >= need
    })
}

/// One clip; every shape is visible in at least two frames (or in the
/// only frame).
pub fn gen_clip(cfg: &SynthConfig, seed: u64) -> Result<Clip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..256 {
        let tracks: Vec<Track> = (0..n).map(|_| sample_track(cfg, &mut rng)).collect();
        let clip = render(cfg, &tracks, &mut rng);
        if visible_enough(&clip, n) {
            return Ok(clip);
        }
    }
    Err(TprError::Invalid(format!(
        "could not place {n} visible shapes with seed {seed}; loosen overlap_bias or sizes"
    )))
}

/// Seed of clip `index` of a dataset generated with `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<Clip>> {
    (0..cfg.videos).map(|i| gen_clip(cfg, clip_seed(cfg.seed, i))).collect()
}

#[derive(Serialize, Deserialize)]
struct IndexInstance {
    id: u64,
    class: usize,
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
struct IndexClip {
    file: String,
    frames: Vec<Vec<IndexInstance>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    config: SynthConfig,
    clips: Vec<IndexClip>,
}

/// Writes `index.json` plus one tensor file per clip holding `frame.{t}`
/// (`[3,H,W]`) and `masks.{t}` (`[N,H,W]`, index order) records.
pub fn save_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig, clips: &[Clip]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = DatasetIndex {
        config: cfg.clone(),
        clips: Vec::with_capacity(clips.len()),
    };
    for (ci, clip) in clips.iter().enumerate() {
        let file = format!("clip_{ci:04}.tpr");
        let mut out = BufWriter::new(fs::File::create(dir.join(&file))?);
        let (h, w) = (clip.gt.height, clip.gt.width);
        let mut frames = Vec::with_capacity(clip.frames.len());
        for (t, (frame, insts)) in clip.frames.iter().zip(&clip.gt.frames).enumerate() {
            frame.write_to(&mut out, Some(&format!("frame.{t}")))?;
            let data = insts
                .iter()
                .flat_map(|i| i.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
                .collect();
            Tensor::new(vec![insts.len(), h, w], data)?.write_to(&mut out, Some(&format!("masks.{t}")))?;
            frames.push(
                insts
                    .iter()
                    .map(|i| IndexInstance {
                        id: i.id,
                        class: i.class,
                        bbox: i.bbox,
                    })
                    .collect(),
            );
        }
        index.clips.push(IndexClip { file, frames });
    }
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(SynthConfig, Vec<Clip>)> {
    let dir = dir.as_ref();
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| TprError::Invalid(format!("cannot read dataset index {}: {e}", index_path.display())))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let mut clips = Vec::with_capacity(index.clips.len());
    for ic in index.clips {
        let mut input = BufReader::new(fs::File::open(dir.join(&ic.file))?);
        let mut records = std::collections::BTreeMap::new();
        while let Some((name, t)) = Tensor::read_from(&mut input)? {
            let name = name.ok_or_else(|| TprError::Format(format!("unnamed record in {}", ic.file)))?;
            records.insert(name, t);
        }
        let take = |records: &mut std::collections::BTreeMap<String, Tensor>, key: String| {
            records
                .remove(&key)
                .ok_or_else(|| TprError::Format(format!("{} is missing record {key}", ic.file)))
        };
        let mut frames = Vec::with_capacity(ic.frames.len());
        let mut gt = Vec::with_capacity(ic.frames.len());
        for (t, insts) in ic.frames.into_iter().enumerate() {
            let frame = take(&mut records, format!("frame.{t}"))?;
            let masks = take(&mut records, format!("masks.{t}"))?;
            let (_, h, w) = frame.dims3()?;
            if masks.shape() != [insts.len(), h, w] {
                return Err(TprError::Format(format!(
                    "{}: masks.{t} has shape {:?}, index lists {} instances",
                    ic.file,
                    masks.shape(),
                    insts.len()
                )));
            }
            gt.push(
                insts
                    .into_iter()
                    .enumerate()
                    .map(|(k, i)| InstanceGt {
                        id: i.id,
                        class: i.class,
                        mask: masks.data()[k * h * w..(k + 1) * h * w].iter().map(|&v| v > 0.5).collect(),
                        bbox: i.bbox,
                    })
                    .collect(),
            );
            frames.push(frame);
        }
        clips.push(Clip {
            frames,
            gt: ClipGroundTruth {
                height: index.config.height,
                width: index.config.width,
                frames: gt,
            },
        });
    }
    Ok((index.config, clips))
}
