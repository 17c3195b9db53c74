//! Synthetic bouncing-shape videos with templated captions, a block-matching
//! motion score and PSNR.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err};
use crate::io::{load_nvt, save_nvt};
use crate::tensor::rng;
use crate::{Float, NovaError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Bar];

    /// Bounding box `(height, width)` in pixels.
    pub fn extent(self) -> (usize, usize) {
        match self {
            ShapeKind::Square | ShapeKind::Circle => (8, 8),
            ShapeKind::Bar => (4, 12),
        }
    }

    fn covers(self, y: usize, x: usize) -> bool {
        match self {
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Circle => {
                let (h, w) = self.extent();
                let cy = y as f64 + 0.5 - h as f64 / 2.0;
                let cx = x as f64 + 0.5 - w as f64 / 2.0;
                cy * cy + cx * cx <= (h as f64 / 2.0).powi(2)
            }
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Bar => "bar",
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.1, 0.8, 0.25]),
    ("blue", [0.2, 0.35, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    /// Unit step `(dy, dx)`.
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Right => (0, 1),
            Direction::Left => (0, -1),
            Direction::Down => (1, 0),
            Direction::Up => (-1, 0),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

/// Speeds in pixels per frame with their caption words.
pub const SPEEDS: [(usize, &str); 3] = [(1, "slowly"), (2, "steadily"), (3, "quickly")];

/// Prompt ids `0..PROMPT_VOCAB-1` enumerate captions; the last id is the
/// unconditional prompt.
pub const NUM_CAPTIONS: usize = COLORS.len() * ShapeKind::ALL.len() * Direction::ALL.len() * SPEEDS.len();
pub const NULL_PROMPT: usize = NUM_CAPTIONS;
pub const PROMPT_VOCAB: usize = NUM_CAPTIONS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shape: ShapeKind,
    /// Index into [`COLORS`].
    pub color: usize,
    pub direction: Direction,
    /// Index into [`SPEEDS`].
    pub speed: usize,
    /// Seeds the start position.
    pub seed: u64,
}

impl SynthSpec {
    /// Every attribute drawn uniformly from the caption vocabulary.
    pub fn random(height: usize, width: usize, frames: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 1);
        Self {
            height,
            width,
            frames,
            shape: ShapeKind::ALL[r.random_range(0..ShapeKind::ALL.len())],
            color: r.random_range(0..COLORS.len()),
            direction: Direction::ALL[r.random_range(0..Direction::ALL.len())],
            speed: r.random_range(0..SPEEDS.len()),
            seed,
        }
    }

    pub fn prompt_id(&self) -> usize {
        let shape = ShapeKind::ALL.iter().position(|&s| s == self.shape).unwrap();
        let dir = Direction::ALL.iter().position(|&d| d == self.direction).unwrap();
        ((self.color * ShapeKind::ALL.len() + shape) * Direction::ALL.len() + dir) * SPEEDS.len() + self.speed
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} moving {} {}",
            COLORS[self.color].0,
            self.shape.word(),
            self.direction.word(),
            SPEEDS[self.speed].1
        )
    }

    pub fn speed_px(&self) -> usize {
        SPEEDS[self.speed].0
    }
}

/// Caption of a prompt id, `None` for the null prompt or out-of-range ids.
pub fn caption_of(id: usize) -> Option<String> {
    if id >= NUM_CAPTIONS {
        return None;
    }
    let speed = id % SPEEDS.len();
    let rest = id / SPEEDS.len();
    let dir = Direction::ALL[rest % Direction::ALL.len()];
    let rest = rest / Direction::ALL.len();
    let shape = ShapeKind::ALL[rest % ShapeKind::ALL.len()];
    let color = rest / ShapeKind::ALL.len();
    let spec = SynthSpec {
        height: 0,
        width: 0,
        frames: 0,
        shape,
        color,
        direction: dir,
        speed,
        seed: 0,
    };
    Some(spec.caption())
}

/// One line of a dataset `manifest.jsonl`; `path` is relative to the
/// dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub prompt_id: usize,
    pub true_speed: f64,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Renders `count` clips with seeds `seed..seed+count` into `dir` as
/// `video_%05d.nvt` and writes the manifest.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    (height, width, frames): (usize, usize, usize),
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SynthSpec::random(height, width, frames, seed.wrapping_add(i as u64));
        let v = synth_video::<f32>(&spec)?;
        let path = format!("video_{i:05}.nvt");
        save_nvt(&dir.join(&path), "video", &v.video)?;
        let e = ManifestEntry {
            path,
            prompt_id: v.prompt_id,
            true_speed: v.true_speed,
        };
        lines.push_str(&serde_json::to_string(&e)?);
        lines.push('\n');
        entries.push(e);
    }
    std::fs::write(dir.join(MANIFEST), lines)?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Loads every clip listed in the manifest of `dir`.
pub fn read_dataset<T: Float>(dir: &Path) -> Result<Vec<(ManifestEntry, Tensor<T>)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let (_, v) = load_nvt::<T>(&dir.join(&e.path))?;
            Ok((e, v))
        })
        .collect()
}

/// A rendered clip with its prompt id and true speed (pixels per frame).
#[derive(Debug, Clone)]
pub struct SynthVideo<T> {
    pub video: Tensor<T>,
    pub prompt_id: usize,
    pub true_speed: f64,
}

/// Renders `[T × H × W × 3]` frames of one shape on black, reflecting off
/// the canvas border.
pub fn synth_video<T: Float>(spec: &SynthSpec) -> Result<SynthVideo<T>> {
    let (sh, sw) = spec.shape.extent();
    let (h, w) = (spec.height, spec.width);
    if sh > h || sw > w {
        return Err(contract_err!("{}×{} shape does not fit a {h}×{w} canvas", sh, sw));
    }
    if spec.color >= COLORS.len() || spec.speed >= SPEEDS.len() || spec.frames == 0 {
        return Err(contract_err!("invalid synth spec {spec:?}"));
    }
    let mut r = rng::stream(spec.seed, 2);
    let (max_y, max_x) = ((h - sh) as i64, (w - sw) as i64);
    let mut pos = (r.random_range(0..=max_y), r.random_range(0..=max_x));
    let s = spec.speed_px() as i64;
    let (dy, dx) = spec.direction.step();
    let mut vel = (dy * s, dx * s);
    let color = COLORS[spec.color].1;
    let mut data = vec![T::zero(); spec.frames * h * w * 3];
    for f in 0..spec.frames {
        let frame = &mut data[f * h * w * 3..(f + 1) * h * w * 3];
        for y in 0..sh {
            for x in 0..sw {
                if spec.shape.covers(y, x) {
                    let p = ((pos.0 as usize + y) * w + pos.1 as usize + x) * 3;
                    for ch in 0..3 {
                        frame[p + ch] = T::lit(color[ch]);
                    }
                }
            }
        }
        (pos.0, vel.0) = bounce(pos.0, vel.0, max_y);
        (pos.1, vel.1) = bounce(pos.1, vel.1, max_x);
    }
    Ok(SynthVideo {
        video: Tensor::new(&[spec.frames, h, w, 3], data)?,
        prompt_id: spec.prompt_id(),
        true_speed: spec.speed_px() as f64,
    })
}

fn bounce(p: i64, v: i64, max: i64) -> (i64, i64) {
    if max == 0 {
        return (0, v);
    }
    let (mut p, mut v) = (p + v, v);
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

pub const FLOW_BLOCK: usize = 8;
pub const FLOW_RADIUS: usize = 3;

/// Mean block-matching flow magnitude between consecutive frames.
///
/// Frames are averaged over channels and tiled into `8 × 8` blocks. Each
/// block of frame `t + 1` takes the displacement into frame `t` (within the
/// search radius) with the least mean absolute difference over the pixels
/// that stay inside the frame; ties go to the shorter vector. Blocks
/// identical to their co-located predecessor carry no motion evidence and
/// are skipped; a clip without any informative block scores 0.
pub fn motion_score<T: Float>(video: &Tensor<T>) -> Result<f64> {
    let [t, h, w, c] = *video.shape() else {
        return Err(shape_err!("video must be [T, H, W, c], got {:?}", video.shape()));
    };
    if t < 2 {
        return Err(contract_err!("motion score needs at least 2 frames, got {t}"));
    }
    let (b, r) = (FLOW_BLOCK, FLOW_RADIUS);
    if h < b || w < b {
        return Err(contract_err!("{h}×{w} frames smaller than one {b}×{b} block"));
    }
    let gray: Vec<f64> = video
        .data()
        .chunks(c)
        .map(|p| p.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / c as f64)
        .collect();
    let frame = |f: usize| &gray[f * h * w..(f + 1) * h * w];
    let ri = r as i64;
    let mut cands: Vec<(i64, i64)> = (-ri..=ri).flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx))).collect();
    cands.sort_by_key(|&(dy, dx)| dy * dy + dx * dx);

    let (mut total, mut count) = (0.0, 0usize);
    for f in 1..t {
        let (prev, cur) = (frame(f - 1), frame(f));
        for by in (0..=h - b).step_by(b) {
            for bx in (0..=w - b).step_by(b) {
                let mad = |dy: i64, dx: i64| {
                    let (mut s, mut n) = (0.0, 0usize);
                    for y in by..by + b {
                        for x in bx..bx + b {
                            let (py, px) = (y as i64 - dy, x as i64 - dx);
                            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                                s += (cur[y * w + x] - prev[py as usize * w + px as usize]).abs();
                                n += 1;
                            }
                        }
                    }
                    s / n as f64
                };
                if mad(0, 0) > 0.0 {
                    let mut best = (f64::INFINITY, (0, 0));
                    for &(dy, dx) in &cands {
                        let s = mad(dy, dx);
                        if s < best.0 {
                            best = (s, (dy, dx));
                        }
                    }
                    let (dy, dx) = best.1;
                    total += ((dy * dy + dx * dx) as f64).sqrt();
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)` for signals in `[0, 1]`, capped at 99 dB.
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(NovaError::Domain("psnr of empty tensors".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind, dir: Direction, speed: usize) -> SynthSpec {
        SynthSpec {
            height: 32,
            width: 32,
            frames: 10,
            shape,
            color: 1,
            direction: dir,
            speed,
            seed: 5,
        }
    }

    #[test]
    fn prompt_ids_cover_vocabulary() {
        let mut seen = vec![false; NUM_CAPTIONS];
        for color in 0..COLORS.len() {
            for shape in ShapeKind::ALL {
                for dir in Direction::ALL {
                    for speed in 0..SPEEDS.len() {
                        let s = SynthSpec { color, ..spec(shape, dir, speed) };
                        seen[s.prompt_id()] = true;
                        assert_eq!(caption_of(s.prompt_id()).unwrap(), s.caption());
                    }
                }
            }
        }
        assert!(seen.iter().all(|&b| b));
        assert_eq!(caption_of(NULL_PROMPT), None);
        assert_eq!(spec(ShapeKind::Circle, Direction::Up, 2).caption(), "a green circle moving up quickly");
    }

    #[test]
    fn deterministic_rendering() {
        let s = SynthSpec::random(32, 32, 10, 9);
        let a = synth_video::<f32>(&s).unwrap();
        let b = synth_video::<f32>(&s).unwrap();
        assert_eq!(a.video, b.video);
        assert!(a.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn shift_before_bounce() {
        let mut s = spec(ShapeKind::Square, Direction::Right, 0);
        // find a seed whose start leaves room for 3 unbounced steps
        let v = loop {
            let v = synth_video::<f64>(&s).unwrap().video;
            let f0 = v.slice_rows(0, 1).unwrap();
            let occupied = (0..32).filter(|&x| (0..32).any(|y| f0.data()[(y * 32 + x) * 3 + 1] > 0.0)).max().unwrap();
            if occupied + 3 < 31 {
                break v;
            }
            s.seed += 1;
        };
        for t in 1..=3 {
            for y in 0..32 {
                for x in t..32 {
                    for ch in 0..3 {
                        let a = v.data()[((t * 32 + y) * 32 + x) * 3 + ch];
                        let b = v.data()[((y * 32) + x - t) * 3 + ch];
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_shape_is_rejected() {
        let s = SynthSpec { height: 6, width: 6, ..spec(ShapeKind::Square, Direction::Up, 0) };
        assert!(synth_video::<f32>(&s).is_err());
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(23, 3, 24), (22, -3));
        assert_eq!(bounce(1, -3, 24), (2, 3));
        assert_eq!(bounce(5, 2, 24), (7, 2));
    }

    fn textured_shift(dy: i64, dx: i64, frames: usize) -> Tensor<f64> {
        let mut r = rng::seeded(0);
        let big: Vec<f64> = (0..64 * 64).map(|_| r.random::<f64>()).collect();
        let mut data = Vec::new();
        for f in 0..frames as i64 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let v = big[((y - f * dy + 16) * 64 + (x - f * dx + 16)) as usize];
                    data.push(v);
                }
            }
        }
        Tensor::new(&[frames, 32, 32, 1], data).unwrap()
    }

    #[test]
    fn motion_score_examples() {
        let still = textured_shift(0, 0, 4);
        assert_eq!(motion_score(&still).unwrap(), 0.0);
        let moving = textured_shift(0, 1, 4);
        let s = motion_score(&moving).unwrap();
        assert!((s - 1.0).abs() <= 0.1, "{s}");
        let brighter = moving.map(|v| v + 0.25);
        assert_eq!(motion_score(&brighter).unwrap(), s);
        assert!(motion_score(&moving.slice_rows(0, 1).unwrap()).is_err());
    }

    #[test]
    fn motion_score_is_monotone_in_speed() {
        for shape in ShapeKind::ALL {
            for dir in Direction::ALL {
                let scores: Vec<f64> = (0..SPEEDS.len())
                    .map(|sp| {
                        let v = synth_video::<f32>(&spec(shape, dir, sp)).unwrap().video;
                        motion_score(&v).unwrap()
                    })
                    .collect();
                assert!(scores.windows(2).all(|w| w[0] < w[1]), "{shape:?} {dir:?} {scores:?}");
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full(&[2, 2], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[4])).is_err());
    }
}
