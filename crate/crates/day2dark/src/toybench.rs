//! Synthetic audio-visual benchmark with controllable illuminance.
//!
//! Each class has a moving-shape visual signature and a two-tone audio
//! signature. Darkness only touches pixels, never audio, so a model that
//! listens can recognize clips a purely visual model cannot. The labeled
//! training split is daylight-heavy, the test split is dark-skewed, and the
//! unlabeled pool contains dark distractor clips with none of the class
//! signatures.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{Clip, FrameVolume, Label, Waveform, CHANNELS};
use crate::error::{Day2DarkError, Result};
use crate::illuminance::clip_illuminance;
use crate::rng::{normal, rng_for};

/// Everything that determines a generated dataset. The seed fully determines
/// the output: equal configs give byte-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_classes: usize,
    /// Labeled training clips per class.
    pub clips_per_class: usize,
    pub val_clips_per_class: usize,
    pub test_clips_per_class: usize,
    /// Target fraction of labeled training clips with `Y <= t`.
    pub dark_fraction_train: f64,
    /// The test split is dark-skewed by default.
    pub dark_fraction_test: f64,
    pub unlabeled_pool_size: usize,
    /// Fraction of pool clips that contain target-class content; 0 keeps the
    /// pool fully task-irrelevant.
    pub relevant_fraction: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub seed: u64,
    /// Darkness threshold.
    pub t: f64,
    /// Multi-label mode assigns 1-3 active classes per clip.
    pub multi_label: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_classes: 8,
            clips_per_class: 100,
            val_clips_per_class: 10,
            test_clips_per_class: 20,
            dark_fraction_train: 0.02,
            dark_fraction_test: 0.5,
            unlabeled_pool_size: 120,
            relevant_fraction: 0.0,
            frames: 8,
            height: 16,
            width: 16,
            fps: 8,
            sample_rate: 4000,
            seed: 0,
            t: 40.0,
            multi_label: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Day2DarkError::config("n_classes must be positive"));
        }
        for (name, f) in [
            ("dark_fraction_train", self.dark_fraction_train),
            ("dark_fraction_test", self.dark_fraction_test),
            ("relevant_fraction", self.relevant_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Day2DarkError::config(format!(
                    "{name} must be in [0,1], got {f}"
                )));
            }
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Day2DarkError::config("frame geometry must be positive"));
        }
        if self.fps == 0 || self.sample_rate == 0 {
            return Err(Day2DarkError::config(
                "fps and sample_rate must be positive",
            ));
        }
        if self.t <= 0.0 {
            return Err(Day2DarkError::config("darkness threshold must be positive"));
        }
        let top_tone = class_tones(self.n_classes - 1).1;
        if top_tone >= 0.95 * self.sample_rate as f64 / 2.0 {
            return Err(Day2DarkError::config(format!(
                "class {} tone {top_tone:.0} Hz exceeds Nyquist at {} Hz; raise sample_rate or \
                 lower n_classes",
                self.n_classes - 1,
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn samples_per_clip(&self) -> usize {
        (self.frames as u64 * self.sample_rate as u64 / self.fps as u64) as usize
    }
}

/// Labeled splits plus the unlabeled dark pool.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub n_classes: usize,
    pub multi_label: bool,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
    pub pool: Vec<Clip>,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[Clip]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            "pool" => Some(&self.pool),
            _ => None,
        }
    }

    pub fn splits(&self) -> [(&'static str, &[Clip]); 4] {
        [
            ("train", self.train.as_slice()),
            ("val", self.val.as_slice()),
            ("test", self.test.as_slice()),
            ("pool", self.pool.as_slice()),
        ]
    }
}

/// The two tone frequencies carrying a class's audio signature.
pub fn class_tones(class_id: usize) -> (f64, f64) {
    let f1 = 280.0 + 130.0 * class_id as f64;
    (f1, f1 * 1.57)
}

/// Illuminance targets: day clips well above the threshold, dark clips with
/// margin below it so the +/-10% tolerance cannot cross `t`.
fn sample_target(rng: &mut ChaCha8Rng, dark: bool, t: f64) -> f64 {
    if dark {
        rng.gen_range(0.15 * t..0.75 * t)
    } else {
        rng.gen_range(1.4 * t..2.75 * t)
    }
}

const BACKGROUND: f64 = 0.50;
const LAMP_PROBABILITY: f64 = 0.3;
const SENSOR_NOISE_SIGMA: f64 = 1.5;

/// What a clip depicts: one or more target classes, or distractor content.
enum Content<'a> {
    Classes(&'a [usize]),
    Distractor,
}

/// Reflectance pattern in roughly [0, 1]: class shapes and textures before
/// any illuminance scaling.
fn render_pattern(
    cfg: &BenchConfig,
    content: &Content,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, [f64; 3]) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut pattern = vec![BACKGROUND; t * h * w];

    // Per-clip nuisance: texture phase and a possible occluder bar keep the
    // visual task from being perfectly solvable even in daylight.
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let occlude = rng.gen_bool(0.10);
    let occ_row = rng.gen_range(0..h);

    match content {
        Content::Classes(classes) => {
            for (rank, &class_id) in classes.iter().enumerate() {
                draw_class_shape(cfg, &mut pattern, class_id, rank, rng);
            }
            // Class-specific texture: a stripe frequency unique to the class,
            // horizontal for even classes, vertical for odd. This survives
            // patch pooling, unlike position or motion cues.
            let class = classes[0];
            let freq = 0.55 + 0.5 * class as f64;
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let coord = if class % 2 == 0 { y } else { x } as f64;
                        let stripe = 0.14 * (freq * coord + phase).sin();
                        pattern[(ti * h + y) * w + x] += stripe;
                    }
                }
            }
        }
        Content::Distractor => {
            // Drifting blob field with no class geometry.
            let n_blobs = rng.gen_range(2..5);
            for _ in 0..n_blobs {
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                let vy = rng.gen_range(-1.0..1.0);
                let vx = rng.gen_range(-1.0..1.0);
                let radius = rng.gen_range(1.5..3.5);
                for ti in 0..t {
                    let by = cy + vy * ti as f64;
                    let bx = cx + vx * ti as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                            if d2 < radius * radius {
                                pattern[(ti * h + y) * w + x] += 0.35;
                            }
                        }
                    }
                }
            }
        }
    }

    // Mild reflectance noise everywhere.
    for v in pattern.iter_mut() {
        *v += 0.03 * normal(rng);
        *v = v.clamp(0.0, 1.0);
    }
    if occlude {
        for ti in 0..t {
            for x in 0..w {
                pattern[(ti * h + occ_row) * w + x] = BACKGROUND * 0.5;
            }
        }
    }

    // Near-white per-clip hue so the luma budget stays high.
    let hue = [
        0.88 + 0.12 * rng.gen::<f64>(),
        0.88 + 0.12 * rng.gen::<f64>(),
        0.88 + 0.12 * rng.gen::<f64>(),
    ];
    (pattern, hue)
}

/// A bright class-specific shape moving along a class-specific direction.
fn draw_class_shape(
    cfg: &BenchConfig,
    pattern: &mut [f64],
    class_id: usize,
    rank: usize,
    rng: &mut ChaCha8Rng,
) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let dirs = [
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (-1.0, 0.0),
        (0.0, -1.0),
        (1.0, -1.0),
        (-1.0, 1.0),
        (-1.0, -1.0),
    ];
    let (vy, vx) = dirs[class_id % dirs.len()];
    let kind = class_id % 4;
    let base = if class_id % 8 < 4 {
        h.min(w) / 4
    } else {
        h.min(w) / 3
    };
    let size = (base.max(2)) / (rank + 1).max(1);
    let y0: f64 = rng.gen_range(0.0..h as f64);
    let x0: f64 = rng.gen_range(0.0..w as f64);
    let level = if rank == 0 { 1.0 } else { 0.85 };

    for ti in 0..t {
        let cy = (y0 + vy * ti as f64).rem_euclid(h as f64) as usize;
        let cx = (x0 + vx * ti as f64).rem_euclid(w as f64) as usize;
        for dy in 0..size {
            for dx in 0..size {
                let (y, x) = ((cy + dy) % h, (cx + dx) % w);
                let on = match kind {
                    0 => true,                             // block
                    1 => dy == size / 2 || dx == size / 2, // cross
                    2 => dx % 2 == 0,                      // vertical stripes
                    _ => dy == dx,                         // diagonal
                };
                if on {
                    pattern[(ti * h + y) * w + x] = level;
                }
            }
        }
    }
}

/// Class audio: a fixed pair of tones, invariant to everything visual.
fn render_audio(cfg: &BenchConfig, content: &Content, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.samples_per_clip();
    let sr = cfg.sample_rate as f64;
    let mut samples = vec![0.0f32; n];
    match content {
        Content::Classes(classes) => {
            let gain = 0.35 / classes.len() as f64;
            for &class_id in classes.iter() {
                let (f1, f2) = class_tones(class_id);
                let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for (i, s) in samples.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *s += (gain * (std::f64::consts::TAU * f1 * t + p1).sin()
                        + gain * (std::f64::consts::TAU * f2 * t + p2).sin())
                        as f32;
                }
            }
        }
        Content::Distractor => {
            // Broadband chirp plus noise bursts; avoids the class tone grid.
            let f_start = rng.gen_range(120.0..200.0);
            let f_end = rng.gen_range(0.6..0.9) * sr / 2.0;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dur = n as f64 / sr;
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let f = f_start + (f_end - f_start) * t / dur;
                *s += (0.3 * (std::f64::consts::TAU * f * t + phase).sin()) as f32;
            }
        }
    }
    for s in samples.iter_mut() {
        *s += (0.02 * normal(rng)) as f32;
    }
    samples
}

fn inject_lamp(cfg: &BenchConfig, data: &mut [f32], rng: &mut ChaCha8Rng) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let radius = 1.6f64;
    let cy = rng.gen_range(0.0..h as f64);
    let cx = rng.gen_range(0.0..w as f64);
    let level: f32 = rng.gen_range(180.0..240.0);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 < radius * radius {
                    let base = ((ti * h + y) * w + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        data[base + c] = level;
                    }
                }
            }
        }
    }
}

fn mean_luma(data: &[f32]) -> f64 {
    let weights = crate::illuminance::LUMA_WEIGHTS;
    let mut acc = 0.0f64;
    for px in data.chunks_exact(CHANNELS) {
        acc += weights[0] * px[0] as f64 + weights[1] * px[1] as f64 + weights[2] * px[2] as f64;
    }
    acc / (data.len() / CHANNELS) as f64
}

fn generate_clip_with_content(
    cfg: &BenchConfig,
    content: Content,
    illuminance_target: f64,
    seed: u64,
    clip_id: String,
    label: Option<Label>,
) -> Result<Clip> {
    if illuminance_target <= 0.0 {
        return Err(Day2DarkError::Generation(format!(
            "illuminance target {illuminance_target} must be positive"
        )));
    }
    let mut rng = rng_for(cfg.seed, seed);
    let (pattern, hue) = render_pattern(cfg, &content, &mut rng);
    let audio = render_audio(cfg, &content, &mut rng);

    // Raw RGB volume from pattern * hue; then scale toward the target.
    let n_px = pattern.len();
    let mut data = vec![0.0f32; n_px * CHANNELS];
    for (i, &v) in pattern.iter().enumerate() {
        for c in 0..CHANNELS {
            data[i * CHANNELS + c] = (v * hue[c]) as f32;
        }
    }
    let m_raw = mean_luma(&data);
    let max_raw = data.iter().cloned().fold(0.0f32, f32::max) as f64;
    if m_raw <= 0.0 {
        return Err(Day2DarkError::Generation("blank pattern".into()));
    }
    let y_max = 255.0 / max_raw * m_raw;
    if illuminance_target > y_max {
        return Err(Day2DarkError::Generation(format!(
            "illuminance target {illuminance_target:.1} unreachable after clipping; feasible \
             range is (0, {y_max:.1}]"
        )));
    }
    let scale = (illuminance_target / m_raw) as f32;
    for v in data.iter_mut() {
        *v = (*v * scale).clamp(0.0, 255.0);
    }

    let dark = illuminance_target <= cfg.t;
    if dark && rng.gen_bool(LAMP_PROBABILITY) {
        inject_lamp(cfg, &mut data, &mut rng);
    }
    for v in data.iter_mut() {
        *v = (*v + (SENSOR_NOISE_SIGMA * normal(&mut rng)) as f32).clamp(0.0, 255.0);
    }

    // The lamp, noise floor and clipping shift the mean; correct multiplicatively.
    for _ in 0..6 {
        let y = mean_luma(&data);
        if (y - illuminance_target).abs() <= 0.02 * illuminance_target {
            break;
        }
        let corr = (illuminance_target / y) as f32;
        for v in data.iter_mut() {
            *v = (*v * corr).clamp(0.0, 255.0);
        }
    }
    let y = mean_luma(&data);
    if (y - illuminance_target).abs() > 0.10 * illuminance_target {
        return Err(Day2DarkError::Generation(format!(
            "clip {clip_id}: settled at Y={y:.2}, outside +/-10% of target \
             {illuminance_target:.2}; feasible range is (0, {y_max:.1}]"
        )));
    }

    let frames = FrameVolume::new(cfg.frames, cfg.height, cfg.width, data)?;
    let mut clip = Clip {
        id: clip_id,
        frames,
        audio: Waveform {
            sample_rate: cfg.sample_rate,
            samples: audio,
        },
        label,
        clip_y: 0.0,
    };
    clip.clip_y = clip_illuminance(&clip)?.clip_y;
    Ok(clip)
}

/// Generate one labeled clip of `class_id` near `illuminance_target`.
/// The same `(class_id, illuminance_target, seed)` always yields a
/// bit-identical clip for a fixed config.
pub fn generate_clip(
    cfg: &BenchConfig,
    class_id: usize,
    illuminance_target: f64,
    seed: u64,
) -> Result<Clip> {
    if class_id >= cfg.n_classes {
        return Err(Day2DarkError::invalid(format!(
            "class {class_id} out of range (n_classes = {})",
            cfg.n_classes
        )));
    }
    let classes = [class_id];
    generate_clip_with_content(
        cfg,
        Content::Classes(&classes),
        illuminance_target,
        seed,
        format!("c{class_id}_s{seed}"),
        Some(Label::Single(class_id)),
    )
}

/// Scale intensities by `factor`, add sensor noise, re-clip and refresh the
/// cached illuminance. Audio is untouched.
pub fn darken(clip: &Clip, factor: f64, noise_sigma: f64, seed: u64) -> Result<Clip> {
    if factor <= 0.0 || factor > 1.0 {
        return Err(Day2DarkError::invalid(format!(
            "darken factor must lie in (0, 1], got {factor}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Day2DarkError::invalid("noise sigma must be non-negative"));
    }
    let mut out = clip.clone();
    let mut rng = rng_for(seed, 0xD4C);
    for v in out.frames.data.iter_mut() {
        let mut nv = *v as f64 * factor;
        if noise_sigma > 0.0 {
            nv += noise_sigma * normal(&mut rng);
        }
        *v = nv.clamp(0.0, 255.0) as f32;
    }
    out.clip_y = clip_illuminance(&out)?.clip_y;
    Ok(out)
}

fn multi_label_classes(cfg: &BenchConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = rng.gen_range(1..=3usize.min(cfg.n_classes));
    let mut chosen = Vec::with_capacity(count);
    while chosen.len() < count {
        let c = rng.gen_range(0..cfg.n_classes);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    chosen
}

fn generate_labeled_split(
    cfg: &BenchConfig,
    split: &str,
    per_class: usize,
    dark_fraction: f64,
    tag: u64,
) -> Result<Vec<Clip>> {
    let total = per_class * cfg.n_classes;
    let n_dark = (dark_fraction * total as f64).round() as usize;
    // Spread dark slots over a seeded permutation so no class soaks them up.
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = rng_for(cfg.seed, tag);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut is_dark = vec![false; total];
    for &slot in order.iter().take(n_dark) {
        is_dark[slot] = true;
    }

    let mut clips = Vec::with_capacity(total);
    for idx in 0..total {
        let class_id = idx / per_class;
        let mut clip_rng = rng_for(cfg.seed, tag ^ (0x1000 + idx as u64).wrapping_mul(0x9E3B));
        let target = sample_target(&mut clip_rng, is_dark[idx], cfg.t);
        let clip_seed = tag.wrapping_mul(1_000_003) + idx as u64;
        let id = format!("{split}_{idx:05}");
        let clip = if cfg.multi_label {
            let mut classes = multi_label_classes(cfg, &mut clip_rng);
            if !classes.contains(&class_id) {
                classes[0] = class_id;
                classes.sort_unstable();
                classes.dedup();
            }
            let mut bits = vec![false; cfg.n_classes];
            for &c in &classes {
                bits[c] = true;
            }
            generate_clip_with_content(
                cfg,
                Content::Classes(&classes),
                target,
                clip_seed,
                id,
                Some(Label::Multi(bits)),
            )?
        } else {
            generate_clip_with_content(
                cfg,
                Content::Classes(&[class_id]),
                target,
                clip_seed,
                id,
                Some(Label::Single(class_id)),
            )?
        };
        clips.push(clip);
    }
    Ok(clips)
}

/// Generate the full dataset: labeled train/val/test splits with the
/// configured dark fractions, plus the unlabeled dark pool.
pub fn generate_dataset(cfg: &BenchConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let train = generate_labeled_split(
        cfg,
        "train",
        cfg.clips_per_class,
        cfg.dark_fraction_train,
        1,
    )?;
    let val = generate_labeled_split(
        cfg,
        "val",
        cfg.val_clips_per_class,
        cfg.dark_fraction_train,
        2,
    )?;
    let test = generate_labeled_split(
        cfg,
        "test",
        cfg.test_clips_per_class,
        cfg.dark_fraction_test,
        3,
    )?;

    let mut pool = Vec::with_capacity(cfg.unlabeled_pool_size);
    for idx in 0..cfg.unlabeled_pool_size {
        let mut clip_rng = rng_for(cfg.seed, 0x4000 + idx as u64);
        let target = sample_target(&mut clip_rng, true, cfg.t);
        let relevant = clip_rng.gen_bool(cfg.relevant_fraction);
        let clip_seed = 4_000_000 + idx as u64;
        let id = format!("pool_{idx:05}");
        let clip = if relevant {
            let class_id = clip_rng.gen_range(0..cfg.n_classes);
            generate_clip_with_content(
                cfg,
                Content::Classes(&[class_id]),
                target,
                clip_seed,
                id,
                None,
            )?
        } else {
            generate_clip_with_content(cfg, Content::Distractor, target, clip_seed, id, None)?
        };
        pool.push(clip);
    }

    Ok(DatasetSplit {
        n_classes: cfg.n_classes,
        multi_label: cfg.multi_label,
        train,
        val,
        test,
        pool,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout
//
//   <root>/manifest                      text: version, config echo, clip list
//   <root>/<split>/<clip_id>/frames.bin  FRM1 | t,h,w,c: u32 | dtype: u32 | f32 LE
//   <root>/<split>/<clip_id>/audio.raw   AUD1 | sample_rate: u32 | n: u64 | f32 LE
//   <root>/<split>/<clip_id>/meta        text: label, clip_y, seed
// ---------------------------------------------------------------------------

const FRAMES_MAGIC: &[u8; 4] = b"FRM1";
const AUDIO_MAGIC: &[u8; 4] = b"AUD1";
const DTYPE_F32: u32 = 1;

fn write_frames(path: &Path, vol: &FrameVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FRAMES_MAGIC)?;
    for dim in [
        vol.t as u32,
        vol.h as u32,
        vol.w as u32,
        CHANNELS as u32,
        DTYPE_F32,
    ] {
        w.write_all(&dim.to_le_bytes())?;
    }
    for v in &vol.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_frames(path: &Path) -> Result<FrameVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FRAMES_MAGIC {
        return Err(malformed(path, "bad frames magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut dims = [0u32; 5];
    for d in dims.iter_mut() {
        r.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf);
    }
    if dims[3] as usize != CHANNELS || dims[4] != DTYPE_F32 {
        return Err(malformed(path, "unsupported channel count or dtype"));
    }
    let n = dims[0] as usize * dims[1] as usize * dims[2] as usize * CHANNELS;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf)?;
        data.push(f32::from_le_bytes(u32buf));
    }
    FrameVolume::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
}

fn write_audio(path: &Path, wf: &Waveform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(AUDIO_MAGIC)?;
    w.write_all(&wf.sample_rate.to_le_bytes())?;
    w.write_all(&(wf.samples.len() as u64).to_le_bytes())?;
    for s in &wf.samples {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

fn read_audio(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != AUDIO_MAGIC {
        return Err(malformed(path, "bad audio magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let sample_rate = u32::from_le_bytes(u32buf);
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf)?;
        samples.push(f32::from_le_bytes(u32buf));
    }
    Ok(Waveform {
        sample_rate,
        samples,
    })
}

fn malformed(path: &Path, reason: &str) -> Day2DarkError {
    Day2DarkError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_meta(path: &Path, clip: &Clip) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match &clip.label {
        Some(Label::Single(c)) => writeln!(w, "label: {c}")?,
        Some(Label::Multi(bits)) => {
            let active: Vec<String> = bits
                .iter()
                .enumerate()
                .filter(|(_, b)| **b)
                .map(|(i, _)| i.to_string())
                .collect();
            writeln!(w, "labels: {}", active.join(","))?;
        }
        None => writeln!(w, "label: none")?,
    }
    writeln!(w, "clip_y: {:.17e}", clip.clip_y)?;
    Ok(())
}

fn read_meta(path: &Path, n_classes: usize) -> Result<(Option<Label>, f64)> {
    let text = fs::read_to_string(path)?;
    let mut label = None;
    let mut clip_y = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("label: ") {
            if rest != "none" {
                let c: usize = rest
                    .trim()
                    .parse()
                    .map_err(|_| malformed(path, "bad label"))?;
                label = Some(Label::Single(c));
            }
        } else if let Some(rest) = line.strip_prefix("labels: ") {
            let mut bits = vec![false; n_classes];
            for part in rest.trim().split(',').filter(|p| !p.is_empty()) {
                let c: usize = part.parse().map_err(|_| malformed(path, "bad labels"))?;
                if c >= n_classes {
                    return Err(malformed(path, "label index out of range"));
                }
                bits[c] = true;
            }
            label = Some(Label::Multi(bits));
        } else if let Some(rest) = line.strip_prefix("clip_y: ") {
            clip_y = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| malformed(path, "bad clip_y"))?,
            );
        }
    }
    let clip_y = clip_y.ok_or_else(|| malformed(path, "missing clip_y"))?;
    Ok((label, clip_y))
}

/// Write the dataset under `root`, one directory per clip plus a manifest.
pub fn save_dataset(ds: &DatasetSplit, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = BufWriter::new(File::create(root.join("manifest"))?);
    writeln!(manifest, "day2dark-dataset v1")?;
    writeln!(manifest, "n_classes {}", ds.n_classes)?;
    writeln!(manifest, "multi_label {}", u8::from(ds.multi_label))?;
    for (split, clips) in ds.splits() {
        for clip in clips {
            writeln!(manifest, "{split} {}", clip.id)?;
            let dir = root.join(split).join(&clip.id);
            fs::create_dir_all(&dir)?;
            write_frames(&dir.join("frames.bin"), &clip.frames)?;
            write_audio(&dir.join("audio.raw"), &clip.audio)?;
            write_meta(&dir.join("meta"), clip)?;
        }
    }
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    let manifest_path = root.join("manifest");
    let text = fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("day2dark-dataset v1") => {}
        _ => return Err(malformed(&manifest_path, "unknown manifest version")),
    }
    let mut n_classes = 0usize;
    let mut multi_label = false;
    let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("n_classes ") {
            n_classes = rest
                .trim()
                .parse()
                .map_err(|_| malformed(&manifest_path, "bad n_classes"))?;
        } else if let Some(rest) = line.strip_prefix("multi_label ") {
            multi_label = rest.trim() == "1";
        } else if let Some((split, id)) = line.split_once(' ') {
            entries
                .entry(split.to_string())
                .or_default()
                .push(id.to_string());
            order.push((split.to_string(), id.to_string()));
        }
    }
    if n_classes == 0 {
        return Err(malformed(&manifest_path, "missing n_classes"));
    }
    let mut ds = DatasetSplit {
        n_classes,
        multi_label,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        pool: Vec::new(),
    };
    for (split, id) in order {
        let dir = root.join(&split).join(&id);
        let frames = read_frames(&dir.join("frames.bin"))?;
        let audio = read_audio(&dir.join("audio.raw"))?;
        let (label, clip_y) = read_meta(&dir.join("meta"), n_classes)?;
        let clip = Clip {
            id,
            frames,
            audio,
            label,
            clip_y,
        };
        match split.as_str() {
            "train" => ds.train.push(clip),
            "val" => ds.val.push(clip),
            "test" => ds.test.push(clip),
            "pool" => ds.pool.push(clip),
            other => return Err(malformed(&manifest_path, &format!("unknown split {other}"))),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::illuminance::DARK_THRESHOLD;

    fn small_cfg() -> BenchConfig {
        BenchConfig {
            n_classes: 4,
            clips_per_class: 6,
            val_clips_per_class: 2,
            test_clips_per_class: 4,
            dark_fraction_train: 0.1,
            dark_fraction_test: 0.5,
            unlabeled_pool_size: 8,
            seed: 77,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn clip_generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_clip(&cfg, 1, 80.0, 5).unwrap();
        let b = generate_clip(&cfg, 1, 80.0, 5).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        assert_eq!(a.audio.samples, b.audio.samples);
        assert_eq!(a.clip_y.to_bits(), b.clip_y.to_bits());
    }

    #[test]
    fn clip_lands_within_ten_percent_of_target() {
        let cfg = small_cfg();
        for (target, seed) in [(120.0, 0u64), (80.0, 1), (25.0, 2), (10.0, 3)] {
            let clip = generate_clip(&cfg, 0, target, seed).unwrap();
            let rec = clip_illuminance(&clip).unwrap();
            assert!(
                (rec.clip_y - target).abs() <= 0.10 * target,
                "target {target}: got {}",
                rec.clip_y
            );
            assert!(
                (rec.clip_y - clip.clip_y).abs() < 1e-12,
                "cached Y must match"
            );
        }
    }

    #[test]
    fn unreachable_target_names_feasible_range() {
        let cfg = small_cfg();
        let err = generate_clip(&cfg, 0, 250.0, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("feasible"), "{msg}");
    }

    /// Independent DFT-based spectral centroid.
    fn spectral_centroid(samples: &[f32], sr: f64) -> f64 {
        let n = 2048.min(samples.len());
        let mut num = 0.0;
        let mut den = 0.0;
        for bin in 1..n / 2 {
            let f = bin as f64 * sr / n as f64;
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &s) in samples[..n].iter().enumerate() {
                let ang = -std::f64::consts::TAU * bin as f64 * i as f64 / n as f64;
                re += s as f64 * ang.cos();
                im += s as f64 * ang.sin();
            }
            let mag = (re * re + im * im).sqrt();
            num += f * mag;
            den += mag;
        }
        num / den
    }

    #[test]
    fn classes_have_separated_audio_centroids() {
        let cfg = small_cfg();
        let a = generate_clip(&cfg, 0, 80.0, 11).unwrap();
        let b = generate_clip(&cfg, 1, 80.0, 11).unwrap();
        let ca = spectral_centroid(&a.audio.samples, cfg.sample_rate as f64);
        let cb = spectral_centroid(&b.audio.samples, cfg.sample_rate as f64);
        assert!(
            (ca - cb).abs() > 50.0,
            "centroids too close: {ca:.1} vs {cb:.1}"
        );
    }

    #[test]
    fn darken_identity_when_factor_one_and_no_noise() {
        let cfg = small_cfg();
        let clip = generate_clip(&cfg, 2, 90.0, 4).unwrap();
        let same = darken(&clip, 1.0, 0.0, 9).unwrap();
        assert_eq!(clip.frames.data, same.frames.data);
        assert_eq!(clip.audio.samples, same.audio.samples);
    }

    #[test]
    fn darken_halves_illuminance_exactly() {
        let cfg = small_cfg();
        let clip = generate_clip(&cfg, 2, 90.0, 4).unwrap();
        let darker = darken(&clip, 0.5, 0.0, 9).unwrap();
        assert!(
            (darker.clip_y - clip.clip_y / 2.0).abs() < 1e-3,
            "{} vs {}",
            darker.clip_y,
            clip.clip_y / 2.0
        );
    }

    #[test]
    fn darken_never_touches_audio() {
        let cfg = small_cfg();
        let clip = generate_clip(&cfg, 3, 70.0, 6).unwrap();
        let darker = darken(&clip, 0.2, 4.0, 123).unwrap();
        assert_eq!(clip.audio.samples, darker.audio.samples);
        assert!(darker.clip_y < clip.clip_y);
    }

    #[test]
    fn darken_rejects_bad_factor() {
        let cfg = small_cfg();
        let clip = generate_clip(&cfg, 0, 70.0, 6).unwrap();
        assert!(darken(&clip, 0.0, 0.0, 0).is_err());
        assert!(darken(&clip, -1.0, 0.0, 0).is_err());
        assert!(darken(&clip, 1.5, 0.0, 0).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.frames.data, y.frames.data);
            assert_eq!(x.audio.samples, y.audio.samples);
        }
        // Per-class label balance.
        let mut counts = vec![0usize; cfg.n_classes];
        for clip in &a.train {
            if let Some(Label::Single(c)) = clip.label {
                counts[c] += 1;
            }
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "class counts {counts:?}");
    }

    #[test]
    fn train_dark_fraction_matches_request() {
        let cfg = BenchConfig {
            clips_per_class: 25, // 8 classes * 25 = 200 clips
            dark_fraction_train: 0.1,
            unlabeled_pool_size: 0,
            val_clips_per_class: 0,
            test_clips_per_class: 0,
            seed: 5,
            ..BenchConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let n_dark = ds.train.iter().filter(|c| c.clip_y <= cfg.t).count();
        let want = (0.1 * ds.train.len() as f64).round() as usize;
        assert!(
            (n_dark as i64 - want as i64).abs() <= 1,
            "dark {n_dark}, wanted about {want}"
        );
    }

    #[test]
    fn pool_is_entirely_dark() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.pool.len(), cfg.unlabeled_pool_size);
        for clip in &ds.pool {
            let rec = clip_illuminance(clip).unwrap();
            assert!(
                rec.clip_y <= DARK_THRESHOLD,
                "pool clip at Y={}",
                rec.clip_y
            );
            assert!(clip.label.is_none());
        }
    }

    #[test]
    fn empty_pool_is_allowed() {
        let cfg = BenchConfig {
            unlabeled_pool_size: 0,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.pool.is_empty());
    }

    #[test]
    fn multi_label_clips_have_one_to_three_actives() {
        let cfg = BenchConfig {
            multi_label: true,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for clip in &ds.train {
            let bits = clip.label.as_ref().unwrap().as_multi().unwrap();
            let active = bits.iter().filter(|b| **b).count();
            assert!((1..=3).contains(&active));
        }
    }

    #[test]
    fn config_rejects_too_many_classes_for_sample_rate() {
        let cfg = BenchConfig {
            n_classes: 40,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn disk_round_trip_preserves_everything() {
        let cfg = BenchConfig {
            n_classes: 2,
            clips_per_class: 2,
            val_clips_per_class: 1,
            test_clips_per_class: 1,
            unlabeled_pool_size: 2,
            seed: 3,
            ..BenchConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("d2d_io_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&ds, &dir).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.n_classes, ds.n_classes);
        assert_eq!(loaded.train.len(), ds.train.len());
        assert_eq!(loaded.pool.len(), ds.pool.len());
        for (a, b) in ds.train.iter().zip(&loaded.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.frames.data, b.frames.data);
            assert_eq!(a.audio.samples, b.audio.samples);
            assert_eq!(a.label, b.label);
            assert_eq!(a.clip_y.to_bits(), b.clip_y.to_bits());
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
