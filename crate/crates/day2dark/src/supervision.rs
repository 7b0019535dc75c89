//! Supervision beyond the labeled daylight data: auxiliary-teacher
//! predictions, the pseudo-label autoencoder, the combined losses, day/dark
//! mixing and the unlabeled-pool confidence filter.
//!
//! Unlabeled dark clips carry no class labels, so their training signal is a
//! compact 64-dim autoencoder latent of concatenated frozen-teacher
//! predictions. Targets are computed once and cached; teacher and autoencoder
//! fingerprints guard the cache.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::clip::{Clip, FrameVolume, Label, CHANNELS};
use crate::error::{Day2DarkError, Result};
use crate::illuminance::clip_illuminance;
use crate::nn::{Bound, GradAccum, Linear, ParamStore, SgdMomentum};
use crate::recognizer::Model;
use crate::rng::{normal, rng_for};
use crate::tensor::Mat;

/// Latent width of the pseudo-label bottleneck.
pub const PSEUDO_LATENT_DIM: usize = 64;

// ---------------------------------------------------------------------------
// Auxiliary teachers
// ---------------------------------------------------------------------------

/// A frozen self-supervised model probed for pseudo-label material.
pub trait Teacher: Sync + Send {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn predict(&self, clip: &Clip) -> Result<Vec<f64>>;
    /// Stable hash of the teacher's frozen state, used to validate caches.
    fn fingerprint(&self) -> u64;
}

/// Per-teacher prediction vectors plus their concatenation.
#[derive(Debug, Clone)]
pub struct AuxiliaryPredictions {
    pub per_teacher: Vec<Vec<f64>>,
    pub concat: Vec<f64>,
}

/// Run every teacher on a clip and concatenate, checking each teacher's
/// declared output width.
pub fn collect_auxiliary_predictions(
    clip: &Clip,
    teachers: &[Box<dyn Teacher>],
) -> Result<AuxiliaryPredictions> {
    if teachers.is_empty() {
        return Err(Day2DarkError::invalid("need at least one teacher"));
    }
    let mut per_teacher = Vec::with_capacity(teachers.len());
    let mut concat = Vec::new();
    for teacher in teachers {
        let p = teacher.predict(clip)?;
        if p.len() != teacher.output_dim() {
            return Err(Day2DarkError::invalid(format!(
                "teacher {} emitted {} dims, declared {}",
                teacher.name(),
                p.len(),
                teacher.output_dim()
            )));
        }
        concat.extend_from_slice(&p);
        per_teacher.push(p);
    }
    Ok(AuxiliaryPredictions {
        per_teacher,
        concat,
    })
}

pub fn teachers_fingerprint(teachers: &[Box<dyn Teacher>]) -> u64 {
    let mut h: u64 = 0x1234_5678_9abc_def1;
    for t in teachers {
        h ^= t.fingerprint().rotate_left(13);
        h = h.wrapping_mul(0x2545_f491_4f6c_dd1d);
    }
    h
}

/// Frozen random audio-visual embedding network; stand-in for an embedding
/// teacher. Emits a 32-dim tanh embedding of coarse clip statistics.
pub struct EmbeddingTeacher {
    w: Mat,
    b: Mat,
    seed: u64,
}

impl EmbeddingTeacher {
    pub const DIM: usize = 32;
    const DESC_DIM: usize = 44;

    pub fn new(seed: u64) -> EmbeddingTeacher {
        let mut rng = rng_for(seed, 0xE3B);
        let std = (1.0 / Self::DESC_DIM as f64).sqrt();
        let w = Mat::from_vec(
            Self::DESC_DIM,
            Self::DIM,
            (0..Self::DESC_DIM * Self::DIM)
                .map(|_| normal(&mut rng) * std)
                .collect(),
        );
        let b = Mat::from_vec(
            1,
            Self::DIM,
            (0..Self::DIM).map(|_| normal(&mut rng) * 0.1).collect(),
        );
        EmbeddingTeacher { w, b, seed }
    }

    fn descriptor(clip: &Clip) -> Vec<f64> {
        let mut desc = Vec::with_capacity(Self::DESC_DIM);
        let vol = &clip.frames;
        let half = (vol.t / 2).max(1);
        // Per-channel mean/std over each temporal half: 12 dims.
        for range in [0..half, half.min(vol.t - 1)..vol.t] {
            for c in 0..CHANNELS {
                let mut vals = Vec::new();
                for t in range.clone() {
                    for px in vol.frame(t).chunks_exact(CHANNELS) {
                        vals.push(px[c] as f64 / 255.0);
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                desc.push(mean);
                desc.push(var.sqrt());
            }
        }
        // 4x4 spatial luma grid averaged over frames: 16 dims.
        for gy in 0..4 {
            for gx in 0..4 {
                let y0 = gy * vol.h / 4;
                let y1 = ((gy + 1) * vol.h / 4).max(y0 + 1);
                let x0 = gx * vol.w / 4;
                let x1 = ((gx + 1) * vol.w / 4).max(x0 + 1);
                let mut acc = 0.0;
                let mut n = 0usize;
                for t in 0..vol.t {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let px = vol.pixel(t, y, x);
                            acc += (px[0] as f64 + px[1] as f64 + px[2] as f64) / (3.0 * 255.0);
                            n += 1;
                        }
                    }
                }
                desc.push(acc / n as f64);
            }
        }
        // Audio: 8 chunk RMS values + 8 coarse band energies: 16 dims.
        let samples = &clip.audio.samples;
        let chunk = (samples.len() / 8).max(1);
        for i in 0..8 {
            let lo = (i * chunk).min(samples.len().saturating_sub(1));
            let hi = ((i + 1) * chunk).min(samples.len()).max(lo + 1);
            let rms = (samples[lo..hi]
                .iter()
                .map(|s| (*s as f64).powi(2))
                .sum::<f64>()
                / (hi - lo) as f64)
                .sqrt();
            desc.push(rms);
        }
        let n = samples.len().min(512);
        let sr = clip.audio.sample_rate as f64;
        for i in 0..8 {
            let freq = 150.0 + i as f64 * (0.4 * sr / 8.0);
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, &s) in samples[..n].iter().enumerate() {
                let ang = std::f64::consts::TAU * freq * t as f64 / sr;
                re += s as f64 * ang.cos();
                im -= s as f64 * ang.sin();
            }
            desc.push(((re * re + im * im).sqrt() / n as f64).min(1.0));
        }
        desc
    }
}

impl Teacher for EmbeddingTeacher {
    fn name(&self) -> &str {
        "embedding"
    }

    fn output_dim(&self) -> usize {
        Self::DIM
    }

    fn predict(&self, clip: &Clip) -> Result<Vec<f64>> {
        let desc = Mat::from_vec(1, Self::DESC_DIM, Self::descriptor(clip));
        let mut out = desc.matmul(&self.w);
        out.add_assign(&self.b);
        Ok(out.data.iter().map(|v| v.tanh()).collect())
    }

    fn fingerprint(&self) -> u64 {
        self.w.bit_hash() ^ self.b.bit_hash().rotate_left(7) ^ self.seed
    }
}

/// Frozen audio-energy-to-spatial-grid correlator; stand-in for a
/// sound-source localization teacher. Emits a flattened 7x7 activation map.
pub struct LocalizationTeacher {
    grid: usize,
}

impl LocalizationTeacher {
    pub fn new() -> LocalizationTeacher {
        LocalizationTeacher { grid: 7 }
    }

    fn cell_luma_series(vol: &FrameVolume, grid: usize, gy: usize, gx: usize) -> Vec<f64> {
        let y0 = gy * vol.h / grid;
        let y1 = ((gy + 1) * vol.h / grid).max(y0 + 1).min(vol.h);
        let x0 = gx * vol.w / grid;
        let x1 = ((gx + 1) * vol.w / grid).max(x0 + 1).min(vol.w);
        (0..vol.t)
            .map(|t| {
                let mut acc = 0.0;
                let mut n = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = vol.pixel(t, y, x);
                        acc += (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
                        n += 1;
                    }
                }
                acc / n as f64
            })
            .collect()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        if va <= 1e-12 || vb <= 1e-12 {
            0.0
        } else {
            cov / (va.sqrt() * vb.sqrt())
        }
    }
}

impl Default for LocalizationTeacher {
    fn default() -> Self {
        Self::new()
    }
}

impl Teacher for LocalizationTeacher {
    fn name(&self) -> &str {
        "localization"
    }

    fn output_dim(&self) -> usize {
        self.grid * self.grid
    }

    fn predict(&self, clip: &Clip) -> Result<Vec<f64>> {
        // Audio energy envelope resampled to the frame count.
        let t = clip.frames.t;
        let samples = &clip.audio.samples;
        let chunk = (samples.len() / t).max(1);
        let envelope: Vec<f64> = (0..t)
            .map(|i| {
                let lo = (i * chunk).min(samples.len().saturating_sub(1));
                let hi = ((i + 1) * chunk).min(samples.len()).max(lo + 1);
                (samples[lo..hi]
                    .iter()
                    .map(|s| (*s as f64).powi(2))
                    .sum::<f64>()
                    / (hi - lo) as f64)
                    .sqrt()
            })
            .collect();
        let mut map = Vec::with_capacity(self.grid * self.grid);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let series = Self::cell_luma_series(&clip.frames, self.grid, gy, gx);
                map.push(Self::pearson(&series, &envelope));
            }
        }
        Ok(map)
    }

    fn fingerprint(&self) -> u64 {
        0x10C4_1173 ^ (self.grid as u64)
    }
}

/// The default toy teacher pair.
pub fn default_teachers(seed: u64) -> Vec<Box<dyn Teacher>> {
    vec![
        Box::new(EmbeddingTeacher::new(seed)),
        Box::new(LocalizationTeacher::new()),
    ]
}

// ---------------------------------------------------------------------------
// Pseudo-label autoencoder
// ---------------------------------------------------------------------------

/// Training knobs for the pseudo-label autoencoder.
#[derive(Debug, Clone)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden: 96,
            latent: PSEUDO_LATENT_DIM,
            epochs: 300,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Two hidden layers on each side of the latent bottleneck.
pub struct Autoencoder {
    pub input_dim: usize,
    pub latent: usize,
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    enc3: Linear,
    dec1: Linear,
    dec2: Linear,
    dec3: Linear,
}

impl Autoencoder {
    fn build(input_dim: usize, cfg: &AutoencoderConfig) -> Autoencoder {
        let mut store = ParamStore::new();
        let mut rng = rng_for(cfg.seed, 0xAE);
        let enc1 = Linear::new(&mut store, "enc1", input_dim, cfg.hidden, &mut rng);
        let enc2 = Linear::new(&mut store, "enc2", cfg.hidden, cfg.hidden, &mut rng);
        let enc3 = Linear::new(&mut store, "enc3", cfg.hidden, cfg.latent, &mut rng);
        let dec1 = Linear::new(&mut store, "dec1", cfg.latent, cfg.hidden, &mut rng);
        let dec2 = Linear::new(&mut store, "dec2", cfg.hidden, cfg.hidden, &mut rng);
        let dec3 = Linear::new(&mut store, "dec3", cfg.hidden, input_dim, &mut rng);
        Autoencoder {
            input_dim,
            latent: cfg.latent,
            store,
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
            dec3,
        }
    }

    fn forward_plain(&self, layers: &[Linear], x: &Mat, relu_last: bool) -> Mat {
        let mut h = x.clone();
        for (i, lin) in layers.iter().enumerate() {
            let mut y = h.matmul(self.store.get(lin.w));
            for r in 0..y.rows {
                for (c, v) in self.store.get(lin.b).data.iter().enumerate() {
                    y.data[r * y.cols + c] += v;
                }
            }
            if i + 1 < layers.len() || relu_last {
                y = y.map(|v| v.max(0.0));
            }
            h = y;
        }
        h
    }

    /// `q = encoder(p)`, a pure deterministic function.
    pub fn encode(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.input_dim {
            return Err(Day2DarkError::shape(format!(
                "autoencoder expects {} dims, got {}",
                self.input_dim,
                p.len()
            )));
        }
        let x = Mat::from_vec(1, p.len(), p.to_vec());
        Ok(self
            .forward_plain(&[self.enc1, self.enc2, self.enc3], &x, false)
            .data)
    }

    pub fn decode(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.latent {
            return Err(Day2DarkError::shape(format!(
                "decoder expects {} dims, got {}",
                self.latent,
                q.len()
            )));
        }
        let x = Mat::from_vec(1, q.len(), q.to_vec());
        Ok(self
            .forward_plain(&[self.dec1, self.dec2, self.dec3], &x, false)
            .data)
    }

    /// Mean per-vector L1 reconstruction error over a set.
    pub fn reconstruction_l1(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for p in data {
            let r = self.decode(&self.encode(p)?)?;
            total += p.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.subset_hash(|_| true)
    }
}

/// Train the bottleneck autoencoder on the pool's concatenated predictions
/// with an L1 reconstruction loss. Runs before any recognizer training.
pub fn train_autoencoder(
    pool_predictions: &[Vec<f64>],
    cfg: &AutoencoderConfig,
) -> Result<Autoencoder> {
    if pool_predictions.is_empty() {
        return Err(Day2DarkError::invalid(
            "cannot train autoencoder on an empty pool",
        ));
    }
    let input_dim = pool_predictions[0].len();
    if pool_predictions.iter().any(|p| p.len() != input_dim) {
        return Err(Day2DarkError::invalid(
            "prediction vectors must share one width",
        ));
    }
    let mut ae = Autoencoder::build(input_dim, cfg);
    let mut opt = SgdMomentum::new(cfg.momentum, ae.store.len());
    let trainable = vec![true; ae.store.len()];
    let mut order: Vec<usize> = (0..pool_predictions.len()).collect();
    let mut rng = rng_for(cfg.seed, 0xAE5);
    let layers = [ae.enc1, ae.enc2, ae.enc3, ae.dec1, ae.dec2, ae.dec3];
    for epoch in 0..cfg.epochs {
        // Step decay keeps the sign-gradient L1 descent from oscillating.
        let lr = cfg.lr * 0.5f64.powi((5 * epoch / cfg.epochs.max(1)) as i32);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradAccum::new(ae.store.len());
            for &idx in batch {
                let p = &pool_predictions[idx];
                let mut tape = Tape::new();
                let mut bound = Bound::new(&ae.store);
                let mut h = tape.leaf(Mat::from_vec(1, input_dim, p.clone()));
                for (i, lin) in layers.iter().enumerate() {
                    h = lin.forward(&mut tape, &mut bound, &ae.store, h);
                    // Hidden layers are rectified; the latent (i = 2) and the
                    // output (i = 5) stay linear, matching encode/decode.
                    if i != 2 && i + 1 < layers.len() {
                        h = tape.relu(h);
                    }
                }
                let loss = tape.l1_sum(h, p.clone());
                let node_grads = tape.backward(loss);
                grads.merge(&bound.extract_grads(&node_grads));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut ae.store, &grads, lr, &trainable);
        }
    }
    Ok(ae)
}

/// Encode one concatenated prediction vector into its pseudo-label.
pub fn pseudo_label(ae: &Autoencoder, p: &[f64]) -> Result<Vec<f64>> {
    ae.encode(p)
}

// ---------------------------------------------------------------------------
// Pseudo-target cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"PLC1";

/// Cached per-clip pseudo-targets plus the fingerprints they were built under.
#[derive(Debug, Clone)]
pub struct PseudoTargets {
    pub teacher_fingerprint: u64,
    pub autoencoder_fingerprint: u64,
    pub dim: usize,
    pub targets: HashMap<String, Vec<f64>>,
}

impl PseudoTargets {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&self.teacher_fingerprint.to_le_bytes())?;
        w.write_all(&self.autoencoder_fingerprint.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.targets.len() as u64).to_le_bytes())?;
        let mut ids: Vec<&String> = self.targets.keys().collect();
        ids.sort();
        for id in ids {
            let bytes = id.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            for v in &self.targets[id] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Like [`PseudoTargets::load`] but accepting any autoencoder
    /// fingerprint; used when the autoencoder would only be retrained to
    /// validate its own cache.
    pub fn load_any_autoencoder(path: &Path, teacher_fp: u64) -> Result<Option<PseudoTargets>> {
        match Self::load_impl(path, Some(teacher_fp), None) {
            Ok(t) => Ok(t),
            Err(e) => Err(e),
        }
    }

    /// Load a cache; stale fingerprints yield `Ok(None)`, forcing the caller
    /// to recompute.
    pub fn load(path: &Path, teacher_fp: u64, ae_fp: u64) -> Result<Option<PseudoTargets>> {
        Self::load_impl(path, Some(teacher_fp), Some(ae_fp))
    }

    fn load_impl(
        path: &Path,
        teacher_fp: Option<u64>,
        ae_fp: Option<u64>,
    ) -> Result<Option<PseudoTargets>> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Day2DarkError::Malformed {
                path: path.display().to_string(),
                reason: "bad cache magic".into(),
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let stored_teacher = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let stored_ae = u64::from_le_bytes(u64buf);
        if teacher_fp.is_some_and(|fp| fp != stored_teacher)
            || ae_fp.is_some_and(|fp| fp != stored_ae)
        {
            return Ok(None);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut targets = HashMap::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let id_len = u32::from_le_bytes(u32buf) as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes)?;
            let id = String::from_utf8(id_bytes).map_err(|_| Day2DarkError::Malformed {
                path: path.display().to_string(),
                reason: "bad clip id".into(),
            })?;
            let mut vals = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut u64buf)?;
                vals.push(f64::from_le_bytes(u64buf));
            }
            targets.insert(id, vals);
        }
        Ok(Some(PseudoTargets {
            teacher_fingerprint: stored_teacher,
            autoencoder_fingerprint: stored_ae,
            dim,
            targets,
        }))
    }
}

/// Which vector supervises unlabeled clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PseudoTargetMode {
    /// 64-dim autoencoder latent (default).
    Bottleneck,
    /// Raw concatenated teacher predictions; exposed for comparison runs.
    RawPredictions,
}

/// Compute pseudo-targets for every pool clip with frozen teachers and a
/// frozen autoencoder.
pub fn compute_pseudo_targets(
    pool: &[Clip],
    teachers: &[Box<dyn Teacher>],
    ae: &Autoencoder,
    mode: PseudoTargetMode,
) -> Result<PseudoTargets> {
    let mut targets = HashMap::with_capacity(pool.len());
    let mut dim = None;
    for clip in pool {
        let preds = collect_auxiliary_predictions(clip, teachers)?;
        let target = match mode {
            PseudoTargetMode::Bottleneck => pseudo_label(ae, &preds.concat)?,
            PseudoTargetMode::RawPredictions => preds.concat,
        };
        if let Some(d) = dim {
            if target.len() != d {
                return Err(Day2DarkError::invalid("pseudo-target width drift"));
            }
        } else {
            dim = Some(target.len());
        }
        targets.insert(clip.id.clone(), target);
    }
    Ok(PseudoTargets {
        teacher_fingerprint: teachers_fingerprint(teachers),
        autoencoder_fingerprint: ae.fingerprint(),
        dim: dim.unwrap_or(0),
        targets,
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean classification loss over a labeled batch: softmax cross-entropy for
/// single-label, summed binary cross-entropy for multi-label.
pub fn classification_loss(outputs: &[(Vec<f64>, Label)]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Day2DarkError::invalid("empty labeled batch"));
    }
    let mut total = 0.0;
    for (logits, label) in outputs {
        match label {
            Label::Single(target) => {
                if *target >= logits.len() {
                    return Err(Day2DarkError::invalid("label out of range"));
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logits[*target];
            }
            Label::Multi(bits) => {
                if bits.len() != logits.len() {
                    return Err(Day2DarkError::invalid("multi-label width mismatch"));
                }
                for (z, b) in logits.iter().zip(bits) {
                    let t = f64::from(u8::from(*b));
                    total += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
                }
            }
        }
    }
    Ok(total / outputs.len() as f64)
}

/// Summed L1 distance between predicted and target pseudo-labels over an
/// unlabeled batch.
pub fn pseudo_loss(unlabeled: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (pred, target) in unlabeled {
        if pred.len() != target.len() {
            return Err(Day2DarkError::invalid(format!(
                "pseudo prediction width {} != target width {}",
                pred.len(),
                target.len()
            )));
        }
        total += pred
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total)
}

/// Combined first-stage loss: `L = L_CE + lambda * L_U`.
pub fn loss_stage1(
    labeled: &[(Vec<f64>, Label)],
    unlabeled: &[(Vec<f64>, Vec<f64>)],
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Day2DarkError::invalid("lambda must be non-negative"));
    }
    let ce = classification_loss(labeled)?;
    let lu = if unlabeled.is_empty() {
        0.0
    } else {
        pseudo_loss(unlabeled)?
    };
    Ok(ce + lambda * lu)
}

/// End-to-end variant: `L = L_CE + lambda * L_U + L_mix`, where `L_mix` is
/// the classification loss on mixed samples.
pub fn loss_end_to_end(
    labeled: &[(Vec<f64>, Label)],
    unlabeled: &[(Vec<f64>, Vec<f64>)],
    mixed: &[(Vec<f64>, Label)],
    lambda: f64,
) -> Result<f64> {
    let base = loss_stage1(labeled, unlabeled, lambda)?;
    let mix = if mixed.is_empty() {
        0.0
    } else {
        classification_loss(mixed)?
    };
    Ok(base + mix)
}

// ---------------------------------------------------------------------------
// Day2dark mixing
// ---------------------------------------------------------------------------

/// Range the mixing coefficient is drawn from.
pub const MIX_ALPHA_RANGE: std::ops::Range<f64> = 0.4..1.0;

/// Uniform draw from `[0.4, 1.0)`.
pub fn sample_mix_alpha(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(MIX_ALPHA_RANGE)
}

/// Options of [`day2dark_mix`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MixOptions {
    /// Also mix the waveforms with the same alpha; off by default, keeping
    /// the labeled clip's audio.
    pub mix_audio: bool,
}

fn resample_volume(src: &FrameVolume, t: usize, h: usize, w: usize) -> FrameVolume {
    let mut out = FrameVolume::zeros(t, h, w);
    for ti in 0..t {
        let st = ti * src.t / t;
        for y in 0..h {
            let sy = y * src.h / h;
            for x in 0..w {
                let sx = x * src.w / w;
                out.set_pixel(ti, y, x, src.pixel(st, sy, sx));
            }
        }
    }
    out
}

/// Pixelwise convex combination `alpha * labeled + (1 - alpha) * dark`; the
/// result keeps the labeled clip's label and (by default) its audio. The dark
/// clip is nearest-neighbor resampled when geometries differ.
pub fn day2dark_mix(
    labeled: &Clip,
    dark: &Clip,
    alpha: f64,
    opts: MixOptions,
) -> Result<(Clip, Label)> {
    if alpha <= 0.0 || alpha > 1.0 {
        return Err(Day2DarkError::invalid(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let label = labeled
        .label
        .clone()
        .ok_or_else(|| Day2DarkError::invalid("mix source clip carries no label"))?;
    let (t, h, w) = (labeled.frames.t, labeled.frames.h, labeled.frames.w);
    let dark_frames;
    let dark_vol = if dark.frames.t == t && dark.frames.h == h && dark.frames.w == w {
        &dark.frames
    } else {
        dark_frames = resample_volume(&dark.frames, t, h, w);
        &dark_frames
    };
    let mut data = Vec::with_capacity(labeled.frames.data.len());
    for (a, b) in labeled.frames.data.iter().zip(&dark_vol.data) {
        data.push((alpha * *a as f64 + (1.0 - alpha) * *b as f64) as f32);
    }
    let frames = FrameVolume::new(t, h, w, data)?;
    let audio = if opts.mix_audio {
        if labeled.audio.sample_rate != dark.audio.sample_rate {
            return Err(Day2DarkError::invalid(
                "cannot mix audio across sample rates",
            ));
        }
        let n = labeled.audio.samples.len();
        let samples = (0..n)
            .map(|i| {
                let di = i * dark.audio.samples.len() / n;
                (alpha * labeled.audio.samples[i] as f64
                    + (1.0 - alpha) * dark.audio.samples[di] as f64) as f32
            })
            .collect();
        crate::clip::Waveform {
            sample_rate: labeled.audio.sample_rate,
            samples,
        }
    } else {
        labeled.audio.clone()
    };
    let mut clip = Clip {
        id: format!("mix_{}_{}", labeled.id, dark.id),
        frames,
        audio,
        label: Some(label.clone()),
        clip_y: 0.0,
    };
    clip.clip_y = clip_illuminance(&clip)?.clip_y;
    Ok((clip, label))
}

// ---------------------------------------------------------------------------
// Unlabeled-pool filter
// ---------------------------------------------------------------------------

/// Drop every pool clip the trained model classifies as any activity with
/// confidence above `threshold` (default 0.5); confidence exactly at the
/// threshold survives.
pub fn filter_unlabeled(pool: &[Clip], model: &dyn Model, threshold: f64) -> Result<Vec<Clip>> {
    let mut kept = Vec::with_capacity(pool.len());
    for clip in pool {
        let conf = model.confidences(clip)?;
        let max = conf.iter().cloned().fold(0.0f64, f64::max);
        if max <= threshold {
            kept.push(clip.clone());
        }
    }
    Ok(kept)
}
