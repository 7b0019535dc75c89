//! Visual and audio encoders.
//!
//! Each modality splits into a deterministic frontend (patch extraction for
//! video, a log-magnitude spectrogram pooled into a token grid for audio) and
//! a small learned network that lives on the autodiff tape. The frontends are
//! pure functions of the clip, so training caches them per clip id.
//!
//! Real pretrained backbones can replace the toy ones behind
//! [`VisualFeatureExtractor`]; the recognizer only sees token matrices.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::clip::{Clip, Waveform, CHANNELS};
use crate::error::{Day2DarkError, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Mat;

/// Geometry and dimensionality of both toy encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Visual token dimension.
    pub d_v: usize,
    pub visual_hidden: usize,
    /// Spectrogram analysis window and hop in milliseconds.
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_bands: usize,
    /// Audio tokens form a `time_chunks x band_groups` grid.
    pub time_chunks: usize,
    pub band_groups: usize,
    /// Audio token dimension.
    pub d_a: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_t: 2,
            patch_h: 8,
            patch_w: 8,
            d_v: 64,
            visual_hidden: 64,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_bands: 64,
            time_chunks: 4,
            band_groups: 4,
            d_a: 64,
        }
    }
}

impl EncoderConfig {
    /// Narrower encoders sized for CPU-speed training runs.
    pub fn desk() -> EncoderConfig {
        EncoderConfig {
            d_v: 32,
            visual_hidden: 48,
            band_groups: 2,
            d_a: 32,
            ..EncoderConfig::default()
        }
    }
}

impl EncoderConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * CHANNELS
    }

    pub fn n_audio_tokens(&self) -> usize {
        self.time_chunks * self.band_groups
    }

    pub fn audio_cell_dim(&self) -> usize {
        self.n_bands / self.band_groups
    }

    /// Token grid counts `(temporal, spatial-h, spatial-w)` for a clip
    /// geometry; dimensions must divide evenly.
    pub fn token_layout(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if !t.is_multiple_of(self.patch_t)
            || !h.is_multiple_of(self.patch_h)
            || !w.is_multiple_of(self.patch_w)
        {
            return Err(Day2DarkError::shape(format!(
                "clip geometry {t}x{h}x{w} not divisible by patch \
                 {}x{}x{}",
                self.patch_t, self.patch_h, self.patch_w
            )));
        }
        Ok((t / self.patch_t, h / self.patch_h, w / self.patch_w))
    }

    pub fn n_visual_tokens(&self, t: usize, h: usize, w: usize) -> Result<usize> {
        let (a, b, c) = self.token_layout(t, h, w)?;
        Ok(a * b * c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bands == 0 || !self.n_bands.is_multiple_of(self.band_groups) {
            return Err(Day2DarkError::config(format!(
                "n_bands {} must be a positive multiple of band_groups {}",
                self.n_bands, self.band_groups
            )));
        }
        if self.d_v == 0 || self.d_a == 0 || self.visual_hidden == 0 {
            return Err(Day2DarkError::config("encoder dims must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Visual frontend + encoder
// ---------------------------------------------------------------------------

/// Flatten a clip into non-overlapping spatio-temporal patches, one row per
/// token, intensities normalized to [0, 1]. Token order is temporal-major.
pub fn visual_patches(cfg: &EncoderConfig, clip: &Clip) -> Result<Mat> {
    let (gt, gh, gw) = cfg.token_layout(clip.frames.t, clip.frames.h, clip.frames.w)?;
    let n_tokens = gt * gh * gw;
    let dim = cfg.patch_dim();
    let mut out = Mat::zeros(n_tokens, dim);
    let mut token = 0;
    for pt in 0..gt {
        for ph in 0..gh {
            for pw in 0..gw {
                let row = out.row_mut(token);
                let mut k = 0;
                for dt in 0..cfg.patch_t {
                    for dy in 0..cfg.patch_h {
                        for dx in 0..cfg.patch_w {
                            let px = clip.frames.pixel(
                                pt * cfg.patch_t + dt,
                                ph * cfg.patch_h + dy,
                                pw * cfg.patch_w + dx,
                            );
                            for c in 0..CHANNELS {
                                row[k] = px[c] as f64 / 255.0;
                                k += 1;
                            }
                        }
                    }
                }
                token += 1;
            }
        }
    }
    Ok(out)
}

/// Strided patchify followed by a two-layer pointwise MLP; the learned half
/// of the toy visual path.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VisualEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> VisualEncoder {
        VisualEncoder {
            fc1: Linear::new(
                store,
                &format!("{prefix}.fc1"),
                cfg.patch_dim(),
                cfg.visual_hidden,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{prefix}.fc2"),
                cfg.visual_hidden,
                cfg.d_v,
                rng,
            ),
        }
    }

    /// Patches (one row per token) -> `n_v x d_v` features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        patches: NodeId,
    ) -> NodeId {
        let h = self.fc1.forward(tape, bound, store, patches);
        let h = tape.relu(h);
        self.fc2.forward(tape, bound, store, h)
    }
}

// ---------------------------------------------------------------------------
// Audio frontend + encoder
// ---------------------------------------------------------------------------

/// Log floor used when a spectrogram cell holds no energy.
pub const LOG_FLOOR_EPS: f64 = 1e-6;

/// Log-magnitude short-time spectrogram: `n_bands x n_frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bands: usize,
    pub frames: usize,
    /// Row-major `bands x frames`.
    pub data: Vec<f64>,
    /// Center frequency of each band in Hz.
    pub band_centers: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, band: usize, frame: usize) -> f64 {
        self.data[band * self.frames + frame]
    }
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// In-place iterative radix-2 FFT over interleaved (re, im) pairs.
fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit reversal permutation.
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_r, mut cur_i) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cur_r - im[i + k + len / 2] * cur_i,
                    re[i + k + len / 2] * cur_i + im[i + k + len / 2] * cur_r,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let nr = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = nr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Short-time log-magnitude spectral analysis with a Hann window.
pub fn spectrogram(cfg: &EncoderConfig, wf: &Waveform) -> Result<Spectrogram> {
    cfg.validate()?;
    let sr = wf.sample_rate as f64;
    let window = ((cfg.window_ms / 1000.0) * sr).round() as usize;
    let hop = ((cfg.hop_ms / 1000.0) * sr).round() as usize;
    if window == 0 || hop == 0 {
        return Err(Day2DarkError::config(
            "window and hop must span at least one sample",
        ));
    }
    if wf.samples.len() < window {
        return Err(Day2DarkError::invalid(format!(
            "waveform of {} samples shorter than one {window}-sample analysis window",
            wf.samples.len()
        )));
    }
    let nfft = next_pow2(window).max(2 * cfg.n_bands);
    let bins_per_band = (nfft / 2) / cfg.n_bands;
    if bins_per_band == 0 {
        return Err(Day2DarkError::config(format!(
            "n_bands {} too large for fft size {nfft}",
            cfg.n_bands
        )));
    }
    let n_frames = (wf.samples.len() - window) / hop + 1;
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / window as f64).cos())
        .collect();

    let mut data = vec![0.0f64; cfg.n_bands * n_frames];
    let mut re = vec![0.0f64; nfft];
    let mut im = vec![0.0f64; nfft];
    for frame in 0..n_frames {
        let start = frame * hop;
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..window {
            re[i] = wf.samples[start + i] as f64 * hann[i];
        }
        fft_radix2(&mut re, &mut im);
        for band in 0..cfg.n_bands {
            let mut mag = 0.0;
            for k in 0..bins_per_band {
                let bin = 1 + band * bins_per_band + k;
                mag += (re[bin] * re[bin] + im[bin] * im[bin]).sqrt();
            }
            mag /= bins_per_band as f64;
            data[band * n_frames + frame] = (mag + LOG_FLOOR_EPS).ln();
        }
    }
    let band_centers = (0..cfg.n_bands)
        .map(|band| {
            let first = 1 + band * bins_per_band;
            let last = band * bins_per_band + bins_per_band;
            (first + last) as f64 / 2.0 * sr / nfft as f64
        })
        .collect();
    Ok(Spectrogram {
        bands: cfg.n_bands,
        frames: n_frames,
        data,
        band_centers,
    })
}

/// Pool a spectrogram into the audio token grid: one row per
/// `(time-chunk, band-group)` cell holding that cell's per-band means.
/// Token order is time-major.
pub fn audio_cells(cfg: &EncoderConfig, wf: &Waveform) -> Result<Mat> {
    let spec = spectrogram(cfg, wf)?;
    let bands_per_group = cfg.audio_cell_dim();
    let mut out = Mat::zeros(cfg.n_audio_tokens(), bands_per_group);
    for chunk in 0..cfg.time_chunks {
        let f0 = chunk * spec.frames / cfg.time_chunks;
        let f1 = ((chunk + 1) * spec.frames / cfg.time_chunks).max(f0 + 1);
        for group in 0..cfg.band_groups {
            let token = chunk * cfg.band_groups + group;
            let row = out.row_mut(token);
            for (slot, band_off) in row.iter_mut().enumerate() {
                let band = group * bands_per_group + slot;
                let mut acc = 0.0;
                for frame in f0..f1 {
                    acc += spec.at(band, frame);
                }
                *band_off = acc / (f1 - f0) as f64;
            }
        }
    }
    Ok(out)
}

/// The toy audio network: a single learned projection of pooled spectrogram
/// cells into `d_a`-dimensional tokens.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub proj: Linear,
}

impl AudioEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> AudioEncoder {
        AudioEncoder {
            proj: Linear::new(
                store,
                &format!("{prefix}.proj"),
                cfg.audio_cell_dim(),
                cfg.d_a,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &mut Bound,
        store: &ParamStore,
        cells: NodeId,
    ) -> NodeId {
        self.proj.forward(tape, bound, store, cells)
    }
}

/// `A = A' E^a`: exact matrix product, no bias, no illumination dependence.
pub fn project_audio(a_prime: &Mat, e_a: &Mat) -> Result<Mat> {
    if a_prime.cols != e_a.rows {
        return Err(Day2DarkError::shape(format!(
            "audio projection: tokens are {} wide but E^a expects {}",
            a_prime.cols, e_a.rows
        )));
    }
    Ok(a_prime.matmul(e_a))
}

// ---------------------------------------------------------------------------
// Pluggable extractor interface
// ---------------------------------------------------------------------------

/// Frozen visual feature extraction: what analysis code and any drop-in
/// pretrained backbone must provide.
pub trait VisualFeatureExtractor: Sync {
    fn feature_dims(&self) -> usize;
    fn token_layout(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)>;
    fn features(&self, clip: &Clip) -> Result<Mat>;
}

/// The toy visual encoder frozen at its current parameters.
pub struct FrozenVisualEncoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub encoder: &'a VisualEncoder,
    pub store: &'a ParamStore,
}

impl VisualFeatureExtractor for FrozenVisualEncoder<'_> {
    fn feature_dims(&self) -> usize {
        self.cfg.d_v
    }

    fn token_layout(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.cfg.token_layout(t, h, w)
    }

    fn features(&self, clip: &Clip) -> Result<Mat> {
        let patches = visual_patches(self.cfg, clip)?;
        let mut tape = Tape::new();
        let mut bound = Bound::new(self.store);
        let x = tape.leaf(patches);
        let f = self.encoder.forward(&mut tape, &mut bound, self.store, x);
        Ok(tape.value(f).clone())
    }
}
