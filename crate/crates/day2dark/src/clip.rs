//! Core data types shared across the benchmark: frame volumes, waveforms,
//! labels and clips.

use crate::error::{Day2DarkError, Result};

/// Number of color channels in every frame.
pub const CHANNELS: usize = 3;

/// A `T x H x W x 3` intensity volume, row-major with interleaved RGB,
/// values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVolume {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FrameVolume {
    pub fn new(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<FrameVolume> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Day2DarkError::invalid(format!(
                "frame volume dims must be positive, got {t}x{h}x{w}"
            )));
        }
        if data.len() != t * h * w * CHANNELS {
            return Err(Day2DarkError::invalid(format!(
                "frame volume data length {} != {t}*{h}*{w}*{CHANNELS}",
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 255.0)
        {
            return Err(Day2DarkError::invalid(format!(
                "intensity {bad} outside [0, 255]"
            )));
        }
        Ok(FrameVolume { t, h, w, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize) -> FrameVolume {
        FrameVolume {
            t,
            h,
            w,
            data: vec![0.0; t * h * w * CHANNELS],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * CHANNELS
    }

    /// Borrow the pixel data of one frame.
    pub fn frame(&self, idx: usize) -> &[f32] {
        let len = self.frame_len();
        &self.data[idx * len..(idx + 1) * len]
    }

    pub fn frame_mut(&mut self, idx: usize) -> &mut [f32] {
        let len = self.frame_len();
        &mut self.data[idx * len..(idx + 1) * len]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let base = ((t * self.h + y) * self.w + x) * CHANNELS;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, t: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let base = ((t * self.h + y) * self.w + x) * CHANNELS;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }
}

/// Mono audio samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Single-label class index or multi-label binary mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Single(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn as_single(&self) -> Option<usize> {
        match self {
            Label::Single(c) => Some(*c),
            Label::Multi(_) => None,
        }
    }

    pub fn as_multi(&self) -> Option<&[bool]> {
        match self {
            Label::Single(_) => None,
            Label::Multi(bits) => Some(bits),
        }
    }
}

/// One audio-visual sample with a cached clip illuminance.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub frames: FrameVolume,
    pub audio: Waveform,
    pub label: Option<Label>,
    pub clip_y: f64,
}
