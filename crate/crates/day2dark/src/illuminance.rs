//! Illuminance computation, day/dark partitioning and composition statistics.
//!
//! A frame's illuminance is a weighted mean of its RGB intensities; a clip's
//! illuminance is the arithmetic mean over its frames. Clips at or below the
//! threshold `t` count as dark, strictly above as day.

use crate::clip::{Clip, CHANNELS};
use crate::error::{Day2DarkError, Result};

/// Weights applied to the red, green and blue channels when computing
/// illuminance. Note the blue weight is 0.144, not the Rec.601 0.114; pass
/// [`LUMA_WEIGHTS_REC601`] to the `*_weighted` variants for the standard one.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.144];

/// The common Rec.601 luma weights, for comparison runs.
pub const LUMA_WEIGHTS_REC601: [f64; 3] = [0.299, 0.587, 0.114];

/// Largest illuminance any frame can reach (all channels at 255).
pub const LUMA_CEILING: f64 = 255.0 * (LUMA_WEIGHTS[0] + LUMA_WEIGHTS[1] + LUMA_WEIGHTS[2]);

/// Default darkness threshold: clips with `Y <= DARK_THRESHOLD` are dark.
pub const DARK_THRESHOLD: f64 = 40.0;

/// Per-frame and per-clip illuminance values.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminanceRecord {
    pub per_frame_y: Vec<f64>,
    pub clip_y: f64,
}

/// Mean weighted intensity of one `h x w` RGB frame with explicit weights.
/// Accumulates in double precision regardless of the `f32` storage.
pub fn frame_illuminance_weighted(
    h: usize,
    w: usize,
    rgb: &[f32],
    weights: [f64; 3],
) -> Result<f64> {
    if h * w == 0 {
        return Err(Day2DarkError::invalid("empty frame (H*W = 0)"));
    }
    if rgb.len() != h * w * CHANNELS {
        return Err(Day2DarkError::invalid(format!(
            "frame data length {} != {h}*{w}*{CHANNELS}",
            rgb.len()
        )));
    }
    let mut sum = 0.0f64;
    for px in rgb.chunks_exact(CHANNELS) {
        sum += weights[0] * px[0] as f64 + weights[1] * px[1] as f64 + weights[2] * px[2] as f64;
    }
    Ok(sum / (h * w) as f64)
}

/// Mean weighted intensity of one frame under the crate's default weights.
pub fn frame_illuminance(h: usize, w: usize, rgb: &[f32]) -> Result<f64> {
    frame_illuminance_weighted(h, w, rgb, LUMA_WEIGHTS)
}

/// Illuminance of every frame in a clip plus their arithmetic mean, at full
/// frame rate.
pub fn clip_illuminance(clip: &Clip) -> Result<IlluminanceRecord> {
    clip_illuminance_strided(clip, 1)
}

/// Strided variant for large corpora; `stride = 1` visits every frame.
pub fn clip_illuminance_strided(clip: &Clip, stride: usize) -> Result<IlluminanceRecord> {
    if clip.frames.t == 0 {
        return Err(Day2DarkError::invalid("clip has zero frames"));
    }
    if stride == 0 {
        return Err(Day2DarkError::invalid("stride must be positive"));
    }
    let mut per_frame_y = Vec::new();
    for idx in (0..clip.frames.t).step_by(stride) {
        per_frame_y.push(frame_illuminance(
            clip.frames.h,
            clip.frames.w,
            clip.frames.frame(idx),
        )?);
    }
    let clip_y = per_frame_y.iter().sum::<f64>() / per_frame_y.len() as f64;
    Ok(IlluminanceRecord {
        per_frame_y,
        clip_y,
    })
}

/// Split `(clip_id, clip_Y)` records at threshold `t`: dark is `Y <= t`
/// (boundary inclusive), day is `Y > t`.
pub fn partition(records: &[(String, f64)], t: f64) -> (Vec<String>, Vec<String>) {
    let mut day = Vec::new();
    let mut dark = Vec::new();
    for (id, y) in records {
        if *y <= t {
            dark.push(id.clone());
        } else {
            day.push(id.clone());
        }
    }
    (day, dark)
}

/// Per-bin counts/fractions over half-open bins `[e_i, e_{i+1})`; values
/// outside `[first, last)` land in the overflow bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminanceHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub overflow: usize,
    pub total: usize,
}

pub fn illuminance_histogram(values: &[f64], bin_edges: &[f64]) -> Result<IlluminanceHistogram> {
    if bin_edges.len() < 2 {
        return Err(Day2DarkError::invalid("need at least two bin edges"));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Day2DarkError::invalid(
            "bin edges must be strictly ascending",
        ));
    }
    let n_bins = bin_edges.len() - 1;
    let mut counts = vec![0usize; n_bins];
    let mut overflow = 0usize;
    for &y in values {
        if y < bin_edges[0] || y >= bin_edges[n_bins] {
            overflow += 1;
            continue;
        }
        // First edge strictly above y closes the half-open bin.
        let bin = match bin_edges.iter().position(|&e| y < e) {
            Some(pos) => pos - 1,
            None => n_bins - 1,
        };
        counts[bin] += 1;
    }
    let total = values.len();
    let fractions = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect();
    Ok(IlluminanceHistogram {
        bin_edges: bin_edges.to_vec(),
        counts,
        fractions,
        overflow,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{FrameVolume, Waveform};
    use rand::Rng;

    fn clip_with_frames(frames: FrameVolume) -> Clip {
        Clip {
            id: "test".into(),
            frames,
            audio: Waveform {
                sample_rate: 4000,
                samples: vec![0.0; 10],
            },
            label: None,
            clip_y: 0.0,
        }
    }

    #[test]
    fn zero_frame_gives_zero() {
        let y = frame_illuminance(2, 2, &[0.0; 12]).unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn flat_gray_frame_uses_documented_weights() {
        // R=G=B=100 -> (0.299 + 0.587 + 0.144) * 100 = 103.
        let rgb = vec![100.0f32; 4 * 4 * 3];
        let y = frame_illuminance(4, 4, &rgb).unwrap();
        assert!((y - 103.0).abs() < 1e-9, "{y}");
    }

    #[test]
    fn random_frame_matches_scalar_loop_oracle() {
        let mut rng = crate::rng::rng_from_seed(42);
        let (h, w) = (3, 2);
        let rgb: Vec<f32> = (0..h * w * 3)
            .map(|_| rng.gen_range(0..=255) as f32)
            .collect();
        let got = frame_illuminance(h, w, &rgb).unwrap();
        // Independent per-pixel scalar recomputation.
        let mut acc = 0.0f64;
        for j in 0..h * w {
            acc += 0.299 * rgb[3 * j] as f64
                + 0.587 * rgb[3 * j + 1] as f64
                + 0.144 * rgb[3 * j + 2] as f64;
        }
        let want = acc / (h * w) as f64;
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn empty_frame_is_rejected() {
        assert!(frame_illuminance(0, 4, &[]).is_err());
        assert!(frame_illuminance(4, 0, &[]).is_err());
    }

    #[test]
    fn pixel_permutation_leaves_illuminance_unchanged() {
        let mut rng = crate::rng::rng_from_seed(7);
        let (h, w) = (4, 5);
        let mut pixels: Vec<[f32; 3]> = (0..h * w)
            .map(|_| {
                [
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                    rng.gen_range(0.0..255.0),
                ]
            })
            .collect();
        let flat = |px: &[[f32; 3]]| px.iter().flatten().copied().collect::<Vec<f32>>();
        let before = frame_illuminance(h, w, &flat(&pixels)).unwrap();
        // Shuffle pixels (not channels).
        for i in (1..pixels.len()).rev() {
            let j = rng.gen_range(0..=i);
            pixels.swap(i, j);
        }
        let after = frame_illuminance(h, w, &flat(&pixels)).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn illuminance_is_homogeneous_in_intensity() {
        let mut rng = crate::rng::rng_from_seed(8);
        let rgb: Vec<f32> = (0..2 * 3 * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
        let base = frame_illuminance(2, 3, &rgb).unwrap();
        for &s in &[0.0f64, 0.25, 0.5, 0.9, 1.0] {
            let scaled: Vec<f32> = rgb.iter().map(|v| (*v as f64 * s) as f32).collect();
            let y = frame_illuminance(2, 3, &scaled).unwrap();
            assert!(
                (y - s * base).abs() <= 1e-9 * base.max(1.0) + 1e-4,
                "s={s}: {y} vs {}",
                s * base
            );
        }
    }

    #[test]
    fn clip_illuminance_is_mean_of_frames() {
        // Two frames with Y=10 and Y=30 -> clip_Y = 20.
        let mut vol = FrameVolume::zeros(2, 2, 2);
        let w_sum = LUMA_WEIGHTS.iter().sum::<f64>();
        let v0 = (10.0 / w_sum) as f32;
        let v1 = (30.0 / w_sum) as f32;
        for v in vol.frame_mut(0) {
            *v = v0;
        }
        for v in vol.frame_mut(1) {
            *v = v1;
        }
        let rec = clip_illuminance(&clip_with_frames(vol)).unwrap();
        assert_eq!(rec.per_frame_y.len(), 2);
        // The mean relation is exact; the absolute value carries the f32
        // quantization of the constructed intensities.
        let mean = (rec.per_frame_y[0] + rec.per_frame_y[1]) / 2.0;
        assert!((rec.clip_y - mean).abs() < 1e-12);
        assert!((rec.clip_y - 20.0).abs() < 1e-4);
    }

    #[test]
    fn single_frame_clip_y_is_the_frame_y() {
        let mut vol = FrameVolume::zeros(1, 2, 2);
        let w_sum = LUMA_WEIGHTS.iter().sum::<f64>();
        let v = (7.5 / w_sum) as f32;
        for p in vol.frame_mut(0) {
            *p = v;
        }
        let rec = clip_illuminance(&clip_with_frames(vol)).unwrap();
        assert!((rec.clip_y - 7.5).abs() < 1e-6);
    }

    #[test]
    fn many_frame_mean_matches_brute_force() {
        let mut rng = crate::rng::rng_from_seed(9);
        let (t, h, w) = (32, 4, 4);
        let data: Vec<f32> = (0..t * h * w * 3)
            .map(|_| rng.gen_range(0.0..255.0))
            .collect();
        let vol = FrameVolume::new(t, h, w, data.clone()).unwrap();
        let rec = clip_illuminance(&clip_with_frames(vol)).unwrap();
        let mut frame_ys = Vec::new();
        for f in 0..t {
            let fr = &data[f * h * w * 3..(f + 1) * h * w * 3];
            let mut acc = 0.0f64;
            for px in fr.chunks(3) {
                acc += 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.144 * px[2] as f64;
            }
            frame_ys.push(acc / (h * w) as f64);
        }
        let want = frame_ys.iter().sum::<f64>() / t as f64;
        assert!((rec.clip_y - want).abs() <= 1e-9 * want.abs());
    }

    #[test]
    fn partition_boundary_is_dark() {
        let records = vec![
            ("a".to_string(), 10.0),
            ("b".to_string(), 40.0),
            ("c".to_string(), 41.0),
        ];
        let (day, dark) = partition(&records, 40.0);
        assert_eq!(dark, vec!["a", "b"]);
        assert_eq!(day, vec!["c"]);
    }

    #[test]
    fn partition_handles_empty_and_degenerate_inputs() {
        let (day, dark) = partition(&[], 40.0);
        assert!(day.is_empty() && dark.is_empty());
        let records = vec![("a".to_string(), 50.0), ("b".to_string(), 90.0)];
        let (day, dark) = partition(&records, 40.0);
        assert_eq!(day.len(), 2);
        assert!(dark.is_empty());
    }

    #[test]
    fn partition_is_a_disjoint_cover() {
        let mut rng = crate::rng::rng_from_seed(12);
        let records: Vec<(String, f64)> = (0..200)
            .map(|i| (format!("c{i}"), rng.gen_range(0.0..150.0)))
            .collect();
        let (day, dark) = partition(&records, 40.0);
        assert_eq!(day.len() + dark.len(), records.len());
        for id in &day {
            assert!(!dark.contains(id));
        }
    }

    #[test]
    fn nearby_thresholds_differ_only_in_the_gap() {
        let mut rng = crate::rng::rng_from_seed(13);
        let records: Vec<(String, f64)> = (0..300)
            .map(|i| (format!("c{i}"), rng.gen_range(0.0..100.0)))
            .collect();
        let (_, dark_t) = partition(&records, 40.0);
        let (_, dark_t_eps) = partition(&records, 45.0);
        for id in &dark_t {
            assert!(dark_t_eps.contains(id), "dark set must grow with t");
        }
        for id in &dark_t_eps {
            if !dark_t.contains(id) {
                let y = records.iter().find(|(i, _)| i == id).unwrap().1;
                assert!(
                    y > 40.0 && y <= 45.0,
                    "moved clip must lie in (t, t+eps], y={y}"
                );
            }
        }
    }

    #[test]
    fn histogram_direct_binning() {
        let h = illuminance_histogram(&[5.0, 15.0], &[0.0, 10.0, 20.0]).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.fractions, vec![0.5, 0.5]);
        assert_eq!(h.overflow, 0);
    }

    #[test]
    fn histogram_single_bin_fraction_is_one() {
        let h = illuminance_histogram(&[1.0, 2.0, 3.0], &[0.0, 10.0]).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert_eq!(h.fractions, vec![1.0]);
    }

    #[test]
    fn histogram_counts_match_brute_force_loop() {
        let mut rng = crate::rng::rng_from_seed(10);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(-10.0..280.0)).collect();
        let edges: Vec<f64> = (0..=27).map(|i| i as f64 * 10.0).collect();
        let h = illuminance_histogram(&values, &edges).unwrap();
        // Brute-force assignment loop.
        let mut counts = vec![0usize; edges.len() - 1];
        let mut overflow = 0usize;
        'outer: for &v in &values {
            for b in 0..edges.len() - 1 {
                if v >= edges[b] && v < edges[b + 1] {
                    counts[b] += 1;
                    continue 'outer;
                }
            }
            overflow += 1;
        }
        assert_eq!(h.counts, counts);
        assert_eq!(h.overflow, overflow);
        assert_eq!(h.counts.iter().sum::<usize>() + h.overflow, values.len());
    }

    #[test]
    fn histogram_rejects_bad_edges() {
        assert!(illuminance_histogram(&[1.0], &[0.0]).is_err());
        assert!(illuminance_histogram(&[1.0], &[0.0, 0.0]).is_err());
        assert!(illuminance_histogram(&[1.0], &[10.0, 5.0]).is_err());
    }
}
