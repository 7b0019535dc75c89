//! Metrics and analyses: top-1 accuracy, Hamming distance, illuminance-binned
//! performance curves, the day/dark gap, channel-activation profiles, and
//! report emission (text, CSV, PNG plots).
//!
//! Gap orientation: for accuracy the gap is `day - dark` (positive means
//! worse in the dark); for Hamming distance, where lower is better, it is
//! `dark - day` so that positive still means worse in the dark.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::clip::{Clip, Label};
use crate::encoders::VisualFeatureExtractor;
use crate::error::{Day2DarkError, Result};
use crate::illuminance::LUMA_CEILING;
use crate::recognizer::Model;
use crate::rng::rng_for;

/// Default illuminance bin edges: steps of 10 up to the luma ceiling.
pub fn default_bin_edges() -> Vec<f64> {
    let mut edges: Vec<f64> = (0..)
        .map(|i| i as f64 * 10.0)
        .take_while(|e| *e < LUMA_CEILING)
        .collect();
    edges.push(LUMA_CEILING + 1e-9);
    edges
}

/// Fraction of samples whose argmax logit hits the label; ties break toward
/// the lowest class index.
pub fn top1_accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Day2DarkError::invalid("empty evaluation batch"));
    }
    if predictions.len() != labels.len() {
        return Err(Day2DarkError::invalid("prediction/label count mismatch"));
    }
    let mut correct = 0usize;
    for (logits, label) in predictions.iter().zip(labels) {
        if argmax(logits) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean per-label binary mismatch over samples and labels.
pub fn hamming_distance(pred_bits: &[Vec<bool>], label_bits: &[Vec<bool>]) -> Result<f64> {
    if pred_bits.is_empty() {
        return Err(Day2DarkError::invalid("empty evaluation batch"));
    }
    if pred_bits.len() != label_bits.len() {
        return Err(Day2DarkError::invalid("prediction/label count mismatch"));
    }
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for (p, l) in pred_bits.iter().zip(label_bits) {
        if p.len() != l.len() {
            return Err(Day2DarkError::invalid("prediction/label width mismatch"));
        }
        for (a, b) in p.iter().zip(l) {
            mismatches += usize::from(a != b);
            total += 1;
        }
    }
    Ok(mismatches as f64 / total as f64)
}

/// Threshold applied to multi-label confidences.
pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

/// Metric value on a set of clips: accuracy (single-label) or Hamming
/// distance (multi-label).
fn metric_on(model: &dyn Model, clips: &[&Clip]) -> Result<f64> {
    if model.multi_label() {
        let mut preds = Vec::with_capacity(clips.len());
        let mut labels = Vec::with_capacity(clips.len());
        let confs: Vec<Vec<f64>> = clips
            .par_iter()
            .map(|c| model.confidences(c))
            .collect::<Result<_>>()?;
        for (clip, conf) in clips.iter().zip(confs) {
            let bits = clip
                .label
                .as_ref()
                .and_then(|l| l.as_multi().map(|b| b.to_vec()))
                .ok_or_else(|| Day2DarkError::invalid("clip lacks a multi-label"))?;
            preds.push(conf.iter().map(|c| *c > MULTI_LABEL_THRESHOLD).collect());
            labels.push(bits);
        }
        hamming_distance(&preds, &labels)
    } else {
        let logits: Vec<Vec<f64>> = clips
            .par_iter()
            .map(|c| model.logits(c))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = clips
            .iter()
            .map(|c| {
                c.label
                    .as_ref()
                    .and_then(Label::as_single)
                    .ok_or_else(|| Day2DarkError::invalid("clip lacks a single label"))
            })
            .collect::<Result<_>>()?;
        top1_accuracy(&logits, &labels)
    }
}

/// Day and dark partition metrics `(day, dark)` at threshold `t`.
pub fn day_dark_metric(model: &dyn Model, clips: &[Clip], t: f64) -> Result<(f64, f64)> {
    let day: Vec<&Clip> = clips.iter().filter(|c| c.clip_y > t).collect();
    let dark: Vec<&Clip> = clips.iter().filter(|c| c.clip_y <= t).collect();
    Ok((metric_on(model, &day)?, metric_on(model, &dark)?))
}

/// One illuminance bin with at least one sample. Empty bins are omitted from
/// the curve, never reported as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinMetric {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub metric: f64,
}

/// Per-bin metric over half-open illuminance bins.
pub fn binned_metric(
    model: &dyn Model,
    clips: &[Clip],
    bin_edges: &[f64],
) -> Result<Vec<BinMetric>> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Day2DarkError::invalid(
            "bin edges must be strictly ascending, >= 2",
        ));
    }
    let mut bins = Vec::new();
    for window in bin_edges.windows(2) {
        let (lo, hi) = (window[0], window[1]);
        let members: Vec<&Clip> = clips
            .iter()
            .filter(|c| c.clip_y >= lo && c.clip_y < hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let metric = metric_on(model, &members)?;
        bins.push(BinMetric {
            lo,
            hi,
            count: members.len(),
            metric,
        });
    }
    Ok(bins)
}

/// Full evaluation report for one model on one split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric_name: String,
    pub overall: f64,
    pub day_metric: f64,
    pub dark_metric: f64,
    /// Positive means worse in the dark, for either metric orientation.
    pub day2dark_gap: f64,
    pub per_bin: Vec<BinMetric>,
    pub n_clips: usize,
    pub n_day: usize,
    pub n_dark: usize,
    pub t: f64,
    pub model_fingerprint: u64,
}

/// Evaluate a model over a split; side-effect free on the model.
pub fn evaluate(
    model: &dyn Model,
    clips: &[Clip],
    bin_edges: &[f64],
    t: f64,
    model_fingerprint: u64,
) -> Result<EvalReport> {
    let all: Vec<&Clip> = clips.iter().collect();
    let overall = metric_on(model, &all)?;
    let (day_metric, dark_metric) = day_dark_metric(model, clips, t)?;
    let per_bin = binned_metric(model, clips, bin_edges)?;
    let n_day = clips.iter().filter(|c| c.clip_y > t).count();
    let multi = model.multi_label();
    Ok(EvalReport {
        metric_name: if multi {
            "hamming_distance".into()
        } else {
            "top1_accuracy".into()
        },
        overall,
        day_metric,
        dark_metric,
        day2dark_gap: if multi {
            dark_metric - day_metric
        } else {
            day_metric - dark_metric
        },
        per_bin,
        n_clips: clips.len(),
        n_day,
        n_dark: clips.len() - n_day,
        t,
        model_fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Channel activation profiles
// ---------------------------------------------------------------------------

/// Mean activation of sampled feature channels per class per illuminance bin.
#[derive(Debug, Clone)]
pub struct ActivationProfile {
    pub bin_edges: Vec<f64>,
    /// Sampled channel indices, per class.
    pub channels: Vec<Vec<usize>>,
    /// `per_class[class][bin]` is `None` when that class has no clips in the
    /// bin, otherwise one mean activation per sampled channel.
    pub per_class: Vec<Vec<Option<Vec<f64>>>>,
}

/// Sample `n_channels` feature channels per class (seeded) and average the
/// mean-pooled token activations of each class's clips within each bin.
pub fn channel_activation_profile(
    extractor: &dyn VisualFeatureExtractor,
    clips: &[Clip],
    n_classes: usize,
    bin_edges: &[f64],
    n_channels: usize,
    seed: u64,
) -> Result<ActivationProfile> {
    let d_v = extractor.feature_dims();
    if n_channels == 0 || n_channels > d_v {
        return Err(Day2DarkError::invalid(format!(
            "n_channels {n_channels} must lie in [1, {d_v}]"
        )));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Day2DarkError::invalid(
            "bin edges must be strictly ascending, >= 2",
        ));
    }
    let mut channels = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let mut rng = rng_for(seed, 0xC4A_0000 | class as u64);
        let mut picked = Vec::with_capacity(n_channels);
        while picked.len() < n_channels {
            let c = rng.gen_range(0..d_v);
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        channels.push(picked);
    }

    // Mean-pooled channel activations per clip, computed once.
    let pooled: Vec<Vec<f64>> = clips
        .par_iter()
        .map(|clip| {
            let f = extractor.features(clip)?;
            let mut mean = vec![0.0; f.cols];
            for r in 0..f.rows {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += f.at(r, c);
                }
            }
            for m in mean.iter_mut() {
                *m /= f.rows as f64;
            }
            Ok(mean)
        })
        .collect::<Result<_>>()?;

    let n_bins = bin_edges.len() - 1;
    let mut per_class = vec![vec![None; n_bins]; n_classes];
    for class in 0..n_classes {
        for bin in 0..n_bins {
            let (lo, hi) = (bin_edges[bin], bin_edges[bin + 1]);
            let members: Vec<usize> = clips
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.clip_y >= lo
                        && c.clip_y < hi
                        && c.label.as_ref().and_then(Label::as_single) == Some(class)
                })
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut acc = vec![0.0; n_channels];
            for &i in &members {
                for (slot, &ch) in acc.iter_mut().zip(&channels[class]) {
                    *slot += pooled[i][ch];
                }
            }
            for a in acc.iter_mut() {
                *a /= members.len() as f64;
            }
            per_class[class][bin] = Some(acc);
        }
    }
    Ok(ActivationProfile {
        bin_edges: bin_edges.to_vec(),
        channels,
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// Write the text report, CSV tables and plot images. Equal inputs produce
/// byte-identical files.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut text = String::new();
    text.push_str(&format!("metric: {}\n", report.metric_name));
    text.push_str(&format!("overall: {:.6}\n", report.overall));
    text.push_str(&format!(
        "day (Y > {t}): {:.6} over {} clips\n",
        report.day_metric,
        report.n_day,
        t = report.t
    ));
    text.push_str(&format!(
        "dark (Y <= {t}): {:.6} over {} clips\n",
        report.dark_metric,
        report.n_dark,
        t = report.t
    ));
    text.push_str(&format!("day2dark gap: {:.6}\n", report.day2dark_gap));
    text.push_str(&format!(
        "model fingerprint: {:#018x}\n",
        report.model_fingerprint
    ));
    text.push_str("\nbin_lo,bin_hi,count,metric\n");
    for bin in &report.per_bin {
        text.push_str(&format!(
            "{},{},{},{:.6}\n",
            bin.lo, bin.hi, bin.count, bin.metric
        ));
    }
    fs::write(out_dir.join("report.txt"), &text)?;

    let mut csv = String::from("bin_lo,bin_hi,count,metric\n");
    for bin in &report.per_bin {
        csv.push_str(&format!(
            "{},{},{},{:.9}\n",
            bin.lo, bin.hi, bin.count, bin.metric
        ));
    }
    fs::write(out_dir.join("bins.csv"), &csv)?;

    let mut overall = String::from("overall,day,dark,gap,n_clips\n");
    overall.push_str(&format!(
        "{:.9},{:.9},{:.9},{:.9},{}\n",
        report.overall, report.day_metric, report.dark_metric, report.day2dark_gap, report.n_clips
    ));
    fs::write(out_dir.join("overall.csv"), &overall)?;

    let plot = plot_binned_curve(report);
    crate::png::write_rgb(&out_dir.join("binned_metric.png"), plot.0, plot.1, &plot.2)?;
    Ok(())
}

/// Write per-class activation heatmaps alongside a CSV.
pub fn emit_activation_profile(profile: &ActivationProfile, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("class,bin_lo,bin_hi,channel,mean_activation\n");
    for (class, bins) in profile.per_class.iter().enumerate() {
        for (bin, cell) in bins.iter().enumerate() {
            if let Some(values) = cell {
                for (slot, v) in values.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{:.9}\n",
                        class,
                        profile.bin_edges[bin],
                        profile.bin_edges[bin + 1],
                        profile.channels[class][slot],
                        v
                    ));
                }
            }
        }
    }
    fs::write(out_dir.join("activation_profile.csv"), &csv)?;
    for (class, bins) in profile.per_class.iter().enumerate() {
        let (w, h, pixels) = plot_heatmap(bins, profile.channels[class].len());
        crate::png::write_rgb(
            &out_dir.join(format!("activation_class{class}.png")),
            w,
            h,
            &pixels,
        )?;
    }
    Ok(())
}

fn plot_binned_curve(report: &EvalReport) -> (usize, usize, Vec<u8>) {
    let (w, h) = (320usize, 200usize);
    let mut px = vec![245u8; w * h * 3];
    let set = |px: &mut Vec<u8>, x: usize, y: usize, rgb: [u8; 3]| {
        if x < w && y < h {
            let i = (y * w + x) * 3;
            px[i..i + 3].copy_from_slice(&rgb);
        }
    };
    // Axes.
    for x in 20..w - 10 {
        set(&mut px, x, h - 20, [40, 40, 40]);
    }
    for y in 10..h - 19 {
        set(&mut px, 20, y, [40, 40, 40]);
    }
    if report.per_bin.is_empty() {
        return (w, h, px);
    }
    let max_metric = report
        .per_bin
        .iter()
        .map(|b| b.metric)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let max_edge = report.per_bin.last().unwrap().hi;
    let min_edge = report.per_bin.first().unwrap().lo;
    let to_xy = |bin: &BinMetric| {
        let mid = (bin.lo + bin.hi) / 2.0;
        let x = 20.0 + (mid - min_edge) / (max_edge - min_edge).max(1e-9) * (w as f64 - 40.0);
        let y = (h as f64 - 20.0) - bin.metric / max_metric * (h as f64 - 40.0);
        (x as isize, y as isize)
    };
    let mut prev: Option<(isize, isize)> = None;
    for bin in &report.per_bin {
        let (x, y) = to_xy(bin);
        // Point marker.
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                set(
                    &mut px,
                    (x + dx).max(0) as usize,
                    (y + dy).max(0) as usize,
                    [180, 40, 40],
                );
            }
        }
        if let Some((px0, py0)) = prev {
            // Line segment via simple interpolation.
            let steps = (x - px0).abs().max((y - py0).abs()).max(1);
            for s in 0..=steps {
                let xi = px0 + (x - px0) * s / steps;
                let yi = py0 + (y - py0) * s / steps;
                set(
                    &mut px,
                    xi.max(0) as usize,
                    yi.max(0) as usize,
                    [60, 60, 180],
                );
            }
        }
        prev = Some((x, y));
    }
    (w, h, px)
}

fn plot_heatmap(bins: &[Option<Vec<f64>>], n_channels: usize) -> (usize, usize, Vec<u8>) {
    let cell = 12usize;
    let w = (bins.len().max(1)) * cell;
    let h = n_channels.max(1) * cell;
    let mut px = vec![230u8; w * h * 3];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for cellvals in bins.iter().flatten() {
        for v in cellvals {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = (hi - lo).max(1e-12);
    for (b, cellvals) in bins.iter().enumerate() {
        let Some(values) = cellvals else { continue };
        for (c, v) in values.iter().enumerate() {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            let rgb = [(255.0 * t) as u8, 40, (255.0 * (1.0 - t)) as u8];
            for dy in 0..cell {
                for dx in 0..cell {
                    let (x, y) = (b * cell + dx, c * cell + dy);
                    let i = (y * w + x) * 3;
                    px[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    (w, h, px)
}
