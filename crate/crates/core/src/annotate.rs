//! Scene-location captions for images and timestamped frame sequences.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::AnnotateError;
use crate::imaging;
use crate::labels::LabelMap;
use crate::model::Classifier;
use crate::ops;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_WINDOW: usize = 5;
/// Frame spacing assumed for the final segment when a stream has one frame.
pub const DEFAULT_FRAME_GAP_MS: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub timestamp_ms: u64,
    /// `None` is the unknown label.
    pub label: Option<usize>,
    pub confidence: f64,
    /// `(class, probability)` sorted by descending probability, ties by
    /// ascending class.
    pub topk: Vec<(usize, f64)>,
}

impl FramePrediction {
    pub fn from_probs(timestamp_ms: u64, probs: &[f64], k: usize) -> Self {
        let mut ranked: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k.max(1));
        FramePrediction {
            timestamp_ms,
            label: Some(ranked[0].0),
            confidence: ranked[0].1,
            topk: ranked,
        }
    }

    /// Probability this frame assigns to `class`, if it is among the top-k.
    pub fn prob_of(&self, class: usize) -> f64 {
        self.topk
            .iter()
            .find(|(c, _)| *c == class)
            .map_or(0.0, |&(_, p)| p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSegment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub label_index: usize,
    pub country: String,
    pub mean_confidence: f64,
}

fn softmax_probs<M: Classifier + ?Sized>(
    model: &M,
    images: Vec<Vec<f32>>,
) -> Result<Vec<Vec<f64>>, AnnotateError> {
    let s = model.input_size();
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let data: Vec<f32> = chunk.iter().flatten().copied().collect();
        let x = Tensor::new(vec![chunk.len(), 3, s, s], data)?;
        let probs = ops::softmax_rows(&model.logits(&x)?.cast::<f64>())?;
        out.extend(probs.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Classifies one image file and returns its top-`k` classes.
pub fn predict_image<M: Classifier + ?Sized>(
    model: &M,
    image_path: &Path,
    k: usize,
) -> Result<FramePrediction, AnnotateError> {
    if k == 0 || k > model.num_classes() {
        return Err(AnnotateError::Input(format!(
            "k must be in 1..={}, got {k}",
            model.num_classes()
        )));
    }
    let img = imaging::open(image_path)?;
    let data = imaging::to_tensor_data(&img, model.input_size());
    let probs = softmax_probs(model, vec![data])?;
    Ok(FramePrediction::from_probs(0, &probs[0], k))
}

/// Centred sliding-window strict-majority vote.
///
/// The window is truncated at the stream edges. A label wins only when it
/// holds more than half of the window's frames; otherwise the frame becomes
/// unknown, which also covers ties.
pub fn smooth_labels(labels: &[Option<usize>], window: usize) -> Vec<Option<usize>> {
    let half = window / 2;
    (0..labels.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(labels.len());
            let slice = &labels[lo..hi];
            // Boyer-Moore candidate, then verify.
            let mut cand = None;
            let mut count = 0usize;
            for &l in slice {
                if count == 0 {
                    cand = Some(l);
                    count = 1;
                } else if cand == Some(l) {
                    count += 1;
                } else {
                    count -= 1;
                }
            }
            let cand = cand.flatten()?;
            let votes = slice.iter().filter(|&&l| l == Some(cand)).count();
            (2 * votes > slice.len()).then_some(cand)
        })
        .collect()
}

fn median_gap(timestamps: &[u64]) -> u64 {
    let mut gaps: Vec<u64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return DEFAULT_FRAME_GAP_MS;
    }
    gaps.sort_unstable();
    gaps[(gaps.len() - 1) / 2]
}

fn check_params(threshold: f64, window: usize) -> Result<(), AnnotateError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(AnnotateError::Input(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(AnnotateError::Input(format!(
            "window must be odd and at least 1, got {window}"
        )));
    }
    Ok(())
}

fn check_monotone(timestamps: impl Iterator<Item = u64>) -> Result<(), AnnotateError> {
    let mut prev: Option<u64> = None;
    for (index, ts) in timestamps.enumerate() {
        if prev.is_some_and(|p| ts <= p) {
            return Err(AnnotateError::NonMonotone { index });
        }
        prev = Some(ts);
    }
    Ok(())
}

/// Turns per-frame predictions into a caption track.
///
/// Frames below `threshold` become unknown, labels are smoothed over
/// `window` frames, runs of equal labels become segments ending at the next
/// differing frame (the last one at the final timestamp plus the median frame
/// gap), and unknown runs are dropped. A segment's confidence is the mean
/// probability its frames assign to the segment's label.
pub fn caption_track(
    predictions: &[FramePrediction],
    labels: &LabelMap,
    threshold: f64,
    window: usize,
) -> Result<Vec<CaptionSegment>, AnnotateError> {
    check_params(threshold, window)?;
    check_monotone(predictions.iter().map(|p| p.timestamp_ms))?;
    if predictions.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<Option<usize>> = predictions
        .iter()
        .map(|p| p.label.filter(|_| p.confidence >= threshold))
        .collect();
    let smoothed = smooth_labels(&raw, window);
    let timestamps: Vec<u64> = predictions.iter().map(|p| p.timestamp_ms).collect();
    let tail_end = timestamps[timestamps.len() - 1] + median_gap(&timestamps);

    let mut segments = Vec::new();
    let mut start = 0;
    while start < smoothed.len() {
        let mut end = start + 1;
        while end < smoothed.len() && smoothed[end] == smoothed[start] {
            end += 1;
        }
        if let Some(label) = smoothed[start] {
            let conf: f64 = predictions[start..end].iter().map(|p| p.prob_of(label)).sum();
            segments.push(CaptionSegment {
                start_ms: timestamps[start],
                end_ms: timestamps.get(end).copied().unwrap_or(tail_end),
                label_index: label,
                country: labels.country(label).unwrap_or_default().to_string(),
                mean_confidence: conf / (end - start) as f64,
            });
        }
        start = end;
    }
    Ok(segments)
}

/// Classifies every frame, then builds the caption track.
pub fn annotate_frames<M: Classifier + Sync + ?Sized>(
    model: &M,
    labels: &LabelMap,
    frames: &[(u64, PathBuf)],
    threshold: f64,
    window: usize,
) -> Result<Vec<CaptionSegment>, AnnotateError> {
    check_params(threshold, window)?;
    check_monotone(frames.iter().map(|f| f.0))?;
    let size = model.input_size();
    let images: Vec<Vec<f32>> = frames
        .par_iter()
        .map(|(_, p)| imaging::open(p).map(|img| imaging::to_tensor_data(&img, size)))
        .collect::<Result<_, _>>()?;
    let k = model.num_classes();
    let predictions: Vec<FramePrediction> = softmax_probs(model, images)?
        .iter()
        .zip(frames)
        .map(|(probs, (ts, _))| FramePrediction::from_probs(*ts, probs, k))
        .collect();
    caption_track(&predictions, labels, threshold, window)
}

fn srt_time(ms: u64) -> String {
    format!(
        "{:02}:{:02}:{:02},{:03}",
        ms / 3_600_000,
        ms / 60_000 % 60,
        ms / 1000 % 60,
        ms % 1000
    )
}

/// SubRip text: numbered blocks separated by a blank line, LF endings.
pub fn emit_srt(segments: &[CaptionSegment], labels: &LabelMap) -> String {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "{}\n{} --> {}\n{}, {} (confidence {:.2})\n",
                i + 1,
                srt_time(s.start_ms),
                srt_time(s.end_ms),
                labels.name(s.label_index).unwrap_or("unknown"),
                s.country,
                s.mean_confidence
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Serialize, Deserialize)]
struct JsonSegment {
    start_ms: u64,
    end_ms: u64,
    label: String,
    country: String,
    confidence: f64,
}

pub fn emit_json(segments: &[CaptionSegment], labels: &LabelMap) -> String {
    let rows: Vec<JsonSegment> = segments
        .iter()
        .map(|s| JsonSegment {
            start_ms: s.start_ms,
            end_ms: s.end_ms,
            label: labels.name(s.label_index).unwrap_or("unknown").to_string(),
            country: s.country.clone(),
            confidence: s.mean_confidence,
        })
        .collect();
    serde_json::to_string(&rows).expect("segments serialise")
}

pub fn parse_json(text: &str, labels: &LabelMap) -> Result<Vec<CaptionSegment>, AnnotateError> {
    let rows: Vec<JsonSegment> =
        serde_json::from_str(text).map_err(|e| AnnotateError::Json(e.to_string()))?;
    rows.into_iter()
        .map(|r| {
            let label_index = labels
                .index_of(&r.label)
                .ok_or_else(|| AnnotateError::Json(format!("unknown label {:?}", r.label)))?;
            Ok(CaptionSegment {
                start_ms: r.start_ms,
                end_ms: r.end_ms,
                label_index,
                country: r.country,
                mean_confidence: r.confidence,
            })
        })
        .collect()
}

/// Frames named `NNNNNNNN.jpg` (also `.jpeg`/`.png`), the digits being
/// milliseconds from stream start, sorted by time.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<(u64, PathBuf)>, AnnotateError> {
    let io = |source| AnnotateError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let image_ext = matches!(ext.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png");
        if image_ext && stem.len() == 8 && stem.bytes().all(|b| b.is_ascii_digit()) {
            frames.push((stem.parse().expect("eight digits"), path));
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(AnnotateError::NoFrames(dir.to_path_buf()));
    }
    Ok(frames)
}

/// Lines of `<ms>\t<path>`; relative paths resolve against the list's
/// directory. Order is kept as written so monotonicity can be checked.
pub fn read_frame_list(file: &Path) -> Result<Vec<(u64, PathBuf)>, AnnotateError> {
    let text = fs::read_to_string(file).map_err(|source| AnnotateError::Io {
        path: file.to_path_buf(),
        source,
    })?;
    let base = file.parent().unwrap_or(Path::new(""));
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (ms, path) = line
            .split_once('\t')
            .ok_or_else(|| AnnotateError::Input(format!("line {}: expected <ms>\\t<path>", i + 1)))?;
        let ms = ms
            .trim()
            .parse()
            .map_err(|_| AnnotateError::Input(format!("line {}: bad timestamp {ms:?}", i + 1)))?;
        frames.push((ms, base.join(path.trim())));
    }
    if frames.is_empty() {
        return Err(AnnotateError::NoFrames(file.to_path_buf()));
    }
    Ok(frames)
}

/// Reads a frame directory or a frame-list file.
pub fn read_frames(path: &Path) -> Result<Vec<(u64, PathBuf)>, AnnotateError> {
    if path.is_dir() {
        read_frame_dir(path)
    } else {
        read_frame_list(path)
    }
}
