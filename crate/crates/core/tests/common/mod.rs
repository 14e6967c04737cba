//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the kernels it is used to check.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use movietour::model::ModelParams;
use movietour::ops;
use movietour::tape::Tape;
use movietour::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi))).unwrap()
}

/// Direct 7-loop convolution in f64.
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [o, _, k, _]: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((oi * c + ci) * k + i) * k + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Scans each 2x2 window independently.
pub fn naive_maxpool2(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..n * c {
        for y in (0..h).step_by(2) {
            for xo in (0..w).step_by(2) {
                let cells = [
                    x[p * h * w + y * w + xo],
                    x[p * h * w + y * w + xo + 1],
                    x[p * h * w + (y + 1) * w + xo],
                    x[p * h * w + (y + 1) * w + xo + 1],
                ];
                out.push(cells.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Cross-entropy straight from the definition: no max subtraction.
/// Returns the mean loss and d(loss)/d(logits).
pub fn naive_xent(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        for c in 0..k {
            let p = row[c].exp() / denom;
            grad[r * k + c] = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
        loss -= (row[y].exp() / denom).ln();
    }
    (loss / n as f64, grad)
}

pub fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// ReLU masks and pool winners of both conv stages: the piecewise-linear
/// region the network is in.
fn activation_pattern(params: &ModelParams<f64>, x: &Tensor<f64>) -> (Vec<bool>, Vec<usize>) {
    let pad = params.config().padding();
    let mut mask = Vec::new();
    let mut winners = Vec::new();
    let h = ops::conv2d(x, &params.conv1_weight, &params.conv1_bias, 1, pad).unwrap();
    mask.extend(h.data().iter().map(|&v| v > 0.0));
    let (h, a) = ops::maxpool2(&ops::relu(&h)).unwrap();
    winners.extend(a);
    let h = ops::conv2d(&h, &params.conv2_weight, &params.conv2_bias, 1, pad).unwrap();
    mask.extend(h.data().iter().map(|&v| v > 0.0));
    let (_, a) = ops::maxpool2(&ops::relu(&h)).unwrap();
    winners.extend(a);
    (mask, winners)
}

fn model_loss(params: &ModelParams<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let logits = params.forward(x).unwrap();
    let k = params.config().num_classes;
    naive_xent(logits.data(), labels, k).0
}

#[derive(Debug, Default, Clone)]
pub struct CompositeCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central differences of the full CNN loss against tape gradients.
///
/// `coords_per_weight` coordinates of each weight tensor are sampled (every
/// bias coordinate is checked); `None` checks every parameter. Coordinates
/// whose perturbation moves the network across a ReLU or max-pool boundary
/// are skipped and counted, since the loss is not differentiable there.
pub fn composite_check(
    params: &ModelParams<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
    coords_per_weight: Option<usize>,
    rng: &mut impl Rng,
) -> CompositeCheck {
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let (logits, vars) = params.forward_taped(&mut tape, xv).unwrap();
    let loss = tape.softmax_xent(logits, labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars.grads(&mut tape).unwrap();

    let base = activation_pattern(params, x);
    let names = movietour::model::PARAM_NAMES;
    let mut result = CompositeCheck::default();
    for t in 0..6 {
        let len = params.tensors()[t].len();
        let coords: Vec<usize> = match coords_per_weight {
            Some(m) if t % 2 == 0 && m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let mut probe = params.clone();
            let orig = probe.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + eps;
            let plus = model_loss(&probe, x, labels);
            let pat_plus = activation_pattern(&probe, x);
            probe.tensors_mut()[t].data_mut()[i] = orig - eps;
            let minus = model_loss(&probe, x, labels);
            let pat_minus = activation_pattern(&probe, x);
            if pat_plus != base || pat_minus != base {
                result.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(grads[t][i], numeric);
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = format!(
                    "{}[{i}] analytic {:e} numeric {:e}",
                    names[t], grads[t][i], numeric
                );
            }
            result.checked += 1;
        }
    }
    result
}

pub fn solid_png(path: &Path, w: u32, h: u32, rgb: [u8; 3]) {
    RgbImage::from_pixel(w, h, Rgb(rgb)).save(path).unwrap();
}

/// A distinct, non-uniform picture per `id` (so difference hashes differ).
pub fn pattern_png(path: &Path, id: u32) {
    let img = RgbImage::from_fn(96, 80, |x, y| {
        let v = ((x * (id % 7 + 1) + y * (id / 7 + 2) + id * 13) % 256) as u8;
        let s = (((x / (id % 5 + 2)) + (y / (id % 3 + 3))) % 2 * 120) as u8;
        Rgb([v, v.wrapping_add(s), 255 - v])
    });
    img.save(path).unwrap();
}

pub fn file_url(path: &Path) -> String {
    url::Url::from_file_path(fs::canonicalize(path).unwrap())
        .unwrap()
        .to_string()
}

pub fn count_files(dir: &Path) -> usize {
    walk(dir).len()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// Captions produced by the smoothing rules, rebuilt from scratch: per
/// frame, count each label in the truncated window and keep one only if it
/// holds a strict majority; then cut wherever the label changes.
pub fn oracle_segments(
    timestamps: &[u64],
    labels: &[Option<usize>],
    window: usize,
    tail: u64,
) -> Vec<(u64, u64, usize)> {
    let n = labels.len();
    let half = window / 2;
    let mut smoothed = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let size = hi - lo + 1;
        let mut winner = None;
        for cand in labels[lo..=hi].iter().flatten() {
            let votes = labels[lo..=hi].iter().filter(|l| **l == Some(*cand)).count();
            if 2 * votes > size {
                winner = Some(*cand);
            }
        }
        smoothed.push(winner);
    }
    let mut segs = Vec::new();
    for i in 0..n {
        if i > 0 && smoothed[i] == smoothed[i - 1] {
            continue;
        }
        let mut j = i;
        while j + 1 < n && smoothed[j + 1] == smoothed[i] {
            j += 1;
        }
        if let Some(l) = smoothed[i] {
            let end = if j + 1 < n { timestamps[j + 1] } else { timestamps[n - 1] + tail };
            segs.push((timestamps[i], end, l));
        }
    }
    segs
}

/// Strict SubRip grammar: `index LF time --> time LF text LF` blocks joined
/// by one blank line, indices from 1, start < end, non-overlapping.
pub fn check_srt(text: &str) -> Result<usize, String> {
    if text.is_empty() {
        return Ok(0);
    }
    if !text.ends_with('\n') || text.ends_with("\n\n") || text.contains('\r') {
        return Err("bad line endings".into());
    }
    let parse_time = |s: &str| -> Result<u64, String> {
        let b = s.as_bytes();
        if b.len() != 12 || b[2] != b':' || b[5] != b':' || b[8] != b',' {
            return Err(format!("bad time {s:?}"));
        }
        let num = |r: std::ops::Range<usize>| -> Result<u64, String> {
            s[r].parse::<u64>().map_err(|_| format!("bad time {s:?}"))
        };
        let (h, m, sec, ms) = (num(0..2)?, num(3..5)?, num(6..8)?, num(9..12)?);
        if m > 59 || sec > 59 {
            return Err(format!("bad time {s:?}"));
        }
        Ok(((h * 60 + m) * 60 + sec) * 1000 + ms)
    };
    let mut prev_end = 0;
    let blocks: Vec<&str> = text.trim_end_matches('\n').split("\n\n").collect();
    for (i, block) in blocks.iter().enumerate() {
        let lines: Vec<&str> = block.split('\n').collect();
        if lines.len() < 3 {
            return Err(format!("block {} too short", i + 1));
        }
        if lines[0] != (i + 1).to_string() {
            return Err(format!("block {} has index {:?}", i + 1, lines[0]));
        }
        let (a, b) = lines[1]
            .split_once(" --> ")
            .ok_or(format!("block {} timing line {:?}", i + 1, lines[1]))?;
        let (start, end) = (parse_time(a)?, parse_time(b)?);
        if start >= end || start < prev_end {
            return Err(format!("block {} has bad interval", i + 1));
        }
        prev_end = end;
        if lines[2..].iter().any(|l| l.is_empty()) {
            return Err(format!("block {} has empty text", i + 1));
        }
    }
    Ok(blocks.len())
}
