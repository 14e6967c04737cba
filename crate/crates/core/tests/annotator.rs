mod common;

use std::fs;

use common::*;
use movietour::annotate::{
    annotate_frames, caption_track, emit_json, emit_srt, parse_json, predict_image, read_frames,
    smooth_labels, CaptionSegment, FramePrediction,
};
use movietour::imaging;
use movietour::labels::LabelMap;
use movietour::model::{build_model, ArchitectureConfig, Classifier};
use movietour::synthetic;
use movietour::tensor::Tensor;
use movietour::trainer::{train_sets, ImageSet, TrainConfig};
use movietour::{AnnotateError, TensorError};
use proptest::prelude::*;
use rand::Rng;

fn confident(ts: &[u64], labels: &[usize]) -> Vec<FramePrediction> {
    ts.iter()
        .zip(labels)
        .map(|(&t, &l)| {
            let mut p = vec![0.01; 14];
            p[l] = 0.87;
            FramePrediction::from_probs(t, &p, 14)
        })
        .collect()
}

const TAJ: usize = 8;

fn seg(start_ms: u64, end_ms: u64, label_index: usize, conf: f64) -> CaptionSegment {
    let labels = LabelMap::default();
    CaptionSegment {
        start_ms,
        end_ms,
        label_index,
        country: labels.country(label_index).unwrap().to_string(),
        mean_confidence: conf,
    }
}

#[test]
fn srt_examples_are_byte_exact() {
    let labels = LabelMap::default();
    assert_eq!(labels.index_of("Taj Mahal"), Some(TAJ));
    assert_eq!(
        emit_srt(&[seg(0, 4000, TAJ, 0.93)], &labels),
        "1\n00:00:00,000 --> 00:00:04,000\nTaj Mahal, India (confidence 0.93)\n"
    );
    assert_eq!(emit_srt(&[], &labels), "");
    let hour = emit_srt(&[seg(3_599_000, 3_601_000, TAJ, 0.5)], &labels);
    assert!(hour.contains("00:59:59,000 --> 01:00:01,000\n"));
    assert_eq!(check_srt(&hour), Ok(1));
}

#[test]
fn srt_multiple_blocks_follow_the_grammar() {
    let labels = LabelMap::default();
    let track = vec![seg(0, 1000, 2, 0.615), seg(1000, 2500, 7, 0.9), seg(4000, 7_200_123, 0, 1.0)];
    let text = emit_srt(&track, &labels);
    assert_eq!(check_srt(&text), Ok(3));
    assert!(text.starts_with("1\n00:00:00,000 --> 00:00:01,000\n"));
    assert!(text.contains("\n\n2\n00:00:01,000 --> 00:00:02,500\n"));
    assert!(text.ends_with("02:00:00,123\nBragatheeswarar Temple, India (confidence 1.00)\n"));
}

#[test]
fn json_examples() {
    let labels = LabelMap::default();
    assert_eq!(emit_json(&[], &labels), "[]");
    let one = emit_json(&[seg(1500, 4000, TAJ, 0.93)], &labels);
    assert_eq!(
        one,
        r#"[{"start_ms":1500,"end_ms":4000,"label":"Taj Mahal","country":"India","confidence":0.93}]"#
    );
    let track = vec![seg(0, 1000, 2, 0.1234567891), seg(1000, 2500, 7, 2.0 / 3.0)];
    let text = emit_json(&track, &labels);
    let back = parse_json(&text, &labels).unwrap();
    assert_eq!(back, track);
    assert_eq!(emit_json(&back, &labels), text);
}

#[test]
fn handworked_smoothing_examples() {
    let ts = [0, 1000, 2000, 3000, 4000];
    let t = caption_track(&confident(&ts, &[4, 4, 9, 4, 4]), &LabelMap::default(), 0.5, 5).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!((t[0].start_ms, t[0].end_ms, t[0].label_index), (0, 5000, 4));
    // Frame 2 gives 0.01 to the segment's label.
    assert!((t[0].mean_confidence - (4.0 * 0.87 + 0.01) / 5.0).abs() < 1e-12);

    let t = caption_track(&confident(&ts, &[1; 5]), &LabelMap::default(), 0.9, 5).unwrap();
    assert!(t.is_empty());

    let ts6 = [0, 1000, 2000, 3000, 4000, 5000];
    let t = caption_track(&confident(&ts6, &[1, 1, 1, 2, 2, 2]), &LabelMap::default(), 0.5, 1).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!((t[0].start_ms, t[0].end_ms), (0, 3000));
    assert_eq!((t[1].start_ms, t[1].end_ms), (3000, 6000));
}

#[test]
fn input_errors() {
    let labels = LabelMap::default();
    let preds = confident(&[0, 1000, 1000], &[1, 1, 1]);
    assert!(matches!(
        caption_track(&preds, &labels, 0.5, 3),
        Err(AnnotateError::NonMonotone { index: 2 })
    ));
    let preds = confident(&[0, 1000], &[1, 1]);
    assert!(caption_track(&preds, &labels, 0.5, 4).is_err());
    assert!(caption_track(&preds, &labels, 1.5, 3).is_err());
    assert!(caption_track(&[], &labels, 0.5, 3).unwrap().is_empty());
}

fn random_track(r: &mut impl Rng, n: usize, classes: usize) -> Vec<FramePrediction> {
    let mut t = 0u64;
    (0..n)
        .map(|_| {
            t += r.random_range(1..3000);
            let mut p: Vec<f64> = (0..classes).map(|_| r.random::<f64>().powi(4)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            FramePrediction::from_probs(t, &p, classes)
        })
        .collect()
}

fn lower_median_gap(ts: &[u64]) -> u64 {
    if ts.len() < 2 {
        return 1000;
    }
    let mut g: Vec<u64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    g.sort_unstable();
    g[(g.len() - 1) / 2]
}

#[test]
fn tracks_match_the_brute_force_builder_on_1000_sequences() {
    let labels = LabelMap::default();
    let mut r = rng(808);
    for case in 0..1000 {
        let n = r.random_range(1..40);
        let classes = r.random_range(2..5);
        let window = 2 * r.random_range(0..4) + 1;
        let tau = r.random_range(0.0..0.8);
        let preds = random_track(&mut r, n, classes);
        let ts: Vec<u64> = preds.iter().map(|p| p.timestamp_ms).collect();
        let raw: Vec<Option<usize>> = preds
            .iter()
            .map(|p| p.label.filter(|_| p.confidence >= tau))
            .collect();
        let want = oracle_segments(&ts, &raw, window, lower_median_gap(&ts));
        let got = caption_track(&preds, &labels, tau, window).unwrap();
        let got_triples: Vec<(u64, u64, usize)> =
            got.iter().map(|s| (s.start_ms, s.end_ms, s.label_index)).collect();
        assert_eq!(got_triples, want, "case {case}");
        for w in got.windows(2) {
            assert!(w[0].end_ms <= w[1].start_ms);
            assert!(w[0].label_index != w[1].label_index || w[0].end_ms < w[1].start_ms);
        }
        assert!(got.iter().all(|s| s.start_ms < s.end_ms));
        assert!(got.iter().all(|s| (0.0..=1.0).contains(&s.mean_confidence)));
        assert_eq!(check_srt(&emit_srt(&got, &labels)), Ok(got.len()));
    }
}

#[test]
fn raising_the_threshold_never_adds_caption_time() {
    let labels = LabelMap::default();
    let mut r = rng(909);
    for _ in 0..100 {
        let (n, classes) = (r.random_range(1..60), r.random_range(2..6));
        let preds = random_track(&mut r, n, classes);
        let window = 2 * r.random_range(0..4) + 1;
        let mut prev = u64::MAX;
        for step in 0..=20 {
            let tau = step as f64 / 20.0;
            let total: u64 = caption_track(&preds, &labels, tau, window)
                .unwrap()
                .iter()
                .map(|s| s.end_ms - s.start_ms)
                .sum();
            assert!(total <= prev, "tau {tau}: {total} > {prev}");
            prev = total;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn window_one_threshold_zero_is_identity(labels in prop::collection::vec(0usize..14, 1..50)) {
        let raw: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        prop_assert_eq!(smooth_labels(&raw, 1), raw);
    }

    #[test]
    fn smoothing_never_invents_labels(
        labels in prop::collection::vec(prop::option::of(0usize..4), 1..50),
        half in 0usize..5,
    ) {
        let out = smooth_labels(&labels, 2 * half + 1);
        prop_assert_eq!(out.len(), labels.len());
        for (i, l) in out.iter().enumerate() {
            if let Some(l) = l {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(labels.len() - 1);
                prop_assert!(labels[lo..=hi].contains(&Some(*l)));
            }
        }
    }

    #[test]
    fn topk_is_sorted_and_bounded(seed in any::<u64>(), k in 1usize..15) {
        let mut r = rng(seed);
        let mut p: Vec<f64> = (0..14).map(|_| r.random::<f64>()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let f = FramePrediction::from_probs(0, &p, k);
        prop_assert_eq!(f.topk.len(), k);
        prop_assert!(f.topk.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert!(f.topk.iter().map(|t| t.1).sum::<f64>() <= 1.0 + 1e-6);
        prop_assert_eq!(f.confidence, f.topk[0].1);
    }
}

struct Flat;

impl Classifier for Flat {
    fn num_classes(&self) -> usize {
        14
    }
    fn input_size(&self) -> usize {
        8
    }
    fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        Tensor::full(&[x.dim(0), 14], -1.5)
    }
}

#[test]
fn constant_logits_predict_class_zero_at_one_fourteenth() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    pattern_png(&p, 4);
    let f = predict_image(&Flat, &p, 14).unwrap();
    assert_eq!(f.label, Some(0));
    assert!((f.confidence - 1.0 / 14.0).abs() < 1e-9);
    assert!((f.topk.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(matches!(predict_image(&Flat, &p, 15), Err(AnnotateError::Input(_))));
    assert!(matches!(predict_image(&Flat, &p, 0), Err(AnnotateError::Input(_))));
    let junk = dir.path().join("junk.jpg");
    fs::write(&junk, b"\xff\xd8 broken").unwrap();
    assert!(matches!(predict_image(&Flat, &junk, 1), Err(AnnotateError::Corpus(_))));
}

#[test]
fn saturated_toy_model_is_confident_on_its_image() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("only.png");
    synthetic::render(6, 14, 40, &mut rng(1)).save(&p).unwrap();
    let set = ImageSet {
        input_size: 16,
        images: vec![imaging::to_tensor_data(&imaging::open(&p).unwrap(), 16)],
        labels: vec![6],
    };
    let params = build_model(ArchitectureConfig::reduced(16, 14), 5).unwrap();
    let cfg = TrainConfig::new(60, 1, 2, dir.path().join("toy.mtck"));
    let out = train_sets(params, &set, &set, &cfg, None).unwrap();
    let f = predict_image(&out.params, &p, 3).unwrap();
    assert_eq!(f.label, Some(6));
    assert!(f.confidence > 0.99, "{}", f.confidence);
}

#[test]
fn frame_directory_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    for (i, ms) in [0u64, 1000, 2000, 3000].iter().enumerate() {
        pattern_png(&frames.join(format!("{ms:08}.png")), i as u32);
    }
    fs::write(frames.join("notes.txt"), "ignored").unwrap();
    let list = read_frames(&frames).unwrap();
    assert_eq!(list.iter().map(|f| f.0).collect::<Vec<_>>(), vec![0, 1000, 2000, 3000]);
    let t = annotate_frames(&Flat, &LabelMap::default(), &list, 0.0, 3).unwrap();
    assert_eq!(t, vec![seg(0, 4000, 0, 1.0 / 14.0)]);
    let text = emit_srt(&t, &LabelMap::default());
    assert_eq!(
        text,
        "1\n00:00:00,000 --> 00:00:04,000\nBragatheeswarar Temple, India (confidence 0.07)\n"
    );

    let listing = dir.path().join("frames.txt");
    fs::write(
        &listing,
        format!("500\t{}\n250\t{}\n", frames.join("00000000.png").display(), frames.join("00001000.png").display()),
    )
    .unwrap();
    let list = read_frames(&listing).unwrap();
    assert!(matches!(
        annotate_frames(&Flat, &LabelMap::default(), &list, 0.0, 1),
        Err(AnnotateError::NonMonotone { index: 1 })
    ));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert!(matches!(read_frames(&empty), Err(AnnotateError::NoFrames(_))));
}
