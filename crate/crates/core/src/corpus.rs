//! Corpus manifests: directory scanning, stratified splitting and batch
//! loading.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::imaging;
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

mod hex_hash {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub label_index: usize,
    pub split: Option<Split>,
    #[serde(rename = "hash", with = "hex_hash")]
    pub content_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    labels: LabelMap,
    ratios: Option<[f64; 3]>,
    seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub labels: LabelMap,
    pub records: Vec<SampleRecord>,
    pub ratios: Option<[f64; 3]>,
    pub seed: Option<u64>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn is_split(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.split.is_some())
    }

    pub fn records_in(&self, split: Split) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for r in &self.records {
            if split.is_none() || r.split == split {
                counts[r.label_index] += 1;
            }
        }
        counts
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = ManifestHeader {
            labels: self.labels.clone(),
            ratios: self.ratios,
            seed: self.seed,
        };
        let mut emit = |line: String| -> Result<(), CorpusError> {
            writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))
        };
        emit(serde_json::to_string(&header).expect("header serialises"))?;
        for r in &self.records {
            emit(serde_json::to_string(r).expect("record serialises"))?;
        }
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    /// Reads a `manifest.jsonl`; record paths resolve against its directory.
    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CorpusError::Manifest(format!("{} is empty", path.display())))?
            .map_err(|e| CorpusError::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| CorpusError::Manifest(format!("bad header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| CorpusError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Manifest(format!("line {}: {e}", i + 2)))?;
            if r.label_index >= header.labels.len() {
                return Err(CorpusError::Manifest(format!(
                    "line {}: label_index {} outside label map of {}",
                    i + 2,
                    r.label_index,
                    header.labels.len()
                )));
            }
            records.push(r);
        }
        Ok(CorpusManifest {
            labels: header.labels,
            records,
            ratios: header.ratios,
            seed: header.seed,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

/// A file that was not recorded during a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

/// A file whose perceptual hash matched an earlier file of the same class.
#[derive(Clone, Debug, PartialEq)]
pub struct Duplicate {
    pub path: PathBuf,
    pub kept: String,
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub manifest: CorpusManifest,
    pub skipped: Vec<Skipped>,
    pub duplicates: Vec<Duplicate>,
    pub empty_classes: Vec<String>,
}

/// Builds an unsplit manifest from `root/<class name>/<image>` files.
///
/// Files are visited in name order. Undecodable files and exact perceptual
/// duplicates within a class are reported and left out.
pub fn scan_directory(root: &Path, labels: &LabelMap) -> Result<ScanReport, CorpusError> {
    let mut unknown = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| CorpusError::io(root, e))? {
        let entry = entry.map_err(|e| CorpusError::io(root, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if labels.index_of(&name).is_none() {
                unknown.push(name);
            }
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        return Err(CorpusError::UnknownClass(unknown));
    }

    let mut report = ScanReport {
        manifest: CorpusManifest {
            labels: labels.clone(),
            records: Vec::new(),
            ratios: None,
            seed: None,
            root: root.to_path_buf(),
        },
        skipped: Vec::new(),
        duplicates: Vec::new(),
        empty_classes: Vec::new(),
    };

    for entry in labels.entries() {
        let dir = root.join(&entry.name);
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(CorpusError::io(&dir, e)),
        };
        files.sort();

        let hashed: Vec<Result<u64, String>> = files
            .par_iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| e.to_string())?;
                imaging::decode(&bytes).map(|img| imaging::dhash(&img))
            })
            .collect();

        let mut seen: HashMap<u64, String> = HashMap::new();
        let mut kept = 0usize;
        for (path, result) in files.into_iter().zip(hashed) {
            let hash = match result {
                Ok(h) => h,
                Err(reason) => {
                    warn!("skipping {}: {reason}", path.display());
                    report.skipped.push(Skipped { path, reason });
                    continue;
                }
            };
            let rel = format!("{}/{}", entry.name, path.file_name().unwrap().to_string_lossy());
            if let Some(first) = seen.get(&hash) {
                warn!("{} duplicates {first}", path.display());
                report.duplicates.push(Duplicate {
                    path,
                    kept: first.clone(),
                });
                continue;
            }
            seen.insert(hash, rel.clone());
            report.manifest.records.push(SampleRecord {
                path: rel,
                label_index: entry.index,
                split: None,
                content_hash: hash,
            });
            kept += 1;
        }
        if kept == 0 {
            warn!("class {:?} has no images", entry.name);
            report.empty_classes.push(entry.name.clone());
        }
    }
    Ok(report)
}

/// Splits `n` items by `ratios` with largest-remainder rounding.
///
/// Ties in the fractional parts go to the earlier split.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| {
        let q = n as f64 * r;
        // Snap float noise such as 15.000000000000002 or 27.999999999999996.
        if (q - q.round()).abs() < 1e-9 {
            q.round()
        } else {
            q
        }
    });
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Largest-remainder counts, then each split with a positive ratio that
/// came out empty takes one item from the currently largest split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = largest_remainder(n, ratios);
    for i in 0..3 {
        if counts[i] == 0 && ratios[i] > 0.0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<(), CorpusError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(CorpusError::Ratios(format!(
            "ratios must be finite and non-negative, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CorpusError::Ratios(format!("ratios sum to {sum}, not 1")));
    }
    Ok(())
}

/// Per-class seeded shuffle followed by a largest-remainder partition.
///
/// Each class draws from its own ChaCha8 stream (stream id = class index), so
/// the assignment of one class does not depend on the size of another.
pub fn stratified_split(
    manifest: &CorpusManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    validate_ratios(ratios)?;
    let mut by_class: Vec<Vec<SampleRecord>> = vec![Vec::new(); manifest.labels.len()];
    for r in &manifest.records {
        by_class[r.label_index].push(r.clone());
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for (label, mut class) in by_class.into_iter().enumerate() {
        let name = manifest.labels.name(label).unwrap_or_default().to_string();
        if class.len() < 3 {
            return Err(CorpusError::Split {
                class: name,
                reason: format!("needs at least 3 images, has {}", class.len()),
            });
        }
        class.sort_by(|a, b| a.path.cmp(&b.path));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        class.shuffle(&mut rng);
        let counts = split_counts(class.len(), ratios);
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(CorpusError::Split {
                class: name,
                reason: format!(
                    "{} images at ratios {ratios:?} leave the {} split empty",
                    class.len(),
                    Split::ALL[i]
                ),
            });
        }
        let mut it = class.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for mut r in it.by_ref().take(count) {
                r.split = Some(split);
                records.push(r);
            }
        }
    }
    Ok(CorpusManifest {
        labels: manifest.labels.clone(),
        records,
        ratios: Some(ratios),
        seed: Some(seed),
        root: manifest.root.clone(),
    })
}

/// Decodes and normalises each record into CHW data of `input_size`^2 pixels.
pub fn load_images(
    manifest: &CorpusManifest,
    records: &[&SampleRecord],
    input_size: usize,
) -> Result<Vec<Vec<f32>>, CorpusError> {
    records
        .par_iter()
        .map(|r| {
            let img = imaging::open(&manifest.resolve(r))?;
            Ok(imaging::to_tensor_data(&img, input_size))
        })
        .collect()
}

/// Loads records as a `[N, 3, S, S]` batch in `[-1, 1]` plus their labels.
pub fn load_batch(
    manifest: &CorpusManifest,
    records: &[&SampleRecord],
    input_size: usize,
) -> Result<(Tensor<f32>, Vec<usize>), CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::Manifest("cannot load an empty batch".into()));
    }
    let images = load_images(manifest, records, input_size)?;
    let data: Vec<f32> = images.into_iter().flatten().collect();
    let tensor = Tensor::new(vec![records.len(), 3, input_size, input_size], data)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    Ok((tensor, records.iter().map(|r| r.label_index).collect()))
}
