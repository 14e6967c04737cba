//! Download-and-curate pipeline driven by a URL manifest.
//!
//! Each row is fetched, decode-checked, resized to a 128-pixel short side,
//! difference-hashed and stored under `<out>/<class>/<hash>.png` unless the
//! class already holds an image with the same hash. Relevance filtering stays
//! a manual step.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::error::CorpusError;
use crate::imaging;
use crate::labels::LabelMap;

pub const REPORT_FILE: &str = "curation_report.json";

const MAX_DOWNLOAD_BYTES: u64 = 64 << 20;
const FETCH_WORKERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct UrlRow {
    pub class: String,
    pub url: String,
    pub license: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UrlManifest {
    pub rows: Vec<UrlRow>,
}

impl UrlManifest {
    /// Parses CSV with the exact header `class,url,license`.
    pub fn from_reader(reader: impl Read) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| CorpusError::UrlManifest(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["class", "url", "license"] {
            return Err(CorpusError::UrlManifest(format!(
                "header must be `class,url,license`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, row) in rdr.deserialize().enumerate() {
            let row: UrlRow =
                row.map_err(|e| CorpusError::UrlManifest(format!("row {}: {e}", i + 1)))?;
            rows.push(row);
        }
        Ok(UrlManifest { rows })
    }

    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_reader(file)
    }

    /// Every class must exist in `labels` and every URL must parse with a
    /// `file`, `http` or `https` scheme.
    pub fn validate(&self, labels: &LabelMap) -> Result<(), CorpusError> {
        let mut unknown: Vec<String> = self
            .rows
            .iter()
            .filter(|r| labels.index_of(&r.class).is_none())
            .map(|r| r.class.clone())
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(CorpusError::UnknownClass(unknown));
        }
        for (i, r) in self.rows.iter().enumerate() {
            let url = Url::parse(&r.url)
                .map_err(|e| CorpusError::UrlManifest(format!("row {}: {:?}: {e}", i + 1, r.url)))?;
            if !matches!(url.scheme(), "file" | "http" | "https") {
                return Err(CorpusError::UrlManifest(format!(
                    "row {}: unsupported scheme {:?}",
                    i + 1,
                    url.scheme()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounters {
    pub class: String,
    pub downloaded: usize,
    pub failed: usize,
    pub rejected_undecodable: usize,
    pub rejected_duplicate: usize,
    pub stored: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub classes: Vec<ClassCounters>,
    /// Per-row failure messages, in manifest order.
    pub failures: Vec<String>,
}

impl CurationReport {
    pub fn totals(&self) -> ClassCounters {
        let mut t = ClassCounters {
            class: "total".into(),
            ..Default::default()
        };
        for c in &self.classes {
            t.downloaded += c.downloaded;
            t.failed += c.failed;
            t.rejected_undecodable += c.rejected_undecodable;
            t.rejected_duplicate += c.rejected_duplicate;
            t.stored += c.stored;
        }
        t
    }

    fn counters(&mut self, class: &str) -> &mut ClassCounters {
        let i = match self.classes.iter().position(|c| c.class == class) {
            Some(i) => i,
            None => {
                self.classes.push(ClassCounters {
                    class: class.to_string(),
                    ..Default::default()
                });
                self.classes.len() - 1
            }
        };
        &mut self.classes[i]
    }
}

fn fetch(url: &str) -> Result<Vec<u8>, String> {
    let parsed = Url::parse(url).map_err(|e| e.to_string())?;
    if parsed.scheme() == "file" {
        let path = parsed
            .to_file_path()
            .map_err(|_| format!("{url} is not a local file path"))?;
        return fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
    }
    let mut response = ureq::get(url).call().map_err(|e| e.to_string())?;
    response
        .body_mut()
        .with_config()
        .limit(MAX_DOWNLOAD_BYTES)
        .read_to_vec()
        .map_err(|e| e.to_string())
}

enum Prepared {
    Failed(String),
    Undecodable(String),
    Ready { hash: u64, png: Vec<u8> },
}

fn prepare(url: &str) -> Prepared {
    let bytes = match fetch(url) {
        Ok(b) => b,
        Err(e) => return Prepared::Failed(e),
    };
    let img = match imaging::decode(&bytes) {
        Ok(img) => img,
        Err(e) => return Prepared::Undecodable(e),
    };
    let img = imaging::resize_short_side(&img, imaging::STORED_SHORT_SIDE);
    let hash = imaging::dhash(&img);
    let mut png = Vec::new();
    if let Err(e) = img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png) {
        return Prepared::Undecodable(e.to_string());
    }
    Prepared::Ready { hash, png }
}

fn existing_hashes(dir: &Path) -> Result<HashSet<u64>, CorpusError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files
        .par_iter()
        .filter_map(|p| {
            let bytes = fs::read(p).ok()?;
            imaging::decode(&bytes).ok().map(|img| imaging::dhash(&img))
        })
        .collect())
}

/// Runs the pipeline and writes the report to `<out_dir>/curation_report.json`.
///
/// Per-row problems are counted in the report; only failures to create or
/// write `out_dir` are fatal.
pub fn build_corpus(
    urls: &UrlManifest,
    labels: &LabelMap,
    out_dir: &Path,
) -> Result<CurationReport, CorpusError> {
    urls.validate(labels)?;
    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;

    let mut report = CurationReport::default();
    let mut seen: Vec<Option<HashSet<u64>>> = vec![None; labels.len()];
    for row in &urls.rows {
        let label = labels.index_of(&row.class).expect("validated");
        report.counters(&row.class);
        if seen[label].is_none() {
            let dir = out_dir.join(&row.class);
            fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
            seen[label] = Some(existing_hashes(&dir)?);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(FETCH_WORKERS)
        .build()
        .map_err(|e| CorpusError::io(out_dir, std::io::Error::other(e)))?;
    let prepared: Vec<Prepared> =
        pool.install(|| urls.rows.par_iter().map(|r| prepare(&r.url)).collect());

    for (row, outcome) in urls.rows.iter().zip(prepared) {
        let label = labels.index_of(&row.class).expect("validated");
        let counters = report.counters(&row.class);
        match outcome {
            Prepared::Failed(e) => {
                counters.failed += 1;
                report.failures.push(format!("{}: fetch failed: {e}", row.url));
            }
            Prepared::Undecodable(e) => {
                counters.downloaded += 1;
                counters.rejected_undecodable += 1;
                report.failures.push(format!("{}: undecodable: {e}", row.url));
            }
            Prepared::Ready { hash, png } => {
                counters.downloaded += 1;
                let class_seen = seen[label].as_mut().expect("initialised above");
                if !class_seen.insert(hash) {
                    counters.rejected_duplicate += 1;
                    continue;
                }
                let path = out_dir.join(&row.class).join(format!("{hash:016x}.png"));
                fs::write(&path, png).map_err(|e| CorpusError::io(&path, e))?;
                counters.stored += 1;
            }
        }
    }

    let report_path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    fs::write(&report_path, json).map_err(|e| CorpusError::io(&report_path, e))?;
    Ok(report)
}
