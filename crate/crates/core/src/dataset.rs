//! Dataset metadata ingestion and the index file.
//!
//! Metadata is tab-separated with a header naming at least `filename` and
//! `scene_label` (an optional `split` column is honoured). The index file
//! written by `ingest` has the header `path\tlabel\tsplit`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// The ten DCASE 2020 task 1a scene classes in their canonical order.
pub const DEFAULT_LABELS: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

pub fn default_labels() -> Vec<String> {
    DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "evaluate" | "eval" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<Entry>,
}

pub const INDEX_HEADER: &str = "path\tlabel\tsplit";

fn header_columns<'a>(header: &'a str, required: &[&str]) -> Result<BTreeMap<&'a str, usize>> {
    let cols: BTreeMap<&str, usize> = header.split('\t').enumerate().map(|(i, c)| (c.trim(), i)).collect();
    let missing: Vec<&str> = required.iter().copied().filter(|c| !cols.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("header is missing column(s) {}", missing.join(", "))));
    }
    Ok(cols)
}

fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').collect()))
}

impl DatasetIndex {
    /// Builds an index from metadata text. Relative file names resolve
    /// against `audio_root`; rows without a split column get
    /// `default_split`. Every bad row is reported, not just the first.
    pub fn from_metadata(text: &str, audio_root: &Path, labels: &[String], default_split: Split) -> Result<Self> {
        let header = text.lines().next().ok_or_else(|| Error::Data("metadata is empty".into()))?;
        let cols = header_columns(header, &["filename", "scene_label"])?;
        let (fcol, lcol, scol) = (cols["filename"], cols["scene_label"], cols.get("split").copied());
        let mut entries = Vec::new();
        let mut problems = Vec::new();
        for (line, fields) in rows(text) {
            let get = |c: usize| fields.get(c).map(|s| s.trim());
            let (Some(file), Some(label)) = (get(fcol), get(lcol)) else {
                problems.push(format!("line {line}: too few columns"));
                continue;
            };
            if !labels.iter().any(|l| l == label) {
                problems.push(format!("line {line}: unknown label {label:?}"));
                continue;
            }
            let split = match scol.and_then(get) {
                Some(s) => match s.parse() {
                    Ok(s) => s,
                    Err(e) => {
                        problems.push(format!("line {line}: {e}"));
                        continue;
                    }
                },
                None => default_split,
            };
            let path = audio_root.join(file);
            if !path.is_file() {
                problems.push(format!("line {line}: missing audio file {}", path.display()));
                continue;
            }
            entries.push(Entry { path, label: label.to_owned(), split });
        }
        if !problems.is_empty() {
            return Err(Error::Data(format!("{} bad metadata row(s): {}", problems.len(), problems.join("; "))));
        }
        Ok(DatasetIndex { entries })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(INDEX_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.label, e.split));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let header = text.lines().next().ok_or_else(|| Error::Data("index is empty".into()))?;
        if header.trim_end_matches('\r') != INDEX_HEADER {
            return Err(Error::Data(format!("index header must be {INDEX_HEADER:?}, got {header:?}")));
        }
        let entries = rows(text)
            .map(|(line, f)| match f[..] {
                [p, l, s] => Ok(Entry { path: PathBuf::from(p), label: l.to_owned(), split: s.parse()? }),
                _ => Err(Error::Data(format!("index line {line}: expected 3 columns, got {}", f.len()))),
            })
            .collect::<Result<_>>()?;
        Ok(DatasetIndex { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Per-label counts for `split`, in `labels` order.
    pub fn class_counts(&self, labels: &[String], split: Split) -> Vec<usize> {
        labels.iter().map(|l| self.split(split).filter(|e| &e.label == l).count()).collect()
    }
}

/// Position of `label` in `labels`.
pub fn label_index(labels: &[String], label: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::Data(format!("label {label:?} is not in the configured label set")))
}
