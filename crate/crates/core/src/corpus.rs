//! Raw LM corpora and labeled classification datasets.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Ingestion {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown task kind `{0}` (expected `binary` or `multilabel`)")]
    UnknownTaskKind(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Replaces every ASCII digit with `'0'`. Other numerals are left alone.
pub fn normalize_text(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_digit() { '0' } else { c })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCorpus {
    pub documents: Vec<String>,
    pub source_tags: Vec<Option<String>>,
}

impl RawCorpus {
    pub fn from_documents<I, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let documents: Vec<String> = docs.into_iter().map(|d| normalize_text(d.as_ref())).collect();
        let source_tags = vec![None; documents.len()];
        Self {
            documents,
            source_tags,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_chars(&self) -> usize {
        self.documents.iter().map(|d| d.chars().count()).sum()
    }
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Loads plain-text files as one document per non-blank line.
///
/// Files are visited in sorted path order so the result does not depend on
/// the order the caller listed them in.
pub fn load_lm_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<RawCorpus, CorpusError> {
    let mut sorted: Vec<&Path> = paths.iter().map(|p| p.as_ref()).collect();
    sorted.sort();
    let mut corpus = RawCorpus::default();
    for path in sorted {
        let text = read_utf8(path)?;
        let tag = path.display().to_string();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            corpus.documents.push(normalize_text(line));
            corpus.source_tags.push(Some(tag.clone()));
        }
    }
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multilabel,
}

impl FromStr for TaskKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Self::Binary),
            "multilabel" | "multi-label" => Ok(Self::Multilabel),
            other => Err(CorpusError::UnknownTaskKind(other.to_string())),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Binary => "binary",
            Self::Multilabel => "multilabel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    /// Sorted, deduplicated label ids.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub label_vocabulary: Vec<String>,
    pub task_kind: TaskKind,
}

#[derive(Deserialize)]
struct RecordIn {
    text: Option<String>,
    labels: Option<Vec<String>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    text: &'a str,
    labels: Vec<&'a str>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }

    /// Checks the per-kind label invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let n = self.label_vocabulary.len();
        match self.task_kind {
            TaskKind::Binary if n < 2 => {
                return Err(CorpusError::Invalid(format!(
                    "binary dataset needs at least 2 labels, found {n}"
                )))
            }
            _ => {}
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if let Some(&bad) = ex.labels.iter().find(|&&l| l >= n) {
                return Err(CorpusError::Invalid(format!(
                    "example {i} has label id {bad} outside vocabulary of {n}"
                )));
            }
            if self.task_kind == TaskKind::Binary && ex.labels.len() != 1 {
                return Err(CorpusError::Invalid(format!(
                    "binary example {i} has {} labels",
                    ex.labels.len()
                )));
            }
        }
        Ok(())
    }

    /// Single class id of a binary example.
    pub fn class_of(&self, index: usize) -> usize {
        self.examples[index].labels[0]
    }

    /// Writes the dataset back out as line-delimited JSON records.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        for ex in &self.examples {
            let rec = RecordOut {
                text: &ex.text,
                labels: ex
                    .labels
                    .iter()
                    .map(|&l| self.label_vocabulary[l].as_str())
                    .collect(),
            };
            serde_json::to_writer(&mut tmp, &rec)?;
            tmp.write_all(b"\n")?;
        }
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            label_vocabulary: self.label_vocabulary.clone(),
            task_kind: self.task_kind,
        }
    }
}

/// Reads line-delimited `{"text": ..., "labels": [...]}` records. Label ids
/// follow sorted label order, so for binary data the lexicographically larger
/// label (`1`, `pos`, `true`) gets id 1.
pub fn load_classification_dataset(
    path: &Path,
    task_kind: TaskKind,
) -> Result<LabeledDataset, CorpusError> {
    let ds = read_records(path, task_kind, None)?;
    ds.validate()?;
    Ok(ds)
}

/// Like [`load_classification_dataset`] but maps labels onto a fixed
/// vocabulary (e.g. the one a trained classifier was built with). Labels not
/// in the vocabulary are a schema error.
pub fn load_classification_dataset_with_labels(
    path: &Path,
    task_kind: TaskKind,
    label_vocabulary: &[String],
) -> Result<LabeledDataset, CorpusError> {
    read_records(path, task_kind, Some(label_vocabulary))
}

fn read_records(
    path: &Path,
    task_kind: TaskKind,
    fixed: Option<&[String]>,
) -> Result<LabeledDataset, CorpusError> {
    let text = read_utf8(path)?;
    let mut vocab: Vec<String> = fixed.map(|f| f.to_vec()).unwrap_or_default();
    let mut index: HashMap<String, usize> =
        vocab.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    let mut examples = Vec::new();
    let schema = |line: usize, message: String| CorpusError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn =
            serde_json::from_str(line).map_err(|e| schema(lineno, format!("malformed record: {e}")))?;
        let text = rec.text.ok_or_else(|| schema(lineno, "missing field `text`".into()))?;
        let labels = rec
            .labels
            .ok_or_else(|| schema(lineno, "missing field `labels`".into()))?;
        if task_kind == TaskKind::Binary && labels.len() != 1 {
            return Err(schema(
                lineno,
                format!("binary task needs exactly one label, got {}", labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(schema(lineno, "empty label list".into()));
        }
        let mut ids = Vec::with_capacity(labels.len());
        for label in labels {
            let id = match index.get(&label) {
                Some(&id) => id,
                None if fixed.is_some() => {
                    return Err(schema(lineno, format!("label `{label}` not in label vocabulary")))
                }
                None => {
                    vocab.push(label.clone());
                    index.insert(label, vocab.len() - 1);
                    vocab.len() - 1
                }
            };
            ids.push(id);
        }
        ids.sort_unstable();
        ids.dedup();
        examples.push(LabeledExample {
            text: normalize_text(&text),
            labels: ids,
        });
    }
    if fixed.is_none() {
        let mut sorted = vocab.clone();
        sorted.sort();
        let remap: Vec<usize> = vocab
            .iter()
            .map(|l| sorted.binary_search(l).expect("label present"))
            .collect();
        for ex in &mut examples {
            ex.labels.iter_mut().for_each(|l| *l = remap[*l]);
            ex.labels.sort_unstable();
        }
        vocab = sorted;
    }
    Ok(LabeledDataset {
        examples,
        label_vocabulary: vocab,
        task_kind,
    })
}

#[derive(Clone, Debug)]
pub struct FilteredDataset {
    pub dataset: LabeledDataset,
    /// Set when every label fell below the threshold.
    pub all_labels_removed: bool,
}

/// Drops labels seen on fewer than `min_train_count` examples. Examples whose
/// label set becomes empty are kept.
pub fn filter_frequent_labels(
    ds: &LabeledDataset,
    min_train_count: usize,
) -> Result<FilteredDataset, CorpusError> {
    if ds.task_kind != TaskKind::Multilabel {
        return Err(CorpusError::Invalid(
            "frequent-label filtering applies to multilabel datasets".into(),
        ));
    }
    if min_train_count == 0 {
        return Err(CorpusError::Invalid("min_train_count must be at least 1".into()));
    }
    let mut counts = vec![0usize; ds.label_vocabulary.len()];
    for ex in &ds.examples {
        for &l in &ex.labels {
            counts[l] += 1;
        }
    }
    let keep: Vec<String> = ds
        .label_vocabulary
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c >= min_train_count)
        .map(|(l, _)| l.clone())
        .collect();
    let dataset = restrict_labels(ds, &keep);
    Ok(FilteredDataset {
        all_labels_removed: dataset.label_vocabulary.is_empty(),
        dataset,
    })
}

/// Re-indexes a dataset onto `keep` (in that order), dropping other labels.
pub fn restrict_labels(ds: &LabeledDataset, keep: &[String]) -> LabeledDataset {
    let index: HashMap<&str, usize> = keep.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let remap: Vec<Option<usize>> = ds
        .label_vocabulary
        .iter()
        .map(|l| index.get(l.as_str()).copied())
        .collect();
    let examples = ds
        .examples
        .iter()
        .map(|ex| {
            let mut labels: Vec<usize> = ex.labels.iter().filter_map(|&l| remap[l]).collect();
            labels.sort_unstable();
            LabeledExample {
                text: ex.text.clone(),
                labels,
            }
        })
        .collect();
    LabeledDataset {
        examples,
        label_vocabulary: keep.to_vec(),
        task_kind: ds.task_kind,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: LabeledDataset,
}

/// Seeded shuffle followed by a floor-sized partition; the remainder goes to
/// train. A non-empty ratio never yields an empty part.
pub fn split_dataset(
    ds: &LabeledDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplits, CorpusError> {
    let SplitRatios { train, valid, test } = ratios;
    if [train, valid, test].iter().any(|&r| !(r > 0.0)) {
        return Err(CorpusError::Split("ratios must be positive".into()));
    }
    if (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Split(format!(
            "ratios sum to {}, expected 1",
            train + valid + test
        )));
    }
    let n = ds.len();
    if n < 3 {
        return Err(CorpusError::Split(format!("{n} examples cannot fill 3 parts")));
    }
    let part = |r: f64| ((n as f64 * r) + 1e-9).floor().max(1.0) as usize;
    let n_valid = part(valid);
    let n_test = part(test);
    if n_valid + n_test >= n {
        return Err(CorpusError::Split(format!("{n} examples leave no training data")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_valid - n_test;
    Ok(DatasetSplits {
        train: ds.subset(&order[..n_train]),
        valid: ds.subset(&order[n_train..n_train + n_valid]),
        test: ds.subset(&order[n_train + n_valid..]),
    })
}
