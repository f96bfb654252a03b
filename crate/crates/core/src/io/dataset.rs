//! TSV datasets, encoded examples and seeded batching.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricKind;
use super::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::model::Batch;

/// One TSV row; `label` is `None` for augmented rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRow {
    pub text: String,
    pub text_b: Option<String>,
    pub label: Option<usize>,
}

/// Reads a TSV file with a `text[\ttext_b]\tlabel` header.
pub fn read_tsv(path: &Path) -> Result<Vec<RawRow>> {
    let content = std::fs::read_to_string(path)?;
    parse_tsv(&content).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

pub fn parse_tsv(content: &str) -> Result<Vec<RawRow>> {
    let mut lines = content.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::input("missing header line"))?.split('\t').collect();
    let pair = match header.as_slice() {
        ["text", "label"] => false,
        ["text", "text_b", "label"] => true,
        _ => return Err(Error::input(format!("unsupported header {header:?}"))),
    };
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != header.len() {
            return Err(Error::input(format!(
                "line {}: {} columns, header has {}",
                n + 2,
                cols.len(),
                header.len()
            )));
        }
        let label_col = cols[cols.len() - 1].trim();
        let label = if label_col.is_empty() {
            None
        } else {
            Some(
                label_col
                    .parse()
                    .map_err(|_| Error::input(format!("line {}: bad label {label_col:?}", n + 2)))?,
            )
        };
        rows.push(RawRow {
            text: cols[0].to_string(),
            text_b: pair.then(|| cols[1].to_string()),
            label,
        });
    }
    Ok(rows)
}

pub fn write_tsv(path: &Path, rows: &[RawRow]) -> Result<()> {
    let pair = rows.iter().any(|r| r.text_b.is_some());
    let mut out = String::from(if pair { "text\ttext_b\tlabel\n" } else { "text\tlabel\n" });
    for r in rows {
        if r.text.contains(['\t', '\n']) || r.text_b.as_deref().is_some_and(|t| t.contains(['\t', '\n'])) {
            return Err(Error::input("text fields may not contain tabs or newlines"));
        }
        out.push_str(&r.text);
        if pair {
            out.push('\t');
            out.push_str(r.text_b.as_deref().unwrap_or(""));
        }
        out.push('\t');
        if let Some(l) = r.label {
            write!(out, "{l}").expect("write to string");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// An encoded example: real token ids only (no padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn encode(rows: &[RawRow], vocab: &Vocab, max_len: usize, n_classes: usize) -> Result<Self> {
        let mut examples = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if let Some(l) = r.label {
                if l >= n_classes {
                    return Err(Error::input(format!("row {i}: label {l} outside 0..{n_classes}")));
                }
            }
            let enc = vocab.encode(&r.text, r.text_b.as_deref(), max_len);
            examples.push(Example {
                ids: enc.real_ids(),
                label: r.label,
            });
        }
        Ok(Self { examples, n_classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labeled(&self) -> Self {
        Self {
            examples: self.examples.iter().filter(|e| e.label.is_some()).cloned().collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self {
            examples: self.examples.iter().chain(&other.examples).cloned().collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Example indices for each batch of `epoch`; the order depends only on
    /// `seed` and `epoch`.
    pub fn epoch_order(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Consecutive, unshuffled batches.
    pub fn sequential(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Batch, Vec<Option<usize>>)> {
        let seqs: Vec<&[usize]> = indices.iter().map(|&i| self.examples[i].ids.as_slice()).collect();
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((Batch::from_sequences(&seqs)?, labels))
    }
}

/// Per-task settings stored next to the data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub metric: MetricKind,
    pub max_len: usize,
    #[serde(default)]
    pub lowercase: bool,
}

/// Train / augmented / dev splits of one task, encoded with one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub vocab: Vocab,
    pub train: Dataset,
    /// Extra rows (mostly unlabeled) used by distillation stages.
    pub augmented: Dataset,
    pub dev: Dataset,
}

pub struct TaskFiles {
    pub task: PathBuf,
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub augmented: PathBuf,
    pub dev: PathBuf,
}

impl TaskFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            task: dir.join("task.json"),
            vocab: dir.join("vocab.json"),
            train: dir.join("train.tsv"),
            augmented: dir.join("aug.tsv"),
            dev: dir.join("dev.tsv"),
        }
    }
}

impl TaskData {
    /// Builds the vocabulary from train and augmented text when none is given.
    pub fn from_rows(spec: TaskSpec, vocab: Option<Vocab>, train: &[RawRow], aug: &[RawRow], dev: &[RawRow]) -> Result<Self> {
        let vocab = vocab.unwrap_or_else(|| {
            let texts = train
                .iter()
                .chain(aug)
                .flat_map(|r| std::iter::once(r.text.as_str()).chain(r.text_b.as_deref()));
            Vocab::build(texts, spec.lowercase, 1)
        });
        let enc = |rows: &[RawRow]| Dataset::encode(rows, &vocab, spec.max_len, spec.n_classes);
        Ok(Self {
            train: enc(train)?,
            augmented: enc(aug)?,
            dev: enc(dev)?,
            spec,
            vocab,
        })
    }

    /// Loads `task.json`, `train.tsv`, `dev.tsv` and the optional `aug.tsv`
    /// and `vocab.json` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let f = TaskFiles::in_dir(dir);
        let spec: TaskSpec = serde_json::from_slice(&std::fs::read(&f.task)?)?;
        let vocab = if f.vocab.exists() { Some(Vocab::load(&f.vocab)?) } else { None };
        let aug = if f.augmented.exists() { read_tsv(&f.augmented)? } else { Vec::new() };
        Self::from_rows(spec, vocab, &read_tsv(&f.train)?, &aug, &read_tsv(&f.dev)?)
    }

    /// Train rows followed by augmented rows.
    pub fn distillation_set(&self) -> Dataset {
        self.train.concat(&self.augmented)
    }
}
