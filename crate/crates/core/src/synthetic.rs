//! Built-in synthetic sentiment-like task.
//!
//! Sentences mix positive, negative and neutral words; a `not` flips the
//! polarity of the word after it. The label is 1 when the signed polarity
//! sum is positive. Sums of zero are never generated. The augmented split
//! holds unlabeled token-level perturbations of training sentences.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_tsv, MetricKind, RawRow, TaskData, TaskFiles, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_aug_per_train: usize,
    pub n_dev: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub polar_words: usize,
    pub neutral_words: usize,
    /// Probability that a word is `not`.
    pub negation_rate: f64,
    /// Probability of flipping a training label.
    pub label_noise: f64,
    pub metric: MetricKind,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_aug_per_train: 4,
            n_dev: 400,
            min_words: 4,
            max_words: 10,
            polar_words: 6,
            neutral_words: 16,
            negation_rate: 0.05,
            label_noise: 0.05,
            metric: MetricKind::Accuracy,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Length of the longest encoded sentence (`[CLS]` and `[SEP]` included).
    pub fn max_len(&self) -> usize {
        self.max_words + 2
    }

    fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words || self.polar_words == 0 {
            return Err(Error::config("synthetic task needs 1 ≤ min_words ≤ max_words and polar words"));
        }
        if !(0.0..1.0).contains(&self.negation_rate) {
            return Err(Error::config("negation_rate must be in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config("label_noise must be in [0, 0.5)"));
        }
        Ok(())
    }
}

struct Lexicon {
    negation_rate: f64,
    positive: Vec<String>,
    negative: Vec<String>,
    neutral: Vec<String>,
}

impl Lexicon {
    fn new(c: &SyntheticConfig) -> Self {
        let make = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect();
        Self {
            negation_rate: c.negation_rate,
            positive: make("pos", c.polar_words),
            negative: make("neg", c.polar_words),
            neutral: make("w", c.neutral_words),
        }
    }

    fn polarity(&self, w: &str) -> i32 {
        if w.starts_with("pos") {
            1
        } else if w.starts_with("neg") {
            -1
        } else {
            0
        }
    }

    fn random_word(&self, rng: &mut impl Rng) -> String {
        if rng.gen_bool(self.negation_rate) {
            return "not".to_string();
        }
        let r: f64 = rng.gen();
        let pool = if r < 0.3 || (self.neutral.is_empty() && r < 0.5) {
            &self.positive
        } else if r < 0.6 || self.neutral.is_empty() {
            &self.negative
        } else {
            &self.neutral
        };
        pool.choose(rng).expect("nonempty").clone()
    }

    fn score(&self, words: &[String]) -> i32 {
        let mut total = 0;
        let mut negate = false;
        for w in words {
            if w == "not" {
                negate = true;
                continue;
            }
            let p = self.polarity(w);
            total += if negate { -p } else { p };
            negate = false;
        }
        total
    }

    fn sentence(&self, c: &SyntheticConfig, rng: &mut impl Rng) -> (Vec<String>, usize) {
        loop {
            let n = rng.gen_range(c.min_words..=c.max_words);
            let words: Vec<String> = (0..n).map(|_| self.random_word(rng)).collect();
            let s = self.score(&words);
            if s != 0 {
                return (words, usize::from(s > 0));
            }
        }
    }
}

/// Ground-truth label of a sentence under the task's rule, or `None` on a tie.
pub fn true_label(c: &SyntheticConfig, text: &str) -> Option<usize> {
    let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    match Lexicon::new(c).score(&words) {
        0 => None,
        s => Some(usize::from(s > 0)),
    }
}

/// Train, augmented and dev rows.
pub fn generate(c: &SyntheticConfig) -> Result<(Vec<RawRow>, Vec<RawRow>, Vec<RawRow>)> {
    c.validate()?;
    let lex = Lexicon::new(c);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let row = |words: &[String], label| RawRow {
        text: words.join(" "),
        text_b: None,
        label,
    };
    let mut train_words = Vec::with_capacity(c.n_train);
    let mut train = Vec::with_capacity(c.n_train);
    for _ in 0..c.n_train {
        let (w, mut label) = lex.sentence(c, &mut rng);
        if rng.gen_bool(c.label_noise) {
            label = 1 - label;
        }
        train.push(row(&w, Some(label)));
        train_words.push(w);
    }
    let mut aug = Vec::with_capacity(c.n_train * c.n_aug_per_train);
    for w in &train_words {
        for _ in 0..c.n_aug_per_train {
            let mut out: Vec<String> = Vec::with_capacity(w.len());
            for word in w {
                let r: f64 = rng.gen();
                if r < 0.1 && w.len() > 1 {
                    continue;
                } else if r < 0.3 {
                    out.push(lex.random_word(&mut rng));
                } else {
                    out.push(word.clone());
                }
            }
            if out.is_empty() {
                out.push(lex.random_word(&mut rng));
            }
            out.truncate(c.max_words);
            aug.push(row(&out, None));
        }
    }
    let dev = (0..c.n_dev)
        .map(|_| {
            let (w, label) = lex.sentence(c, &mut rng);
            row(&w, Some(label))
        })
        .collect();
    Ok((train, aug, dev))
}

pub fn task_spec(c: &SyntheticConfig) -> TaskSpec {
    TaskSpec {
        n_classes: 2,
        metric: c.metric,
        max_len: c.max_len(),
        lowercase: false,
    }
}

/// Generates and encodes the task in memory.
pub fn synthetic_task(c: &SyntheticConfig) -> Result<TaskData> {
    let (train, aug, dev) = generate(c)?;
    TaskData::from_rows(task_spec(c), None, &train, &aug, &dev)
}

/// Writes `task.json`, `vocab.json` and the three TSV splits to `dir`.
pub fn write_task_dir(c: &SyntheticConfig, dir: &Path) -> Result<TaskData> {
    let (train, aug, dev) = generate(c)?;
    let data = TaskData::from_rows(task_spec(c), None, &train, &aug, &dev)?;
    std::fs::create_dir_all(dir)?;
    let f = TaskFiles::in_dir(dir);
    std::fs::write(&f.task, serde_json::to_vec_pretty(&data.spec)?)?;
    data.vocab.save(&f.vocab)?;
    write_tsv(&f.train, &train)?;
    write_tsv(&f.augmented, &aug)?;
    write_tsv(&f.dev, &dev)?;
    Ok(data)
}
