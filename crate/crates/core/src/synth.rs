//! Synthetic aligned corpora for desk-scale experiments.
//!
//! `copy`: the target repeats the source. `triangulate`: every first-source
//! word has a position-aligned word in the second source and the target;
//! some first-source words are ambiguous between two target words and only
//! the second source says which one is meant.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NmtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Triangulate,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Triangulate => "triangulate",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(Task::Copy),
            "triangulate" => Ok(Task::Triangulate),
            _ => Err(format!("unknown task `{s}` (copy | triangulate)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: Task,
    /// Copy: number of word types.
    pub vocab: usize,
    /// Triangulate: words with a single translation.
    pub plain_words: usize,
    /// Triangulate: words with two translations.
    pub ambiguous_words: usize,
    /// Triangulate: chance that a position holds an ambiguous word.
    pub ambiguous_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthConfig {
    pub fn copy(vocab: usize) -> Self {
        SynthConfig {
            task: Task::Copy,
            vocab,
            plain_words: 0,
            ambiguous_words: 0,
            ambiguous_rate: 0.0,
            min_len: 3,
            max_len: 10,
        }
    }

    pub fn triangulate() -> Self {
        SynthConfig {
            task: Task::Triangulate,
            vocab: 0,
            plain_words: 20,
            ambiguous_words: 6,
            ambiguous_rate: 0.35,
            min_len: 3,
            max_len: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(NmtError::Argument(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        let ok = match self.task {
            Task::Copy => self.vocab >= 1,
            Task::Triangulate => {
                self.plain_words + self.ambiguous_words >= 1 && (0.0..=1.0).contains(&self.ambiguous_rate)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NmtError::Argument(format!("invalid synthetic config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCorpus {
    pub src1: Vec<String>,
    pub src2: Option<Vec<String>>,
    pub tgt: Vec<String>,
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.tgt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt.is_empty()
    }

    /// Writes `{stem}.src1`, `{stem}.src2` (triangulate only) and `{stem}.tgt`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NmtError::io(dir, e))?;
        let mut sides = vec![("src1", &self.src1)];
        if let Some(s2) = &self.src2 {
            sides.push(("src2", s2));
        }
        sides.push(("tgt", &self.tgt));
        for (ext, lines) in sides {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut text = lines.join("\n");
            if !lines.is_empty() {
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| NmtError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn is_ambiguous(src1_token: &str) -> bool {
    src1_token.starts_with("fa")
}

pub fn generate(cfg: &SynthConfig, lines: usize, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src1 = Vec::with_capacity(lines);
    let mut src2 = Vec::with_capacity(lines);
    let mut tgt = Vec::with_capacity(lines);
    for _ in 0..lines {
        let n = rng.gen_range(cfg.min_len..=cfg.max_len);
        match cfg.task {
            Task::Copy => {
                let words: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..cfg.vocab))).collect();
                let line = words.join(" ");
                src1.push(line.clone());
                tgt.push(line);
            }
            Task::Triangulate => {
                let (mut f, mut g, mut e) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..n {
                    let ambiguous = cfg.ambiguous_words > 0
                        && (cfg.plain_words == 0 || rng.gen_bool(cfg.ambiguous_rate));
                    if ambiguous {
                        let j = rng.gen_range(0..cfg.ambiguous_words);
                        let b = rng.gen_range(0..2);
                        f.push(format!("fa{j}"));
                        g.push(format!("ga{j}x{b}"));
                        e.push(format!("ea{j}x{b}"));
                    } else {
                        let k = rng.gen_range(0..cfg.plain_words);
                        f.push(format!("f{k}"));
                        g.push(format!("g{k}"));
                        e.push(format!("e{k}"));
                    }
                }
                src1.push(f.join(" "));
                src2.push(g.join(" "));
                tgt.push(e.join(" "));
            }
        }
    }
    Ok(SynthCorpus {
        src1,
        src2: (cfg.task == Task::Triangulate).then_some(src2),
        tgt,
    })
}

/// Share of target positions aligned to ambiguous first-source words that the
/// hypothesis reproduces, as `(correct, total)`.
pub fn ambiguous_accuracy(src1: &[String], hyps: &[String], refs: &[String]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for ((s, h), r) in src1.iter().zip(hyps).zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        for (i, (sw, rw)) in s.split_whitespace().zip(r.split_whitespace()).enumerate() {
            if is_ambiguous(sw) {
                total += 1;
                if h.get(i) == Some(&rw) {
                    correct += 1;
                }
            }
        }
    }
    (correct, total)
}
