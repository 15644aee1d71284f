//! Corpus ingestion, vocabularies, and padded minibatches.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{NmtError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_MAX_LEN: usize = 50;

const VOCAB_HEADER: &str =
    "# ids 0-3 are reserved (<pad> <s> </s> <unk>) and not listed; the token on line k after this header has id k+3";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size − 4` most frequent whitespace tokens; ties go to
    /// the lexicographically smaller token.
    pub fn build<I, S>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size <= RESERVED.len() {
            return Err(NmtError::Argument(format!(
                "vocabulary size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any_line = false;
        for line in lines {
            any_line = true;
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
        if !any_line || counts.is_empty() {
            return Err(NmtError::Argument("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// A vocabulary whose non-reserved tokens get ids 4, 5, … in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect()
    }

    /// Hex SHA-256 over the token list, used to tie checkpoints to vocabularies.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| NmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with('#') => {}
            _ => {
                return Err(NmtError::Argument(format!(
                    "{}: missing vocabulary header line",
                    path.display()
                )))
            }
        }
        Ok(Self::from_tokens(lines.map(str::to_owned)))
    }
}

/// Whitespace tokens to ids; unknown tokens become `<unk>`. Sources are
/// reversed before encoding, targets are not. No `<s>`/`</s>` is added.
pub fn encode_line(line: &str, vocab: &Vocabulary, reverse: bool) -> Vec<usize> {
    let mut ids: Vec<usize> = line.split_whitespace().map(|t| vocab.id(t)).collect();
    if reverse {
        ids.reverse();
    }
    ids
}

/// Line-aligned text from two or three files (`src1 [src2] tgt`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    /// One entry per kept line; each holds the raw text of every side.
    pub tuples: Vec<Vec<String>>,
    pub dropped: usize,
}

impl ParallelCorpus {
    pub fn side(&self, k: usize) -> impl Iterator<Item = &str> {
        self.tuples.iter().map(move |t| t[k].as_str())
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| NmtError::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Drops tuples with any empty side or any side longer than `max_len` tokens.
pub fn load_parallel(paths: &[&Path], max_len: usize) -> Result<ParallelCorpus> {
    if !(2..=3).contains(&paths.len()) {
        return Err(NmtError::Argument(format!(
            "expected 2 or 3 aligned files, got {}",
            paths.len()
        )));
    }
    let sides: Vec<Vec<String>> = paths.iter().map(|p| read_lines(p)).collect::<Result<_>>()?;
    let counts: Vec<(PathBuf, usize)> = paths
        .iter()
        .zip(&sides)
        .map(|(p, s)| (p.to_path_buf(), s.len()))
        .collect();
    if counts.iter().any(|(_, n)| *n != counts[0].1) {
        return Err(NmtError::Alignment { counts });
    }
    let mut tuples = Vec::new();
    let mut dropped = 0;
    for i in 0..sides[0].len() {
        let keep = sides.iter().all(|s| {
            let n = s[i].split_whitespace().count();
            n > 0 && n <= max_len
        });
        if keep {
            tuples.push(sides.iter().map(|s| s[i].clone()).collect());
        } else {
            dropped += 1;
        }
    }
    Ok(ParallelCorpus { tuples, dropped })
}

/// One aligned training triple (or pair) as ids. Sources are stored reversed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src1: Vec<usize>,
    pub src2: Option<Vec<usize>>,
    pub tgt: Vec<usize>,
}

impl Example {
    pub fn new(src1: Vec<usize>, src2: Option<Vec<usize>>, tgt: Vec<usize>) -> Self {
        Example { src1, src2, tgt }
    }
}

/// Encodes a parallel corpus whose last side is the target.
pub fn encode_corpus(corpus: &ParallelCorpus, src_vocabs: &[&Vocabulary], tgt_vocab: &Vocabulary) -> Vec<Example> {
    let ns = src_vocabs.len();
    corpus
        .tuples
        .iter()
        .map(|t| Example {
            src1: encode_line(&t[0], src_vocabs[0], true),
            src2: (ns > 1).then(|| encode_line(&t[1], src_vocabs[1], true)),
            tgt: encode_line(&t[ns], tgt_vocab, false),
        })
        .collect()
}

/// `B × T_max` ids with an exact non-pad mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSeq {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl PaddedSeq {
    pub fn from_rows(rows: &[&[usize]]) -> Self {
        Self::padded_to(rows, rows.iter().map(|r| r.len()).max().unwrap_or(0))
    }

    pub fn padded_to(rows: &[&[usize]], width: usize) -> Self {
        let width = width.max(rows.iter().map(|r| r.len()).max().unwrap_or(0));
        let mut ids = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for r in rows {
            let mut row = r.to_vec();
            row.resize(width, PAD);
            ids.push(row);
            mask.push((0..width).map(|j| j < r.len()).collect());
        }
        PaddedSeq {
            ids,
            mask,
            lengths: rows.iter().map(|r| r.len()).collect(),
        }
    }

    /// Unpadded ids of row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lengths[i]]
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, |r| r.len())
    }

    pub fn pad_count(&self) -> usize {
        self.mask.iter().flatten().filter(|m| !**m).count()
    }

    pub fn is_consistent(&self) -> bool {
        let w = self.width();
        self.ids.len() == self.mask.len()
            && self.ids.len() == self.lengths.len()
            && self.ids.iter().zip(&self.mask).zip(&self.lengths).all(|((ids, m), &n)| {
                ids.len() == w
                    && m.len() == w
                    && m.iter().enumerate().all(|(j, &b)| b == (j < n))
                    && ids[n..].iter().all(|&t| t == PAD)
            })
    }
}

/// Every row is one complete aligned example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src1: PaddedSeq,
    pub src2: Option<PaddedSeq>,
    pub tgt: PaddedSeq,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let s1: Vec<&[usize]> = examples.iter().map(|e| e.src1.as_slice()).collect();
        let tgt: Vec<&[usize]> = examples.iter().map(|e| e.tgt.as_slice()).collect();
        let src2 = examples
            .iter()
            .map(|e| e.src2.as_deref())
            .collect::<Option<Vec<&[usize]>>>()
            .map(|rows| PaddedSeq::from_rows(&rows));
        Batch {
            src1: PaddedSeq::from_rows(&s1),
            src2,
            tgt: PaddedSeq::from_rows(&tgt),
        }
    }

    pub fn len(&self) -> usize {
        self.tgt.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> Example {
        Example {
            src1: self.src1.row(i).to_vec(),
            src2: self.src2.as_ref().map(|s| s.row(i).to_vec()),
            tgt: self.tgt.row(i).to_vec(),
        }
    }

    /// Same rows with `extra` additional pad columns on every side.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let widen = |p: &PaddedSeq| {
            let rows: Vec<&[usize]> = (0..p.lengths.len()).map(|i| p.row(i)).collect();
            PaddedSeq::padded_to(&rows, p.width() + extra)
        };
        Batch {
            src1: widen(&self.src1),
            src2: self.src2.as_ref().map(widen),
            tgt: widen(&self.tgt),
        }
    }
}

/// Length-bucketed minibatches: a seeded shuffle, a stable sort by target
/// length, consecutive chunks of `batch_size`, then a seeded shuffle of the
/// chunk order.
pub fn batchify(examples: &[Example], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(NmtError::Argument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| examples[i].tgt.len());
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}
