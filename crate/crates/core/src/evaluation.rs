//! Corpus BLEU with single references, scored the way `multi-bleu.perl` does.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::data::read_lines;
use crate::error::{NmtError, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified precisions for n = 1..=4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        self.hyp_len as f64 / self.ref_len as f64
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|x| 100.0 * x);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram total, summed over segments.
pub fn modified_precision<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], n: usize) -> Result<(usize, usize)> {
    if hyps.len() != refs.len() {
        return Err(NmtError::Argument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(NmtError::Argument(format!("n-gram order must be 1..=4, got {n}")));
    }
    let mut matches = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let rc = ngram_counts(r, n);
        for (gram, c) in ngram_counts(h, n) {
            matches += c.min(rc.get(&gram).copied().unwrap_or(0));
            total += c;
        }
    }
    Ok((matches, total))
}

pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(NmtError::Argument("cannot score an empty corpus".into()));
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        (matches[n - 1], totals[n - 1]) = modified_precision(hyps, refs, n)?;
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Err(NmtError::Argument("every hypothesis is empty".into()));
    }
    let precisions = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if matches.contains(&0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p: &f64| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Whitespace-tokenised corpus BLEU of two line-aligned files.
pub fn score_files(hyp: &Path, reference: &Path, lowercase: bool) -> Result<BleuReport> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(NmtError::Alignment {
            counts: vec![(hyp.to_path_buf(), h.len()), (reference.to_path_buf(), r.len())],
        });
    }
    let ht: Vec<Vec<String>> = h.iter().map(|l| tokenize(l, lowercase)).collect();
    let rt: Vec<Vec<String>> = r.iter().map(|l| tokenize(l, lowercase)).collect();
    bleu(&ht, &rt)
}
