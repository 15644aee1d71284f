//! Beam and greedy search over a trained model, plus file-level translation
//! with optional attention dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::attention::AttentionTrace;
use crate::data::{encode_line, read_lines, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{NmtError, Result};
use crate::model::{DecoderState, Model};

pub const DEFAULT_BEAM: usize = 8;

/// `2 × longest source + 5`.
pub fn default_max_len(sources: &[&[usize]]) -> usize {
    2 * sources.iter().map(|s| s.len()).max().unwrap_or(0) + 5
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub finished: bool,
    /// Attention traces per emitted token, one entry per encoder.
    pub traces: Vec<Vec<AttentionTrace>>,
}

impl Hypothesis {
    /// Average log-probability per emitted token (`</s>` included).
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the closing `</s>`.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Translation {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub log_prob: f64,
    pub finished: bool,
    pub traces: Vec<Vec<AttentionTrace>>,
}

impl From<Hypothesis> for Translation {
    fn from(h: Hypothesis) -> Self {
        Translation {
            tokens: h.output().to_vec(),
            score: h.score(),
            log_prob: h.log_prob,
            finished: h.finished,
            traces: h.traces,
        }
    }
}

fn emittable(id: usize) -> bool {
    id != PAD && id != BOS && id != UNK
}

/// Best `k` emittable tokens, highest log-probability first, ties to the lower id.
fn top_k(log_probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = log_probs
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, _)| emittable(i))
        .collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c.truncate(k);
    c
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.score() > b.score()
}

/// Length-capped beam search. Sources are reversed ids, as for the encoder.
pub fn beam_decode(model: &Model, sources: &[&[usize]], beam: usize, max_len: usize) -> Result<Translation> {
    if beam == 0 {
        return Err(NmtError::Argument("beam must be at least 1".into()));
    }
    let (enc, init) = model.encode_sources(sources)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
        finished: false,
        traces: Vec::new(),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let out = model.step(&enc, &h.state, prev)?;
            for (tok, lp) in top_k(&out.log_probs, beam) {
                candidates.push((h.log_prob + lp, hi, tok));
            }
            expansions.push(out);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (lp, hi, tok) in candidates {
            let parent = &live[hi];
            let out = &expansions[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut traces = parent.traces.clone();
            if !out.traces.is_empty() {
                traces.push(out.traces.clone());
            }
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                state: out.state.clone(),
                finished: tok == EOS,
                traces,
            };
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let pool = if done.is_empty() { live } else { done };
    let best = pool
        .into_iter()
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .expect("search keeps at least one hypothesis");
    Ok(best.into())
}

/// Argmax decoding.
pub fn greedy_decode(model: &Model, sources: &[&[usize]], max_len: usize) -> Result<Translation> {
    let (enc, mut state) = model.encode_sources(sources)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: state.clone(),
        finished: false,
        traces: Vec::new(),
    };
    for _ in 0..max_len {
        let prev = h.tokens.last().copied().unwrap_or(BOS);
        let out = model.step(&enc, &state, prev)?;
        let (tok, lp) = top_k(&out.log_probs, 1)[0];
        h.tokens.push(tok);
        h.log_prob += lp;
        if !out.traces.is_empty() {
            h.traces.push(out.traces);
        }
        state = out.state;
        if tok == EOS {
            h.finished = true;
            break;
        }
    }
    h.state = state;
    Ok(h.into())
}

#[derive(Clone, Debug)]
pub struct TranslateOptions {
    pub beam: usize,
    /// Fixed cap; `None` uses [`default_max_len`] per sentence.
    pub max_len: Option<usize>,
    pub dump_attention: Option<PathBuf>,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            beam: DEFAULT_BEAM,
            max_len: None,
            dump_attention: None,
        }
    }
}

pub const ATTENTION_HEADER: &str = "sentence\ttarget_pos\tencoder_id\tsource_pos\tweight\talign";

/// Translates line-aligned source files into `output`, one line per input
/// line. Returns the number of lines written.
pub fn translate_file(
    model: &Model,
    src_vocabs: &[&Vocabulary],
    tgt_vocab: &Vocabulary,
    inputs: &[&Path],
    output: &Path,
    opts: &TranslateOptions,
) -> Result<usize> {
    if inputs.len() != model.config.sources() || src_vocabs.len() != inputs.len() {
        return Err(NmtError::Compatibility(format!(
            "model mode {} takes {} source file(s), got {}",
            model.config.mode,
            model.config.sources(),
            inputs.len()
        )));
    }
    let sides: Vec<Vec<String>> = inputs.iter().map(|p| read_lines(p)).collect::<Result<_>>()?;
    if sides.iter().any(|s| s.len() != sides[0].len()) {
        return Err(NmtError::Alignment {
            counts: inputs.iter().zip(&sides).map(|(p, s)| (p.to_path_buf(), s.len())).collect(),
        });
    }
    let mut out = BufWriter::new(File::create(output).map_err(|e| NmtError::io(output, e))?);
    let mut att = match &opts.dump_attention {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| NmtError::io(p, e))?);
            writeln!(w, "{ATTENTION_HEADER}").map_err(|e| NmtError::io(p, e))?;
            Some((w, p.clone()))
        }
        None => None,
    };
    let n = sides.first().map_or(0, Vec::len);
    for i in 0..n {
        let ids: Vec<Vec<usize>> = sides
            .iter()
            .zip(src_vocabs)
            .map(|(s, v)| encode_line(&s[i], v, true))
            .collect();
        let line = if ids.iter().any(Vec::is_empty) {
            String::new()
        } else {
            let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
            let max_len = opts.max_len.unwrap_or_else(|| default_max_len(&refs));
            let t = beam_decode(model, &refs, opts.beam, max_len)?;
            if let Some((w, p)) = att.as_mut() {
                write_traces(w, i, &t.traces).map_err(|e| NmtError::io(&*p, e))?;
            }
            tgt_vocab.decode(&t.tokens).join(" ")
        };
        writeln!(out, "{line}").map_err(|e| NmtError::io(output, e))?;
    }
    out.flush().map_err(|e| NmtError::io(output, e))?;
    if let Some((mut w, p)) = att {
        w.flush().map_err(|e| NmtError::io(&p, e))?;
    }
    Ok(n)
}

fn write_traces<W: Write>(w: &mut W, sentence: usize, traces: &[Vec<AttentionTrace>]) -> std::io::Result<()> {
    for (t, per_encoder) in traces.iter().enumerate() {
        for (k, tr) in per_encoder.iter().enumerate() {
            for (j, s) in tr.window.clone().enumerate() {
                writeln!(
                    w,
                    "{sentence}\t{t}\t{}\t{s}\t{}\t{}",
                    k + 1,
                    tr.weights[j],
                    tr.align[j]
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ModelConfig, ModelMode};

    fn model(mode: ModelMode, att: AttentionMode, vocab: usize) -> Model {
        let cfg = ModelConfig {
            mode,
            attention: att,
            layers: 2,
            hidden: 6,
            src_vocab: vec![10; mode.sources()],
            tgt_vocab: vocab,
            window: 3,
            dropout: 0.0,
        };
        Model::new(cfg, 11, 0.5).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        for mode in ModelMode::ALL {
            for att in [AttentionMode::None, AttentionMode::LocalP] {
                let m = model(mode, att, 12);
                let s1 = [5usize, 6, 7];
                let s2 = [8usize, 4];
                let srcs: Vec<&[usize]> = if mode.sources() == 2 { vec![&s1, &s2] } else { vec![&s1] };
                let b = beam_decode(&m, &srcs, 1, 10).unwrap();
                let g = greedy_decode(&m, &srcs, 10).unwrap();
                assert_eq!(b.tokens, g.tokens);
                assert_eq!(b.log_prob, g.log_prob);
            }
        }
    }

    #[test]
    fn only_end_symbol_is_emittable() {
        let m = model(ModelMode::Single, AttentionMode::LocalP, 4);
        let t = beam_decode(&m, &[&[5, 6]], 4, 10).unwrap();
        assert!(t.tokens.is_empty());
        assert!(t.finished);
        assert_eq!(t.traces.len(), 1);
    }

    #[test]
    fn length_cap_and_fallback() {
        let mut m = model(ModelMode::Single, AttentionMode::None, 12);
        // make </s> nearly impossible so every hypothesis hits the cap
        m.params.softmax_b.value.set(0, EOS, -1e3);
        let t = beam_decode(&m, &[&[5, 6]], 3, 4).unwrap();
        assert!(!t.finished);
        assert_eq!(t.tokens.len(), 4);
        for beam in 1..5 {
            for cap in 0..6 {
                let t = beam_decode(&m, &[&[5]], beam, cap).unwrap();
                assert!(t.tokens.len() <= cap);
            }
        }
    }

    #[test]
    fn missing_second_source_is_rejected() {
        let m = model(ModelMode::MultiBasic, AttentionMode::None, 12);
        assert!(matches!(beam_decode(&m, &[&[5]], 2, 5), Err(NmtError::Argument(_))));
        assert!(beam_decode(&m, &[&[5], &[6]], 0, 5).is_err());
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = model(ModelMode::MultiChildSum, AttentionMode::LocalP, 12);
        let a = beam_decode(&m, &[&[5, 6, 7], &[4]], 4, 12).unwrap();
        let b = beam_decode(&m, &[&[5, 6, 7], &[4]], 4, 12).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn never_emits_reserved_non_final_symbols() {
        let mut m = model(ModelMode::Single, AttentionMode::None, 12);
        for id in [PAD, BOS, UNK] {
            m.params.softmax_b.value.set(0, id, 50.0);
        }
        let t = beam_decode(&m, &[&[5, 6]], 3, 8).unwrap();
        assert!(t.tokens.iter().all(|&x| emittable(x) && x != EOS));
    }
}
