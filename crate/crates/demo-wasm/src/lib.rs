//! WebAssembly bindings for the demo page. Every export takes plain numbers
//! or strings and returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use multisource_nmt::attention::{gaussian_factor, window_range, window_weights};
use multisource_nmt::combiner::{basic_combine, childsum_combine, BasicCombinerParams, ChildSumCombinerParams};
use multisource_nmt::evaluation::{bleu, tokenize};
use multisource_nmt::numerics::{sigmoid, Parameter, Tensor};
use multisource_nmt::recurrent::LayerState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const DEMO_HIDDEN: usize = 4;

fn error(msg: impl std::fmt::Display) -> Value {
    json!({ "error": msg.to_string() })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

/// Local-p attention over `source_len` random encoder states. The predicted
/// position is `source_len · σ(position_logit)`; `sharpness` scales the
/// bilinear scores.
pub fn attention_window(source_len: usize, window: usize, position_logit: f64, sharpness: f64, seed: u64) -> Value {
    if source_len == 0 || source_len > 200 {
        return error("source length must be between 1 and 200");
    }
    if window == 0 {
        return error("window radius D must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<Tensor> = (0..source_len)
        .map(|_| Tensor::vector(random_vec(&mut rng, DEMO_HIDDEN, 1.0)))
        .collect();
    let query = Tensor::vector(random_vec(&mut rng, DEMO_HIDDEN, 1.0));
    let w_a = match Tensor::new(DEMO_HIDDEN, DEMO_HIDDEN, random_vec(&mut rng, DEMO_HIDDEN * DEMO_HIDDEN, sharpness)) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    let p_t = source_len as f64 * sigmoid(position_logit);
    let trace = match window_weights(&query, &states, p_t, window, &w_a) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    let range = window_range(p_t, window, source_len);
    let positions: Vec<Value> = (0..source_len)
        .map(|s| {
            let inside = range.contains(&s);
            let k = s.wrapping_sub(range.start);
            json!({
                "position": s,
                "in_window": inside,
                "gaussian": gaussian_factor(s, p_t, window),
                "align": if inside { trace.align[k] } else { 0.0 },
                "weight": if inside { trace.weights[k] } else { 0.0 },
            })
        })
        .collect();
    json!({
        "p_t": p_t,
        "sigma": window as f64 / 2.0,
        "window_start": range.start,
        "window_end": range.end,
        "weight_sum": trace.weights.iter().sum::<f64>(),
        "positions": positions,
    })
}

fn state(h: &[f64], c: &[f64]) -> LayerState {
    LayerState {
        h: Tensor::vector(h.to_vec()),
        c: Tensor::vector(c.to_vec()),
    }
}

fn random_param(rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize, scale: f64) -> Parameter {
    let v = random_vec(rng, rows * cols, scale);
    Parameter::new(name, Tensor::new(rows, cols, v).expect("rows × cols values"))
}

/// Combines two encoder final states of width `h1.len()` with randomly drawn
/// Basic and Child-Sum weights, and checks the encoder-swap symmetries.
pub fn combine_states(h1: &[f64], c1: &[f64], h2: &[f64], c2: &[f64], weight_scale: f64, seed: u64) -> Value {
    let d = h1.len();
    if d == 0 || [c1.len(), h2.len(), c2.len()].iter().any(|&n| n != d) {
        return error("h1, c1, h2 and c2 must be non-empty and of equal length");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basic = BasicCombinerParams {
        w_c: random_param(&mut rng, "w_c", d, 2 * d, weight_scale),
    };
    let mut m = |n: &str| random_param(&mut rng, n, d, d, weight_scale);
    let cs = ChildSumCombinerParams {
        w1_i: m("w1_i"),
        w2_i: m("w2_i"),
        w1_f: m("w1_f"),
        w2_f: m("w2_f"),
        w1_o: m("w1_o"),
        w2_o: m("w2_o"),
        w1_u: m("w1_u"),
        w2_u: m("w2_u"),
    };
    let (s1, s2) = (state(h1, c1), state(h2, c2));
    let run = || -> multisource_nmt::Result<Value> {
        let b = basic_combine(&s1, &s2, &basic)?;
        let b_swapped = basic_combine(&s2, &s1, &basic)?;
        let c = childsum_combine(&s1, &s2, &cs)?;
        let c_swapped = childsum_combine(&s2, &s1, &cs.swapped())?;
        Ok(json!({
            "basic": { "h": b.h.as_slice(), "c": b.c.as_slice() },
            "childsum": { "h": c.h.as_slice(), "c": c.c.as_slice() },
            "basic_cell_commutes": b.c == b_swapped.c,
            "childsum_swap_exact": c == c_swapped,
        }))
    };
    run().unwrap_or_else(error)
}

/// Corpus BLEU of newline-separated hypotheses against references.
pub fn bleu_score(hypotheses: &str, references: &str, lowercase: bool) -> Value {
    let hyps: Vec<Vec<String>> = hypotheses.lines().map(|l| tokenize(l, lowercase)).collect();
    let refs: Vec<Vec<String>> = references.lines().map(|l| tokenize(l, lowercase)).collect();
    if hyps.len() != refs.len() {
        return error(format!("{} hypothesis lines but {} reference lines", hyps.len(), refs.len()));
    }
    match bleu(&hyps, &refs) {
        Ok(r) => json!({
            "bleu": r.bleu,
            "precisions": r.precisions,
            "brevity_penalty": r.brevity_penalty,
            "hyp_len": r.hyp_len,
            "ref_len": r.ref_len,
            "line": r.to_string(),
        }),
        Err(e) => error(e),
    }
}

#[wasm_bindgen(js_name = attentionWindow)]
pub fn attention_window_js(source_len: u32, window: u32, position_logit: f64, sharpness: f64, seed: u32) -> String {
    attention_window(source_len as usize, window as usize, position_logit, sharpness, seed as u64).to_string()
}

#[wasm_bindgen(js_name = combineStates)]
pub fn combine_states_js(h1: Vec<f64>, c1: Vec<f64>, h2: Vec<f64>, c2: Vec<f64>, weight_scale: f64, seed: u32) -> String {
    combine_states(&h1, &c1, &h2, &c2, weight_scale, seed as u64).to_string()
}

#[wasm_bindgen(js_name = bleuScore)]
pub fn bleu_score_js(hypotheses: &str, references: &str, lowercase: bool) -> String {
    bleu_score(hypotheses, references, lowercase).to_string()
}
