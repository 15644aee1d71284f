//! Local-p attention with predictive positioning, for one or two encoders.
//!
//! For each encoder a position `p_t = S·σ(v_pᵀ tanh(W_p h_t))` is predicted,
//! a window of integer positions `⌊p_t⌋ ± D` (clipped to the sentence) is
//! scored bilinearly with `h_tᵀ W_a h_s`, softmax-normalised over the window,
//! and damped by a Gaussian centred on the real-valued `p_t` with
//! `σ = D / 2`. The resulting contexts are concatenated with `h_t` and
//! squashed: `h̃_t = tanh(W_c [h_t; c¹; c²])`.
//!
//! `p_t` receives gradient through the Gaussian factor. Window membership is
//! a step function of `p_t` and contributes no gradient.

use std::ops::Range;

use crate::error::{NmtError, Result};
use crate::numerics::{
    axpy, dot, gemv_acc, gemv_t_acc, outer_acc, sigmoid, softmax_backward_slice, softmax_slice,
    Parameter, Tensor,
};

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d × d`
    pub w_p: Parameter,
    /// `1 × d`
    pub v_p: Parameter,
    /// `d × d`
    pub w_a: Parameter,
}

impl AttentionParams {
    pub fn zeros(prefix: &str, hidden: usize) -> Self {
        AttentionParams {
            w_p: Parameter::zeros(format!("{prefix}.w_p"), hidden, hidden),
            v_p: Parameter::zeros(format!("{prefix}.v_p"), 1, hidden),
            w_a: Parameter::zeros(format!("{prefix}.w_a"), hidden, hidden),
        }
    }

    pub fn parameters(&self) -> [&Parameter; 3] {
        [&self.w_p, &self.v_p, &self.w_a]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.w_p, &mut self.v_p, &mut self.w_a]
    }

    fn hidden_size(&self) -> usize {
        self.w_a.value.rows()
    }
}

/// `W_c` of the attentional layer: `d × 2d` for one source, `d × 3d` for two.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputProjection {
    pub w_c: Parameter,
}

impl OutputProjection {
    pub fn zeros(prefix: &str, hidden: usize, sources: usize) -> Self {
        OutputProjection {
            w_c: Parameter::zeros(format!("{prefix}.w_c"), hidden, (sources + 1) * hidden),
        }
    }

    pub fn sources(&self) -> usize {
        self.w_c.value.cols() / self.w_c.value.rows() - 1
    }
}

/// What one encoder's attention did at one decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub p_t: f64,
    /// Window radius `D`.
    pub radius: usize,
    /// Source positions (original order) inside the window.
    pub window: Range<usize>,
    /// Softmax of the bilinear scores over the window.
    pub align: Vec<f64>,
    /// `a_t(s)` = align × Gaussian factor, per window position.
    pub weights: Vec<f64>,
    pub context: Tensor,
}

pub fn check_window(window: usize) -> Result<()> {
    if window == 0 {
        return Err(NmtError::Argument(
            "attention window radius D must be at least 1 (sigma = D/2)".into(),
        ));
    }
    Ok(())
}

struct PositionCache {
    tanh_p: Vec<f64>,
    sig: f64,
}

fn position_forward(h_t: &[f64], params: &AttentionParams, source_len: usize) -> Result<(f64, PositionCache)> {
    let d = params.hidden_size();
    if h_t.len() != d {
        return Err(NmtError::dim("predict_position", (1, h_t.len()), (1, d)));
    }
    if source_len == 0 {
        return Err(NmtError::Argument("source length must be at least 1".into()));
    }
    let mut tanh_p = vec![0.0; d];
    gemv_acc(&params.w_p.value, h_t, &mut tanh_p);
    tanh_p.iter_mut().for_each(|v| *v = v.tanh());
    let sig = sigmoid(dot(params.v_p.value.as_slice(), &tanh_p));
    Ok((source_len as f64 * sig, PositionCache { tanh_p, sig }))
}

pub fn predict_position(h_t: &Tensor, params: &AttentionParams, source_len: usize) -> Result<f64> {
    position_forward(h_t.as_slice(), params, source_len).map(|(p, _)| p)
}

/// Integer window `[⌊p⌋ − D, ⌊p⌋ + D] ∩ [0, S − 1]`.
pub fn window_range(p_t: f64, window: usize, source_len: usize) -> Range<usize> {
    let centre = (p_t.floor().max(0.0) as usize).min(source_len.saturating_sub(1));
    centre.saturating_sub(window)..(centre + window + 1).min(source_len)
}

pub fn gaussian_factor(s: usize, p_t: f64, window: usize) -> f64 {
    let sigma = window as f64 / 2.0;
    let diff = s as f64 - p_t;
    (-diff * diff / (2.0 * sigma * sigma)).exp()
}

struct WindowCache {
    /// `W_aᵀ h_t`, so that `score(s) = ⟨u, h_s⟩`.
    u: Vec<f64>,
    gauss: Vec<f64>,
}

fn window_forward(
    h_t: &[f64],
    top_seq: &[Tensor],
    p_t: f64,
    window: usize,
    w_a: &Tensor,
) -> Result<(AttentionTrace, WindowCache)> {
    check_window(window)?;
    if top_seq.is_empty() {
        return Err(NmtError::Argument("attention over an empty source".into()));
    }
    let d = w_a.rows();
    if h_t.len() != d {
        return Err(NmtError::dim("window_weights", (1, h_t.len()), w_a.shape()));
    }
    let range = window_range(p_t, window, top_seq.len());
    let mut u = vec![0.0; d];
    gemv_t_acc(w_a, h_t, &mut u);
    let scores: Vec<f64> = range.clone().map(|s| dot(&u, top_seq[s].as_slice())).collect();
    let align = softmax_slice(&scores);
    let gauss: Vec<f64> = range.clone().map(|s| gaussian_factor(s, p_t, window)).collect();
    let weights: Vec<f64> = align.iter().zip(&gauss).map(|(a, g)| a * g).collect();
    let mut context = vec![0.0; d];
    for (s, w) in range.clone().zip(&weights) {
        axpy(*w, top_seq[s].as_slice(), &mut context);
    }
    let trace = AttentionTrace {
        p_t,
        radius: window,
        window: range,
        align,
        weights,
        context: Tensor::vector(context),
    };
    Ok((trace, WindowCache { u, gauss }))
}

pub fn window_weights(
    h_t: &Tensor,
    top_seq: &[Tensor],
    p_t: f64,
    window: usize,
    w_a: &Tensor,
) -> Result<AttentionTrace> {
    window_forward(h_t.as_slice(), top_seq, p_t, window, w_a).map(|(t, _)| t)
}

/// `Σ_s a_t(s)·h_s` over the trace's window.
pub fn context_vector(trace: &AttentionTrace, top_seq: &[Tensor]) -> Result<Tensor> {
    if trace.window.end > top_seq.len() {
        return Err(NmtError::Argument(format!(
            "window {:?} exceeds source length {}",
            trace.window,
            top_seq.len()
        )));
    }
    let d = top_seq.first().map_or(0, |t| t.len());
    let mut c = vec![0.0; d];
    for (s, w) in trace.window.clone().zip(&trace.weights) {
        axpy(*w, top_seq[s].as_slice(), &mut c);
    }
    Ok(Tensor::vector(c))
}

fn projection_input(h_t: &[f64], contexts: &[&[f64]], proj: &OutputProjection) -> Result<Vec<f64>> {
    let d = proj.w_c.value.rows();
    let want = proj.w_c.value.cols();
    let mut x = h_t.to_vec();
    for c in contexts {
        x.extend_from_slice(c);
    }
    if x.len() != want || h_t.len() != d || contexts.iter().any(|c| c.len() != d) {
        return Err(NmtError::dim("attentional_hidden", (1, x.len()), proj.w_c.value.shape()));
    }
    Ok(x)
}

pub fn attentional_hidden(h_t: &Tensor, contexts: &[&Tensor], proj: &OutputProjection) -> Result<Tensor> {
    let cs: Vec<&[f64]> = contexts.iter().map(|c| c.as_slice()).collect();
    let x = projection_input(h_t.as_slice(), &cs, proj)?;
    let out = project(&proj.w_c.value, &x);
    Ok(Tensor::vector(out))
}

/// `tanh(W_c x)` where each row is reduced block by block (`h_t`, then each
/// context), so an all-zero trailing block leaves the result bit-identical.
fn project(w_c: &Tensor, x: &[f64]) -> Vec<f64> {
    let d = w_c.rows();
    (0..d)
        .map(|r| {
            let row = w_c.row(r);
            row.chunks(d)
                .zip(x.chunks(d))
                .map(|(w, v)| dot(w, v))
                .fold(0.0, |acc, v| acc + v)
                .tanh()
        })
        .collect()
}

/// Everything needed to backpropagate one decoder step's attention.
pub struct AttendCache {
    h_t: Vec<f64>,
    sources: Vec<(PositionCache, WindowCache, AttentionTrace, usize)>,
    proj_input: Vec<f64>,
    h_tilde: Vec<f64>,
}

impl AttendCache {
    pub fn traces(&self) -> impl Iterator<Item = &AttentionTrace> {
        self.sources.iter().map(|(_, _, t, _)| t)
    }
}

/// Attends over each `(top_seq, params)` pair independently and projects
/// `[h_t; c¹; …]` into the attentional hidden state.
pub fn attend_forward(
    h_t: &[f64],
    encoders: &[(&[Tensor], &AttentionParams)],
    proj: &OutputProjection,
    window: usize,
) -> Result<(Tensor, AttendCache)> {
    check_window(window)?;
    let mut sources = Vec::with_capacity(encoders.len());
    for (seq, params) in encoders {
        let (p_t, pc) = position_forward(h_t, params, seq.len())?;
        let (trace, wc) = window_forward(h_t, seq, p_t, window, &params.w_a.value)?;
        sources.push((pc, wc, trace, seq.len()));
    }
    let contexts: Vec<&[f64]> = sources.iter().map(|(_, _, t, _)| t.context.as_slice()).collect();
    let x = projection_input(h_t, &contexts, proj)?;
    let out = project(&proj.w_c.value, &x);
    let cache = AttendCache {
        h_t: h_t.to_vec(),
        sources,
        proj_input: x,
        h_tilde: out.clone(),
    };
    Ok((Tensor::vector(out), cache))
}

/// Backward of [`attend_forward`]. Returns `dh_t`; per-position gradients
/// for each encoder's top sequence are accumulated into `dseqs`.
pub fn attend_backward(
    cache: &AttendCache,
    dh_tilde: &[f64],
    params: &mut [&mut AttentionParams],
    proj: &mut OutputProjection,
    encoders: &[&[Tensor]],
    dseqs: &mut [Vec<Vec<f64>>],
) -> Vec<f64> {
    let d = cache.h_t.len();
    let dpre: Vec<f64> = cache
        .h_tilde
        .iter()
        .zip(dh_tilde)
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    outer_acc(&mut proj.w_c.grad, &dpre, &cache.proj_input);
    let mut dx = vec![0.0; cache.proj_input.len()];
    gemv_t_acc(&proj.w_c.value, &dpre, &mut dx);
    let mut dh_t = dx[..d].to_vec();

    for (k, (pc, wc, trace, source_len)) in cache.sources.iter().enumerate() {
        let p = &mut params[k];
        let seq = encoders[k];
        let dseq = &mut dseqs[k];
        let dctx = &dx[(k + 1) * d..(k + 2) * d];
        let sigma = trace.radius as f64 / 2.0;
        let mut dp = 0.0;
        let mut dalign = Vec::with_capacity(trace.weights.len());
        for (j, s) in trace.window.clone().enumerate() {
            let hs = seq[s].as_slice();
            let da = dot(dctx, hs);
            axpy(trace.weights[j], dctx, &mut dseq[s]);
            dalign.push(da * wc.gauss[j]);
            dp += da * trace.weights[j] * (s as f64 - trace.p_t) / (sigma * sigma);
        }
        let dscore = softmax_backward_slice(&trace.align, &dalign);
        let mut du = vec![0.0; d];
        for (j, s) in trace.window.clone().enumerate() {
            axpy(dscore[j], seq[s].as_slice(), &mut du);
            axpy(dscore[j], &wc.u, &mut dseq[s]);
        }
        gemv_acc(&p.w_a.value, &du, &mut dh_t);
        outer_acc(&mut p.w_a.grad, &cache.h_t, &du);

        let dz = dp * *source_len as f64 * pc.sig * (1.0 - pc.sig);
        axpy(dz, &pc.tanh_p, p.v_p.grad.as_mut_slice());
        let dpre_p: Vec<f64> = pc
            .tanh_p
            .iter()
            .zip(p.v_p.value.as_slice())
            .map(|(t, v)| dz * v * (1.0 - t * t))
            .collect();
        outer_acc(&mut p.w_p.grad, &dpre_p, &cache.h_t);
        gemv_t_acc(&p.w_p.value, &dpre_p, &mut dh_t);
    }
    dh_t
}

/// Dual-source attention: independent position, window and context per
/// encoder, then one projection over `[h_t; c¹; c²]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_attend(
    h_t: &Tensor,
    enc1_seq: &[Tensor],
    enc2_seq: &[Tensor],
    params1: &AttentionParams,
    params2: &AttentionParams,
    proj: &OutputProjection,
    window: usize,
) -> Result<(Tensor, AttentionTrace, AttentionTrace)> {
    let (h, cache) = attend_forward(
        h_t.as_slice(),
        &[(enc1_seq, params1), (enc2_seq, params2)],
        proj,
        window,
    )?;
    let mut traces = cache.sources.into_iter().map(|(_, _, t, _)| t);
    let t1 = traces.next().expect("two traces");
    let t2 = traces.next().expect("two traces");
    Ok((h, t1, t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, ParamSet};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(d: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn randomize(p: &mut Parameter, rng: &mut impl Rng) {
        p.value
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    fn random_params(prefix: &str, d: usize, rng: &mut impl Rng) -> AttentionParams {
        let mut p = AttentionParams::zeros(prefix, d);
        for q in p.parameters_mut() {
            randomize(q, rng);
        }
        p
    }

    #[test]
    fn position_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params("a", 2, &mut rng);
        p.v_p.value.fill(0.0);
        let h = rvec(2, &mut rng);
        assert_eq!(predict_position(&h, &p, 7).unwrap(), 3.5);

        let p = random_params("a", 2, &mut rng);
        let pt = predict_position(&h, &p, 1).unwrap();
        assert!(pt > 0.0 && pt < 1.0);

        // scalar re-evaluation
        let (hv, wp, vp) = (h.as_slice(), &p.w_p.value, p.v_p.value.as_slice());
        let t0 = (wp.get(0, 0) * hv[0] + wp.get(0, 1) * hv[1]).tanh();
        let t1 = (wp.get(1, 0) * hv[0] + wp.get(1, 1) * hv[1]).tanh();
        let expect = 5.0 / (1.0 + (-(vp[0] * t0 + vp[1] * t1)).exp());
        assert_abs_diff_eq!(predict_position(&h, &p, 5).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn window_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq: Vec<Tensor> = (0..8).map(|_| rvec(3, &mut rng)).collect();
        let h = rvec(3, &mut rng);
        let t = window_weights(&h, &seq, 4.3, 2, &Tensor::zeros(3, 3)).unwrap();
        assert_eq!(t.window, 2..7);
        for (j, s) in t.window.clone().enumerate() {
            assert_abs_diff_eq!(t.align[j], 0.2, epsilon = 1e-15);
            assert_abs_diff_eq!(t.weights[j], gaussian_factor(s, 4.3, 2) / 5.0, epsilon = 1e-15);
        }

        let t = window_weights(&h, &seq, 3.0, 1, &Tensor::zeros(3, 3)).unwrap();
        let centre = t.window.clone().position(|s| s == 3).unwrap();
        assert_eq!(t.weights[centre], t.align[centre]);

        let t = window_weights(&h, &seq[..3], 1.5, 10, &Tensor::identity(3)).unwrap();
        assert_eq!(t.window, 0..3);

        assert!(window_weights(&h, &seq, 1.0, 0, &Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn context_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<Tensor> = (0..4).map(|_| rvec(3, &mut rng)).collect();
        let mut trace = AttentionTrace {
            p_t: 2.0,
            radius: 1,
            window: 2..3,
            align: vec![1.0],
            weights: vec![0.4],
            context: Tensor::zeros(1, 3),
        };
        let c = context_vector(&trace, &seq).unwrap();
        for j in 0..3 {
            assert_eq!(c.as_slice()[j], 0.4 * seq[2].as_slice()[j]);
        }
        trace.window = 0..3;
        trace.weights = vec![0.0; 3];
        assert_eq!(context_vector(&trace, &seq).unwrap(), Tensor::zeros(1, 3));

        trace.weights = vec![0.2, 0.5, 0.1];
        let c = context_vector(&trace, &seq).unwrap();
        for j in 0..3 {
            let e = 0.2 * seq[0].as_slice()[j] + 0.5 * seq[1].as_slice()[j] + 0.1 * seq[2].as_slice()[j];
            assert_abs_diff_eq!(c.as_slice()[j], e, epsilon = 1e-15);
        }
    }

    #[test]
    fn attentional_hidden_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rvec(2, &mut rng);
        let c1 = rvec(2, &mut rng);
        let c2 = rvec(2, &mut rng);
        let zero = OutputProjection::zeros("o", 2, 2);
        assert_eq!(attentional_hidden(&h, &[&c1, &c2], &zero).unwrap(), Tensor::zeros(1, 2));

        let mut proj = OutputProjection::zeros("o", 2, 2);
        randomize(&mut proj.w_c, &mut rng);
        let z = Tensor::zeros(1, 2);
        let out = attentional_hidden(&h, &[&z, &z], &proj).unwrap();
        for r in 0..2 {
            let e = (proj.w_c.value.get(r, 0) * h.as_slice()[0] + proj.w_c.value.get(r, 1) * h.as_slice()[1]).tanh();
            assert_abs_diff_eq!(out.as_slice()[r], e, epsilon = 1e-15);
        }

        let x = crate::numerics::concat(&[&h, &c1, &c2]).unwrap();
        let mut oracle = crate::numerics::matmul(&proj.w_c.value, &crate::numerics::transpose(&x)).unwrap();
        oracle.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let out = attentional_hidden(&h, &[&c1, &c2], &proj).unwrap();
        assert!(out.max_abs_diff(&crate::numerics::transpose(&oracle)) < 1e-12);

        assert!(attentional_hidden(&h, &[&c1], &proj).is_err());
    }

    #[test]
    fn dual_projection_with_zero_block_reduces_to_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut single = OutputProjection::zeros("o", d, 1);
        randomize(&mut single.w_c, &mut rng);
        let mut dual = OutputProjection::zeros("o", d, 2);
        for r in 0..d {
            dual.w_c.value.row_mut(r)[..2 * d].copy_from_slice(single.w_c.value.row(r));
        }
        let (h, c1, c2) = (rvec(d, &mut rng), rvec(d, &mut rng), rvec(d, &mut rng));
        assert_eq!(
            attentional_hidden(&h, &[&c1], &single).unwrap(),
            attentional_hidden(&h, &[&c1, &c2], &dual).unwrap()
        );
        assert_eq!(single.sources(), 1);
        assert_eq!(dual.sources(), 2);
    }

    #[test]
    fn multi_attend_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 3;
        let enc1: Vec<Tensor> = (0..4).map(|_| rvec(d, &mut rng)).collect();
        let same = rvec(d, &mut rng);
        let enc2: Vec<Tensor> = vec![same; 6];
        let mut p1 = random_params("a1", d, &mut rng);
        let mut p2 = random_params("a2", d, &mut rng);
        let mut proj = OutputProjection::zeros("o", d, 2);
        randomize(&mut proj.w_c, &mut rng);
        let h = rvec(d, &mut rng);

        let (_, _, t2) = multi_attend(&h, &enc1, &enc2, &p1, &p2, &proj, 10).unwrap();
        let n = t2.align.len() as f64;
        assert!(t2.align.iter().all(|a| (a - 1.0 / n).abs() < 1e-15));

        p1.v_p.value.fill(0.0);
        p2.v_p.value.fill(0.0);
        let (ht, t1, t2) = multi_attend(&h, &enc1, &enc2, &p1, &p2, &proj, 10).unwrap();
        assert_eq!(t1.p_t, 2.0);
        assert_eq!(t2.p_t, 3.0);

        let p2 = random_params("a2", d, &mut rng);
        let (ht2, t1, t2) = multi_attend(&h, &enc1, &enc2, &p1, &p2, &proj, 2).unwrap();
        let single = |seq: &[Tensor], p: &AttentionParams| {
            let pt = predict_position(&h, p, seq.len()).unwrap();
            let tr = window_weights(&h, seq, pt, 2, &p.w_a.value).unwrap();
            let c = context_vector(&tr, seq).unwrap();
            (tr, c)
        };
        let (o1, c1) = single(&enc1, &p1);
        let (o2, c2) = single(&enc2, &p2);
        assert_eq!(t1, o1);
        assert_eq!(t2, o2);
        let expect = attentional_hidden(&h, &[&c1, &c2], &proj).unwrap();
        assert!(ht2.max_abs_diff(&expect) < 1e-12);
        assert!(ht.is_finite());
    }

    struct Fixture {
        att: Vec<AttentionParams>,
        proj: OutputProjection,
        h_t: Parameter,
        seqs: Vec<Vec<Parameter>>,
    }

    impl ParamSet for Fixture {
        fn parameters(&self) -> Vec<&Parameter> {
            let mut v: Vec<&Parameter> = self.att.iter().flat_map(|a| a.parameters()).collect();
            v.push(&self.proj.w_c);
            v.push(&self.h_t);
            v.extend(self.seqs.iter().flatten());
            v
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            let mut v: Vec<&mut Parameter> =
                self.att.iter_mut().flat_map(|a| a.parameters_mut()).collect();
            v.push(&mut self.proj.w_c);
            v.push(&mut self.h_t);
            v.extend(self.seqs.iter_mut().flatten());
            v
        }
    }

    fn run(fx: &Fixture, window: usize) -> (Tensor, AttendCache) {
        let seqs: Vec<Vec<Tensor>> = fx
            .seqs
            .iter()
            .map(|s| s.iter().map(|p| p.value.clone()).collect())
            .collect();
        let encs: Vec<(&[Tensor], &AttentionParams)> =
            seqs.iter().map(|s| s.as_slice()).zip(fx.att.iter()).collect();
        attend_forward(fx.h_t.value.as_slice(), &encs, &fx.proj, window).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = 4;
        for (lens, window) in [(vec![5], 10), (vec![6, 3], 10), (vec![9, 7], 2)] {
            let mut fx = Fixture {
                att: (0..lens.len()).map(|k| random_params(&format!("a{k}"), d, &mut rng)).collect(),
                proj: OutputProjection::zeros("o", d, lens.len()),
                h_t: Parameter::new("h_t", rvec(d, &mut rng)),
                seqs: lens
                    .iter()
                    .map(|&n| (0..n).map(|s| Parameter::new(format!("h{s}"), rvec(d, &mut rng))).collect())
                    .collect(),
            };
            randomize(&mut fx.proj.w_c, &mut rng);
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let numeric = finite_difference_grad(&mut fx, 1e-5, |fx| {
                Ok(dot(run(fx, window).0.as_slice(), &w))
            })
            .unwrap();
            let (_, cache) = run(&fx, window);
            let seqs: Vec<Vec<Tensor>> = fx
                .seqs
                .iter()
                .map(|s| s.iter().map(|p| p.value.clone()).collect())
                .collect();
            let enc_refs: Vec<&[Tensor]> = seqs.iter().map(|s| s.as_slice()).collect();
            let mut dseqs: Vec<Vec<Vec<f64>>> = lens.iter().map(|&n| vec![vec![0.0; d]; n]).collect();
            let Fixture { att, proj, h_t, seqs: seq_params } = &mut fx;
            let mut att_refs: Vec<&mut AttentionParams> = att.iter_mut().collect();
            let dh = attend_backward(&cache, &w, &mut att_refs, proj, &enc_refs, &mut dseqs);
            h_t.grad = Tensor::vector(dh);
            for (ps, ds) in seq_params.iter_mut().zip(dseqs) {
                for (p, g) in ps.iter_mut().zip(ds) {
                    p.grad = Tensor::vector(g);
                }
            }
            for (p, n) in fx.parameters().iter().zip(&numeric) {
                for (a, b) in p.grad.as_slice().iter().zip(n.as_slice()) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{lens:?} {}: {a} vs {b}", p.name);
                }
            }
        }
    }

    #[test]
    fn randomized_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let d = rng.gen_range(1..5);
            let s_len = rng.gen_range(1..=40);
            let window = rng.gen_range(1..=10);
            let seq: Vec<Tensor> = (0..s_len).map(|_| rvec(d, &mut rng)).collect();
            let p = random_params("a", d, &mut rng);
            let h = rvec(d, &mut rng);
            let pt = predict_position(&h, &p, s_len).unwrap();
            assert!(pt > 0.0 && pt < s_len as f64);
            let t = window_weights(&h, &seq, pt, window, &p.w_a.value).unwrap();
            assert!((t.align.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, w) in t.align.iter().zip(&t.weights) {
                assert!(*w <= *a && *w >= 0.0 && *w <= 1.0);
            }
        }
    }
}
