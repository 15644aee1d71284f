//! Single- and dual-source encoder-decoder models: assembly, teacher-forced
//! loss, backpropagation through the whole unrolled network, and parameter
//! initialisation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_backward, attend_forward, AttendCache, AttentionParams, AttentionTrace, OutputProjection};
use crate::combiner::{combine_stacks_backward, combine_stacks_forward, CombineCache, CombineMethod, CombinerParams};
use crate::data::{Batch, Example, BOS, EOS};
use crate::error::{NmtError, Result};
use crate::numerics::{axpy, gemv_acc, gemv_t_acc, log_sum_exp, outer_acc, softmax_slice, ParamSet, Parameter, Tensor};
use crate::recurrent::{
    encode, encode_backward, stack_backward, stack_forward, DropoutSampler, EncodeCache, LstmParams, StackCache,
    StateGrad, StateStack,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelMode {
    Single,
    MultiBasic,
    MultiChildSum,
}

impl ModelMode {
    pub fn sources(self) -> usize {
        match self {
            ModelMode::Single => 1,
            _ => 2,
        }
    }

    pub fn combine_method(self) -> Option<CombineMethod> {
        match self {
            ModelMode::Single => None,
            ModelMode::MultiBasic => Some(CombineMethod::Basic),
            ModelMode::MultiChildSum => Some(CombineMethod::ChildSum),
        }
    }

    pub const ALL: [ModelMode; 3] = [ModelMode::Single, ModelMode::MultiBasic, ModelMode::MultiChildSum];
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Single => "single",
            ModelMode::MultiBasic => "multi-basic",
            ModelMode::MultiChildSum => "multi-childsum",
        })
    }
}

impl FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(ModelMode::Single),
            "multi-basic" => Ok(ModelMode::MultiBasic),
            "multi-childsum" => Ok(ModelMode::MultiChildSum),
            _ => Err(format!("unknown mode `{s}` (single | multi-basic | multi-childsum)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    None,
    LocalP,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::LocalP => "local-p",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AttentionMode::None),
            "local-p" => Ok(AttentionMode::LocalP),
            _ => Err(format!("unknown attention `{s}` (none | local-p)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub attention: AttentionMode,
    pub layers: usize,
    pub hidden: usize,
    /// One entry per source language.
    pub src_vocab: Vec<usize>,
    pub tgt_vocab: usize,
    /// Attention window radius `D`.
    pub window: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("layers must be at least 1".to_string());
        }
        if self.hidden == 0 {
            errs.push("hidden must be at least 1".to_string());
        }
        if self.attention == AttentionMode::LocalP && self.window == 0 {
            errs.push("window must be at least 1 when attention is enabled".to_string());
        }
        if self.src_vocab.len() != self.mode.sources() {
            errs.push(format!(
                "mode {} needs {} source vocabularies, got {}",
                self.mode,
                self.mode.sources(),
                self.src_vocab.len()
            ));
        }
        if self.src_vocab.contains(&0) || self.tgt_vocab <= EOS {
            errs.push("vocabularies must include the reserved symbols".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NmtError::Config(errs))
        }
    }

    pub fn sources(&self) -> usize {
        self.mode.sources()
    }

    pub fn has_attention(&self) -> bool {
        self.attention == AttentionMode::LocalP
    }

    fn decoder_input(&self) -> usize {
        if self.has_attention() {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub src_embed: Vec<Parameter>,
    pub tgt_embed: Parameter,
    pub encoders: Vec<Vec<LstmParams>>,
    pub decoder: Vec<LstmParams>,
    pub combiners: Vec<CombinerParams>,
    pub attention: Vec<AttentionParams>,
    pub projection: Option<OutputProjection>,
    pub softmax_w: Parameter,
    pub softmax_b: Parameter,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let ns = cfg.sources();
        let lstm_stack = |prefix: &str, first_in: usize| -> Vec<LstmParams> {
            (0..cfg.layers)
                .map(|l| LstmParams::zeros(&format!("{prefix}.l{l}"), if l == 0 { first_in } else { d }, d))
                .collect()
        };
        ModelParams {
            src_embed: (0..ns)
                .map(|k| Parameter::zeros(format!("src{}.embed", k + 1), cfg.src_vocab[k], d))
                .collect(),
            tgt_embed: Parameter::zeros("tgt.embed", cfg.tgt_vocab, d),
            encoders: (0..ns).map(|k| lstm_stack(&format!("enc{}", k + 1), d)).collect(),
            decoder: lstm_stack("dec", cfg.decoder_input()),
            combiners: match cfg.mode.combine_method() {
                Some(m) => (0..cfg.layers)
                    .map(|l| CombinerParams::zeros(m, &format!("comb.l{l}"), d))
                    .collect(),
                None => Vec::new(),
            },
            attention: if cfg.has_attention() {
                (0..ns).map(|k| AttentionParams::zeros(&format!("att{}", k + 1), d)).collect()
            } else {
                Vec::new()
            },
            projection: cfg.has_attention().then(|| OutputProjection::zeros("att.out", d, ns)),
            softmax_w: Parameter::zeros("softmax.w", cfg.tgt_vocab, d),
            softmax_b: Parameter::zeros("softmax.b", 1, cfg.tgt_vocab),
        }
    }
}

impl ParamSet for ModelParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.src_embed.iter().collect();
        v.push(&self.tgt_embed);
        v.extend(self.encoders.iter().flatten().flat_map(|l| l.parameters()));
        v.extend(self.decoder.iter().flat_map(|l| l.parameters()));
        v.extend(self.combiners.iter().flat_map(|c| c.parameters()));
        v.extend(self.attention.iter().flat_map(|a| a.parameters()));
        if let Some(p) = &self.projection {
            v.push(&p.w_c);
        }
        v.push(&self.softmax_w);
        v.push(&self.softmax_b);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.src_embed.iter_mut().collect();
        v.push(&mut self.tgt_embed);
        v.extend(self.encoders.iter_mut().flatten().flat_map(|l| l.parameters_mut()));
        v.extend(self.decoder.iter_mut().flat_map(|l| l.parameters_mut()));
        v.extend(self.combiners.iter_mut().flat_map(|c| c.parameters_mut()));
        v.extend(self.attention.iter_mut().flat_map(|a| a.parameters_mut()));
        if let Some(p) = &mut self.projection {
            v.push(&mut p.w_c);
        }
        v.push(&mut self.softmax_w);
        v.push(&mut self.softmax_b);
        v
    }
}

fn is_bias(p: &Parameter) -> bool {
    p.name.ends_with(".b")
}

/// Every weight i.i.d. uniform in `[−range, +range]`; biases start at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64, range: f64) -> Result<ModelParams> {
    if !(range > 0.0) {
        return Err(NmtError::Argument(format!("init range must be positive, got {range}")));
    }
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.parameters_mut() {
        if is_bias(p) {
            continue;
        }
        for v in p.value.as_mut_slice() {
            *v = rng.gen_range(-range..=range);
        }
    }
    Ok(params)
}

pub fn perplexity(total_nll: f64, predicted_tokens: usize) -> Result<f64> {
    if predicted_tokens == 0 {
        return Err(NmtError::Argument("perplexity over zero predicted tokens".into()));
    }
    Ok((total_nll / predicted_tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub total_nll: f64,
    pub predicted_tokens: usize,
}

impl LossSummary {
    pub fn perplexity(&self) -> Result<f64> {
        perplexity(self.total_nll, self.predicted_tokens)
    }

    pub fn add(&mut self, other: LossSummary) {
        self.total_nll += other.total_nll;
        self.predicted_tokens += other.predicted_tokens;
    }
}

/// The encoders' outputs that the decoder reads.
#[derive(Clone, Debug)]
pub struct EncodedSources {
    /// Top-layer states per source, original word order.
    pub top_seqs: Vec<Vec<Tensor>>,
    pub init: StateStack,
}

/// Recurrent decoder state plus the previous attentional vector (input feeding).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub stack: StateStack,
    pub feed: Option<Tensor>,
}

/// Output of one inference step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub log_probs: Vec<f64>,
    pub traces: Vec<AttentionTrace>,
}

struct SourceTape {
    enc: Vec<EncodeCache>,
    combine: Option<Vec<CombineCache>>,
}

struct StepTape {
    input_id: usize,
    stack: StackCache,
    attend: Option<AttendCache>,
    out_mask: Option<Vec<f64>>,
    x_out: Vec<f64>,
    probs: Vec<f64>,
    gold: usize,
    nll: f64,
}

struct ExampleTape {
    sources: SourceTape,
    top_seqs: Vec<Vec<Tensor>>,
    steps: Vec<StepTape>,
}

/// Forward record for one batch, consumed by [`Model::backward`].
pub struct Tape {
    examples: Vec<ExampleTape>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per predicted token negative log-likelihoods, example-major.
    pub fn token_nlls(&self) -> Vec<f64> {
        self.examples
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| s.nll))
            .collect()
    }
}

/// Mixes a run seed with an example index into an independent stream seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64, init_range: f64) -> Result<Self> {
        let params = init_params(&config, seed, init_range)?;
        Ok(Model { config, params })
    }

    fn encode_impl(
        &self,
        sources: &[&[usize]],
        mut dropout: Option<&mut DropoutSampler>,
    ) -> Result<(EncodedSources, SourceTape)> {
        if sources.len() != self.config.sources() {
            return Err(NmtError::Argument(format!(
                "model mode {} expects {} source(s), got {}",
                self.config.mode,
                self.config.sources(),
                sources.len()
            )));
        }
        let mut finals = Vec::with_capacity(sources.len());
        let mut tops = Vec::with_capacity(sources.len());
        let mut caches = Vec::with_capacity(sources.len());
        for (k, ids) in sources.iter().enumerate() {
            let (out, cache) = encode(
                ids,
                &self.params.src_embed[k],
                &self.params.encoders[k],
                dropout.as_deref_mut(),
            )?;
            finals.push(out.final_state);
            tops.push(out.top_seq);
            caches.push(cache);
        }
        let (init, combine) = if self.params.combiners.is_empty() {
            (finals.pop().expect("one source"), None)
        } else {
            let (s, c) = combine_stacks_forward(&finals[0], &finals[1], &self.params.combiners)?;
            (s, Some(c))
        };
        Ok((
            EncodedSources { top_seqs: tops, init },
            SourceTape { enc: caches, combine },
        ))
    }

    /// Encodes already-reversed source ids and builds the decoder's initial state.
    pub fn encode_sources(&self, sources: &[&[usize]]) -> Result<(EncodedSources, DecoderState)> {
        let (enc, _) = self.encode_impl(sources, None)?;
        let state = self.initial_state(&enc);
        Ok((enc, state))
    }

    pub fn initial_state(&self, enc: &EncodedSources) -> DecoderState {
        DecoderState {
            stack: enc.init.clone(),
            feed: self
                .config
                .has_attention()
                .then(|| Tensor::zeros(1, self.config.hidden)),
        }
    }

    fn step_impl(
        &self,
        enc: &EncodedSources,
        state: &DecoderState,
        input_id: usize,
        mut dropout: Option<&mut DropoutSampler>,
    ) -> Result<(DecoderState, Vec<f64>, StepTape)> {
        let p = &self.params;
        if input_id >= p.tgt_embed.value.rows() {
            return Err(NmtError::Vocabulary {
                id: input_id,
                size: p.tgt_embed.value.rows(),
            });
        }
        let mut x = p.tgt_embed.value.row(input_id).to_vec();
        if let Some(feed) = &state.feed {
            x.extend_from_slice(feed.as_slice());
        }
        let masks = dropout
            .as_deref_mut()
            .map(|dr| p.decoder.iter().map(|l| dr.mask(l.input_size())).collect());
        let (stack, stack_cache) = stack_forward(&x, &state.stack, &p.decoder, masks)?;
        let h_top = stack.top().h.as_slice().to_vec();

        let (mut x_out, attend, feed) = match &p.projection {
            Some(proj) => {
                let encs: Vec<(&[Tensor], &AttentionParams)> = enc
                    .top_seqs
                    .iter()
                    .map(|s| s.as_slice())
                    .zip(p.attention.iter())
                    .collect();
                let (h_tilde, cache) = attend_forward(&h_top, &encs, proj, self.config.window)?;
                (h_tilde.as_slice().to_vec(), Some(cache), Some(h_tilde))
            }
            None => (h_top, None, None),
        };
        let out_mask = dropout.map(|dr| dr.mask(x_out.len()));
        if let Some(m) = &out_mask {
            x_out.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let mut logits = p.softmax_b.value.as_slice().to_vec();
        gemv_acc(&p.softmax_w.value, &x_out, &mut logits);
        let tape = StepTape {
            input_id,
            stack: stack_cache,
            attend,
            out_mask,
            x_out,
            probs: Vec::new(),
            gold: 0,
            nll: 0.0,
        };
        Ok((DecoderState { stack, feed }, logits, tape))
    }

    /// One inference step: log-probabilities of the next target token.
    pub fn step(&self, enc: &EncodedSources, state: &DecoderState, input_id: usize) -> Result<StepOutput> {
        let (next, logits, tape) = self.step_impl(enc, state, input_id, None)?;
        let lse = log_sum_exp(&logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let traces = tape
            .attend
            .map(|c| c.traces().cloned().collect())
            .unwrap_or_default();
        Ok(StepOutput {
            state: next,
            log_probs,
            traces,
        })
    }

    fn example_forward(
        &self,
        ex: &Example,
        mut dropout: Option<DropoutSampler>,
    ) -> Result<(LossSummary, ExampleTape)> {
        let mut sources: Vec<&[usize]> = vec![&ex.src1];
        if self.config.sources() == 2 {
            sources.push(ex.src2.as_deref().ok_or_else(|| {
                NmtError::Argument(format!("mode {} needs a second source", self.config.mode))
            })?);
        }
        let (enc, src_tape) = self.encode_impl(&sources, dropout.as_mut())?;
        let mut state = self.initial_state(&enc);
        let vocab = self.config.tgt_vocab;
        let mut summary = LossSummary::default();
        let mut steps = Vec::with_capacity(ex.tgt.len() + 1);
        let inputs = std::iter::once(BOS).chain(ex.tgt.iter().copied());
        let golds = ex.tgt.iter().copied().chain(std::iter::once(EOS));
        for (t, (input, gold)) in inputs.zip(golds).enumerate() {
            if gold >= vocab {
                return Err(NmtError::Vocabulary { id: gold, size: vocab });
            }
            let (next, logits, mut tape) = self.step_impl(&enc, &state, input, dropout.as_mut())?;
            let probs = softmax_slice(&logits);
            let nll = log_sum_exp(&logits) - logits[gold];
            if !nll.is_finite() {
                return Err(NmtError::Numeric(format!("non-finite loss at decoder step {t}")));
            }
            summary.total_nll += nll;
            summary.predicted_tokens += 1;
            tape.probs = probs;
            tape.gold = gold;
            tape.nll = nll;
            steps.push(tape);
            state = next;
        }
        Ok((
            summary,
            ExampleTape {
                sources: src_tape,
                top_seqs: enc.top_seqs,
                steps,
            },
        ))
    }

    /// Teacher-forced negative log-likelihood summed over the batch. Padding
    /// never enters the computation; each row is read up to its true length.
    pub fn forward_loss(&self, batch: &Batch, train_mode: bool, seed: u64) -> Result<(LossSummary, Tape)> {
        if batch.src2.is_some() != (self.config.sources() == 2) {
            return Err(NmtError::Argument(format!(
                "batch sources do not match model mode {}",
                self.config.mode
            )));
        }
        let mut total = LossSummary::default();
        let mut examples = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let dropout = if train_mode {
                DropoutSampler::new(self.config.dropout, derive_seed(seed, i as u64))
            } else {
                None
            };
            let (s, tape) = self.example_forward(&batch.example(i), dropout)?;
            total.add(s);
            examples.push(tape);
        }
        Ok((total, Tape { examples }))
    }

    pub fn loss(&self, batch: &Batch, train_mode: bool, seed: u64) -> Result<LossSummary> {
        self.forward_loss(batch, train_mode, seed).map(|(s, _)| s)
    }

    /// Accumulates gradient SUMS over the taped batch into `params.*.grad`.
    pub fn backward(&mut self, tape: &Tape) -> Result<()> {
        let ModelParams {
            src_embed,
            tgt_embed,
            encoders,
            decoder,
            combiners,
            attention,
            projection,
            softmax_w,
            softmax_b,
        } = &mut self.params;
        let layers = self.config.layers;
        let d = self.config.hidden;
        for ex in &tape.examples {
            let mut dstate = StateGrad::zeros(layers, d);
            let mut dfeed_next: Option<Vec<f64>> = None;
            let mut dseqs: Vec<Vec<Vec<f64>>> = ex
                .top_seqs
                .iter()
                .map(|s| vec![vec![0.0; d]; s.len()])
                .collect();
            let seq_refs: Vec<&[Tensor]> = ex.top_seqs.iter().map(|s| s.as_slice()).collect();
            for step in ex.steps.iter().rev() {
                let mut dlogits = step.probs.clone();
                dlogits[step.gold] -= 1.0;
                outer_acc(&mut softmax_w.grad, &dlogits, &step.x_out);
                axpy(1.0, &dlogits, softmax_b.grad.as_mut_slice());
                let mut dx = vec![0.0; step.x_out.len()];
                gemv_t_acc(&softmax_w.value, &dlogits, &mut dx);
                if let Some(m) = &step.out_mask {
                    dx.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
                }
                let dh_top = match (&step.attend, projection.as_mut()) {
                    (Some(cache), Some(proj)) => {
                        if let Some(df) = &dfeed_next {
                            axpy(1.0, df, &mut dx);
                        }
                        let mut att: Vec<&mut AttentionParams> = attention.iter_mut().collect();
                        attend_backward(cache, &dx, &mut att, proj, &seq_refs, &mut dseqs)
                    }
                    _ => dx,
                };
                axpy(1.0, &dh_top, &mut dstate.dh[layers - 1]);
                let dinput = stack_backward(&step.stack, &mut dstate, decoder);
                axpy(1.0, &dinput[..d], tgt_embed.grad.row_mut(step.input_id));
                dfeed_next = (dinput.len() > d).then(|| dinput[d..].to_vec());
            }
            match &ex.sources.combine {
                Some(caches) => {
                    let (g1, g2) = combine_stacks_backward(caches, &dstate, combiners);
                    let (e1, e2) = encoders.split_at_mut(1);
                    let (s1, s2) = src_embed.split_at_mut(1);
                    encode_backward(&ex.sources.enc[0], g1, &dseqs[0], &mut s1[0], &mut e1[0]);
                    encode_backward(&ex.sources.enc[1], g2, &dseqs[1], &mut s2[0], &mut e2[0]);
                }
                None => {
                    encode_backward(&ex.sources.enc[0], dstate, &dseqs[0], &mut src_embed[0], &mut encoders[0]);
                }
            }
        }
        for p in self.params.parameters() {
            if !p.grad.is_finite() {
                return Err(NmtError::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
        Ok(())
    }
}
