//! Analytic-versus-numeric gradient comparison over every model parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Example, RESERVED};
use crate::error::{NmtError, Result};
use crate::model::{AttentionMode, Model, ModelConfig, ModelMode};
use crate::numerics::{finite_difference_grad, ParamSet, DEFAULT_FD_EPSILON};

pub const THRESHOLD: f64 = 1e-4;

/// Denominator floor for the relative error. Central differences at ε = 1e-5
/// carry about 1e-10 of absolute rounding noise on this loss, so components
/// smaller than this are compared on an absolute scale of `THRESHOLD * FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub mode: ModelMode,
    pub attention: AttentionMode,
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    /// Longest sentence on any side.
    pub length: usize,
    pub batch: usize,
    pub epsilon: f64,
    pub init_range: f64,
    pub dropout: f64,
    pub window: usize,
    pub seed: u64,
}

impl GradcheckConfig {
    pub fn new(mode: ModelMode, attention: AttentionMode) -> Self {
        GradcheckConfig {
            mode,
            attention,
            layers: 2,
            hidden: 8,
            vocab: 20,
            length: 5,
            batch: 2,
            epsilon: DEFAULT_FD_EPSILON,
            init_range: 1.0,
            dropout: 0.2,
            window: 2,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < THRESHOLD))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(RESERVED.len()..vocab)).collect()
}

/// Runs the comparison. `corrupt` names a parameter whose analytic gradient is
/// perturbed before comparing, which must make the check fail.
pub fn gradcheck(cfg: &GradcheckConfig, corrupt: Option<&str>) -> Result<GradcheckReport> {
    if cfg.vocab <= RESERVED.len() || cfg.length == 0 || cfg.batch == 0 {
        return Err(NmtError::Argument(
            "gradcheck needs vocab above the reserved ids, length ≥ 1 and batch ≥ 1".into(),
        ));
    }
    let model_cfg = ModelConfig {
        mode: cfg.mode,
        attention: cfg.attention,
        layers: cfg.layers,
        hidden: cfg.hidden,
        src_vocab: vec![cfg.vocab; cfg.mode.sources()],
        tgt_vocab: cfg.vocab,
        window: cfg.window,
        dropout: cfg.dropout,
    };
    let mut model = Model::new(model_cfg, cfg.seed, cfg.init_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let examples: Vec<Example> = (0..cfg.batch)
        .map(|_| {
            let src1 = random_sentence(&mut rng, cfg.vocab, cfg.length);
            let src2 = (cfg.mode.sources() == 2).then(|| random_sentence(&mut rng, cfg.vocab, cfg.length));
            let tgt = random_sentence(&mut rng, cfg.vocab, cfg.length);
            Example::new(src1, src2, tgt)
        })
        .collect();
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>());
    let dropout_seed = cfg.seed.wrapping_add(17);

    let (_, tape) = model.forward_loss(&batch, true, dropout_seed)?;
    model.backward(&tape)?;
    // The numeric side differentiates Σ (nll_t − nll_t at the base point); the
    // shift is constant so the gradient is the same, but summing small
    // differences keeps rounding far below the ulp of the full loss.
    let base = tape.token_nlls();
    if let Some(name) = corrupt {
        let p = model
            .params
            .parameters_mut()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| NmtError::Argument(format!("no parameter named `{name}`")))?;
        let g = &mut p.grad.as_mut_slice()[0];
        *g = *g * 1.5 + 1e-3;
    }

    let config = model.config.clone();
    let numeric = finite_difference_grad(&mut model.params, cfg.epsilon, |p| {
        let m = Model {
            config: config.clone(),
            params: p.clone(),
        };
        let (_, t) = m.forward_loss(&batch, true, dropout_seed)?;
        Ok(t.token_nlls().iter().zip(&base).map(|(a, b)| a - b).sum())
    })?;

    let params = model
        .params
        .parameters()
        .iter()
        .zip(&numeric)
        .map(|(p, n)| {
            let mut rep = ParamReport {
                name: p.name.clone(),
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (&a, &b) in p.grad.as_slice().iter().zip(n.as_slice()) {
                rep.max_abs_error = rep.max_abs_error.max((a - b).abs());
                let e = relative_error(a, b);
                if !(e <= rep.max_rel_error) {
                    rep.max_rel_error = e;
                    rep.analytic = a;
                    rep.numeric = b;
                }
            }
            rep
        })
        .collect();
    Ok(GradcheckReport { params })
}
