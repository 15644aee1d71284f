//! LSTM cell, stacked step and sequence encoder, each with an explicit
//! backward pass driven by the caches the forward pass returns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NmtError, Result};
use crate::numerics::{axpy, gemv_acc, gemv_t_acc, outer_acc, sigmoid, Parameter, Tensor};

/// Gate blocks are stacked in the order i, f, o, u.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_x: Parameter,
    pub w_h: Parameter,
    pub b: Parameter,
}

impl LstmParams {
    pub fn zeros(prefix: &str, input_size: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Parameter::zeros(format!("{prefix}.w_x"), 4 * hidden, input_size),
            w_h: Parameter::zeros(format!("{prefix}.w_h"), 4 * hidden, hidden),
            b: Parameter::zeros(format!("{prefix}.b"), 1, 4 * hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.value.cols()
    }

    pub fn input_size(&self) -> usize {
        self.w_x.value.cols()
    }

    pub fn parameters(&self) -> [&Parameter; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LayerState {
    pub fn zeros(hidden: usize) -> Self {
        LayerState {
            h: Tensor::zeros(1, hidden),
            c: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.h.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateStack {
    pub layers: Vec<LayerState>,
}

impl StateStack {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        StateStack {
            layers: vec![LayerState::zeros(hidden); layers],
        }
    }

    pub fn top(&self) -> &LayerState {
        self.layers.last().expect("state stack has at least one layer")
    }
}

/// Upstream gradient with respect to a [`StateStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub dh: Vec<Vec<f64>>,
    pub dc: Vec<Vec<f64>>,
}

impl StateGrad {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        StateGrad {
            dh: vec![vec![0.0; hidden]; layers],
            dc: vec![vec![0.0; hidden]; layers],
        }
    }
}

/// Activations kept from one cell evaluation.
#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates i, f, o, u.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub fn lstm_cell(x: &Tensor, prev: &LayerState, params: &LstmParams) -> Result<LayerState> {
    lstm_forward(x.as_slice(), prev, params).map(|(s, _)| s)
}

pub fn lstm_forward(
    x: &[f64],
    prev: &LayerState,
    params: &LstmParams,
) -> Result<(LayerState, LstmCache)> {
    let d = params.hidden_size();
    if x.len() != params.input_size() {
        return Err(NmtError::dim(
            "lstm_cell input",
            (1, x.len()),
            (1, params.input_size()),
        ));
    }
    if prev.h.len() != d || prev.c.len() != d {
        return Err(NmtError::dim("lstm_cell state", (1, prev.h.len()), (1, d)));
    }
    let mut z = params.b.value.as_slice().to_vec();
    gemv_acc(&params.w_x.value, x, &mut z);
    gemv_acc(&params.w_h.value, prev.h.as_slice(), &mut z);
    for (k, v) in z.iter_mut().enumerate() {
        *v = if k < 3 * d { sigmoid(*v) } else { v.tanh() };
    }
    let c_prev = prev.c.as_slice();
    let mut c = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for j in 0..d {
        let (i, f, o, u) = (z[j], z[d + j], z[2 * d + j], z[3 * d + j]);
        c[j] = f * c_prev[j] + i * u;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: prev.h.as_slice().to_vec(),
        c_prev: c_prev.to_vec(),
        gates: z,
        tanh_c,
    };
    Ok((
        LayerState {
            h: Tensor::vector(h),
            c: Tensor::vector(c),
        },
        cache,
    ))
}

/// Returns `(dx, dh_prev, dc_prev)` and accumulates parameter gradients.
pub fn lstm_backward(
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    params: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = cache.tanh_c.len();
    let g = &cache.gates;
    let mut dz = vec![0.0; 4 * d];
    let mut dc_prev = vec![0.0; d];
    for j in 0..d {
        let (i, f, o, u) = (g[j], g[d + j], g[2 * d + j], g[3 * d + j]);
        let t = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (1.0 - t * t);
        dz[j] = dct * u * i * (1.0 - i);
        dz[d + j] = dct * cache.c_prev[j] * f * (1.0 - f);
        dz[2 * d + j] = dh[j] * t * o * (1.0 - o);
        dz[3 * d + j] = dct * i * (1.0 - u * u);
        dc_prev[j] = dct * f;
    }
    outer_acc(&mut params.w_x.grad, &dz, &cache.x);
    outer_acc(&mut params.w_h.grad, &dz, &cache.h_prev);
    axpy(1.0, &dz, params.b.grad.as_mut_slice());
    let mut dx = vec![0.0; cache.x.len()];
    gemv_t_acc(&params.w_x.value, &dz, &mut dx);
    let mut dh_prev = vec![0.0; d];
    gemv_t_acc(&params.w_h.value, &dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Inverted dropout: kept units are scaled by `1 / keep` at train time.
#[derive(Debug)]
pub struct DropoutSampler {
    keep: f64,
    rng: ChaCha8Rng,
}

impl DropoutSampler {
    /// `None` when `rate` is zero, so callers skip masking entirely.
    pub fn new(rate: f64, seed: u64) -> Option<Self> {
        (rate > 0.0).then(|| DropoutSampler {
            keep: 1.0 - rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn mask(&mut self, n: usize) -> Vec<f64> {
        let scale = 1.0 / self.keep;
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.keep { scale } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct StackCache {
    layers: Vec<(Option<Vec<f64>>, LstmCache)>,
}

/// One step through every layer, bottom-up. Masks multiply each layer's
/// input only; recurrent connections are never dropped.
pub fn stack_step(
    x: &Tensor,
    prev: &StateStack,
    layers: &[LstmParams],
    dropout_masks: Option<&[Tensor]>,
) -> Result<StateStack> {
    let masks: Option<Vec<Vec<f64>>> =
        dropout_masks.map(|ms| ms.iter().map(|m| m.as_slice().to_vec()).collect());
    stack_forward(x.as_slice(), prev, layers, masks).map(|(s, _)| s)
}

pub fn stack_forward(
    x: &[f64],
    prev: &StateStack,
    layers: &[LstmParams],
    masks: Option<Vec<Vec<f64>>>,
) -> Result<(StateStack, StackCache)> {
    if prev.layers.len() != layers.len() {
        return Err(NmtError::dim(
            "stack_step layers",
            (prev.layers.len(), 1),
            (layers.len(), 1),
        ));
    }
    if let Some(ms) = &masks {
        if ms.len() != layers.len() {
            return Err(NmtError::dim("dropout masks", (ms.len(), 1), (layers.len(), 1)));
        }
    }
    let mut masks = masks.map(|m| m.into_iter());
    let mut input = x.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    let mut caches = Vec::with_capacity(layers.len());
    for (params, state) in layers.iter().zip(&prev.layers) {
        let mask = masks.as_mut().and_then(|m| m.next());
        if let Some(m) = &mask {
            if m.len() != input.len() {
                return Err(NmtError::dim("dropout mask", (1, m.len()), (1, input.len())));
            }
            input.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let (next, cache) = lstm_forward(&input, state, params)?;
        input = next.h.as_slice().to_vec();
        out.push(next);
        caches.push((mask, cache));
    }
    Ok((StateStack { layers: out }, StackCache { layers: caches }))
}

/// Backward through one stacked step. `dstate` holds the gradient with
/// respect to this step's output and is replaced by the gradient with respect
/// to its input state. Returns the gradient of the bottom-layer input `x`.
pub fn stack_backward(
    cache: &StackCache,
    dstate: &mut StateGrad,
    layers: &mut [LstmParams],
) -> Vec<f64> {
    let mut from_above: Option<Vec<f64>> = None;
    for (l, (mask, lc)) in cache.layers.iter().enumerate().rev() {
        let mut dh = std::mem::take(&mut dstate.dh[l]);
        if let Some(extra) = &from_above {
            axpy(1.0, extra, &mut dh);
        }
        let (mut dx, dh_prev, dc_prev) = lstm_backward(lc, &dh, &dstate.dc[l], &mut layers[l]);
        if let Some(m) = mask {
            dx.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
        }
        dstate.dh[l] = dh_prev;
        dstate.dc[l] = dc_prev;
        from_above = Some(dx);
    }
    from_above.unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    pub final_state: StateStack,
    /// Top-layer hidden states indexed by ORIGINAL source position.
    pub top_seq: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    ids: Vec<usize>,
    steps: Vec<StackCache>,
}

fn lookup(embed: &Parameter, id: usize) -> Result<&[f64]> {
    if id >= embed.value.rows() {
        return Err(NmtError::Vocabulary {
            id,
            size: embed.value.rows(),
        });
    }
    Ok(embed.value.row(id))
}

/// Runs the stack over an already-reversed source sentence from zero states.
pub fn encode(
    ids_reversed: &[usize],
    embed: &Parameter,
    layers: &[LstmParams],
    mut dropout: Option<&mut DropoutSampler>,
) -> Result<(EncodeOutput, EncodeCache)> {
    if ids_reversed.is_empty() {
        return Err(NmtError::Argument("cannot encode an empty sequence".into()));
    }
    let hidden = layers
        .first()
        .ok_or_else(|| NmtError::Argument("encoder has no layers".into()))?
        .hidden_size();
    let mut state = StateStack::zeros(layers.len(), hidden);
    let mut steps = Vec::with_capacity(ids_reversed.len());
    let mut tops = Vec::with_capacity(ids_reversed.len());
    for &id in ids_reversed {
        let x = lookup(embed, id)?;
        let masks = dropout.as_deref_mut().map(|dr| {
            layers
                .iter()
                .map(|p| dr.mask(p.input_size()))
                .collect::<Vec<_>>()
        });
        let (next, cache) = stack_forward(x, &state, layers, masks)?;
        tops.push(next.top().h.clone());
        steps.push(cache);
        state = next;
    }
    tops.reverse();
    Ok((
        EncodeOutput {
            final_state: state,
            top_seq: tops,
        },
        EncodeCache {
            ids: ids_reversed.to_vec(),
            steps,
        },
    ))
}

/// BPTT through an encoder. `dtop_seq` is indexed by original position, like
/// [`EncodeOutput::top_seq`].
pub fn encode_backward(
    cache: &EncodeCache,
    mut dfinal: StateGrad,
    dtop_seq: &[Vec<f64>],
    embed: &mut Parameter,
    layers: &mut [LstmParams],
) {
    let len = cache.steps.len();
    let top = layers.len() - 1;
    for (j, step) in cache.steps.iter().enumerate().rev() {
        if let Some(g) = dtop_seq.get(len - 1 - j) {
            axpy(1.0, g, &mut dfinal.dh[top]);
        }
        let dx = stack_backward(step, &mut dfinal, layers);
        axpy(1.0, &dx, embed.grad.row_mut(cache.ids[j]));
    }
}
