//! Merging two encoders' final `(h, c)` pairs into one decoder initial state.
//!
//! * Basic: `h = tanh(W_c [h₁; h₂])`, `c = c₁ + c₂`.
//! * Child-Sum: an LSTM-style cell whose input, output and update gates read
//!   both hidden states, with a separate forget gate per incoming cell:
//!   `c = i⊙u + f₁⊙c₁ + f₂⊙c₂`, `h = o⊙tanh(c)`.
//!
//! Concatenating the cells through a linear map is deliberately absent; it
//! diverges on large cell values.

use crate::error::{NmtError, Result};
use crate::numerics::{gemv_acc, gemv_t_acc, outer_acc, sigmoid, Parameter, Tensor};
use crate::recurrent::{LayerState, StateGrad, StateStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMethod {
    Basic,
    ChildSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicCombinerParams {
    /// `d × 2d`
    pub w_c: Parameter,
}

impl BasicCombinerParams {
    pub fn zeros(prefix: &str, hidden: usize) -> Self {
        BasicCombinerParams {
            w_c: Parameter::zeros(format!("{prefix}.w_c"), hidden, 2 * hidden),
        }
    }
}

/// Eight `d × d` matrices; `w1_*` read encoder 1, `w2_*` read encoder 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ChildSumCombinerParams {
    pub w1_i: Parameter,
    pub w2_i: Parameter,
    pub w1_f: Parameter,
    pub w2_f: Parameter,
    pub w1_o: Parameter,
    pub w2_o: Parameter,
    pub w1_u: Parameter,
    pub w2_u: Parameter,
}

impl ChildSumCombinerParams {
    pub fn zeros(prefix: &str, hidden: usize) -> Self {
        let m = |n: &str| Parameter::zeros(format!("{prefix}.{n}"), hidden, hidden);
        ChildSumCombinerParams {
            w1_i: m("w1_i"),
            w2_i: m("w2_i"),
            w1_f: m("w1_f"),
            w2_f: m("w2_f"),
            w1_o: m("w1_o"),
            w2_o: m("w2_o"),
            w1_u: m("w1_u"),
            w2_u: m("w2_u"),
        }
    }

    /// The same combiner with the roles of the two encoders exchanged.
    pub fn swapped(&self) -> Self {
        ChildSumCombinerParams {
            w1_i: self.w2_i.clone(),
            w2_i: self.w1_i.clone(),
            w1_f: self.w2_f.clone(),
            w2_f: self.w1_f.clone(),
            w1_o: self.w2_o.clone(),
            w2_o: self.w1_o.clone(),
            w1_u: self.w2_u.clone(),
            w2_u: self.w1_u.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CombinerParams {
    Basic(BasicCombinerParams),
    ChildSum(ChildSumCombinerParams),
}

impl CombinerParams {
    pub fn zeros(method: CombineMethod, prefix: &str, hidden: usize) -> Self {
        match method {
            CombineMethod::Basic => CombinerParams::Basic(BasicCombinerParams::zeros(prefix, hidden)),
            CombineMethod::ChildSum => {
                CombinerParams::ChildSum(ChildSumCombinerParams::zeros(prefix, hidden))
            }
        }
    }

    pub fn method(&self) -> CombineMethod {
        match self {
            CombinerParams::Basic(_) => CombineMethod::Basic,
            CombinerParams::ChildSum(_) => CombineMethod::ChildSum,
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            CombinerParams::Basic(p) => vec![&p.w_c],
            CombinerParams::ChildSum(p) => vec![
                &p.w1_i, &p.w2_i, &p.w1_f, &p.w2_f, &p.w1_o, &p.w2_o, &p.w1_u, &p.w2_u,
            ],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            CombinerParams::Basic(p) => vec![&mut p.w_c],
            CombinerParams::ChildSum(p) => vec![
                &mut p.w1_i,
                &mut p.w2_i,
                &mut p.w1_f,
                &mut p.w2_f,
                &mut p.w1_o,
                &mut p.w2_o,
                &mut p.w1_u,
                &mut p.w2_u,
            ],
        }
    }
}

fn check_pair(s1: &LayerState, s2: &LayerState, expected: usize) -> Result<()> {
    for s in [s1, s2] {
        if s.h.len() != expected || s.c.len() != expected {
            return Err(NmtError::dim(
                "combiner input",
                (1, s.h.len()),
                (1, expected),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum CombineCache {
    Basic {
        x: Vec<f64>,
        h: Vec<f64>,
    },
    ChildSum {
        h1: Vec<f64>,
        h2: Vec<f64>,
        c1: Vec<f64>,
        c2: Vec<f64>,
        i: Vec<f64>,
        f1: Vec<f64>,
        f2: Vec<f64>,
        o: Vec<f64>,
        u: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

pub fn basic_combine(s1: &LayerState, s2: &LayerState, p: &BasicCombinerParams) -> Result<LayerState> {
    basic_forward(s1, s2, p).map(|(s, _)| s)
}

fn basic_forward(
    s1: &LayerState,
    s2: &LayerState,
    p: &BasicCombinerParams,
) -> Result<(LayerState, CombineCache)> {
    let d = p.w_c.value.rows();
    check_pair(s1, s2, d)?;
    let mut x = s1.h.as_slice().to_vec();
    x.extend_from_slice(s2.h.as_slice());
    let mut h = vec![0.0; d];
    gemv_acc(&p.w_c.value, &x, &mut h);
    h.iter_mut().for_each(|v| *v = v.tanh());
    let c: Vec<f64> = s1.c.as_slice().iter().zip(s2.c.as_slice()).map(|(a, b)| a + b).collect();
    let state = LayerState {
        h: Tensor::vector(h.clone()),
        c: Tensor::vector(c),
    };
    Ok((state, CombineCache::Basic { x, h }))
}

pub fn childsum_combine(
    s1: &LayerState,
    s2: &LayerState,
    p: &ChildSumCombinerParams,
) -> Result<LayerState> {
    childsum_forward(s1, s2, p).map(|(s, _)| s)
}

fn childsum_forward(
    s1: &LayerState,
    s2: &LayerState,
    p: &ChildSumCombinerParams,
) -> Result<(LayerState, CombineCache)> {
    let d = p.w1_i.value.rows();
    check_pair(s1, s2, d)?;
    let (h1, h2) = (s1.h.as_slice(), s2.h.as_slice());
    let (c1, c2) = (s1.c.as_slice(), s2.c.as_slice());
    let pre = |a: &Parameter, xa: &[f64], b: Option<(&Parameter, &[f64])>| {
        let mut z = vec![0.0; d];
        gemv_acc(&a.value, xa, &mut z);
        if let Some((b, xb)) = b {
            gemv_acc(&b.value, xb, &mut z);
        }
        z
    };
    let act = |mut z: Vec<f64>, f: fn(f64) -> f64| {
        z.iter_mut().for_each(|v| *v = f(*v));
        z
    };
    let i = act(pre(&p.w1_i, h1, Some((&p.w2_i, h2))), sigmoid);
    let f1 = act(pre(&p.w1_f, h1, None), sigmoid);
    let f2 = act(pre(&p.w2_f, h2, None), sigmoid);
    let o = act(pre(&p.w1_o, h1, Some((&p.w2_o, h2))), sigmoid);
    let u = act(pre(&p.w1_u, h1, Some((&p.w2_u, h2))), f64::tanh);
    // The forget terms are grouped so that swapping the encoders is bit-exact.
    let c: Vec<f64> = (0..d).map(|j| i[j] * u[j] + (f1[j] * c1[j] + f2[j] * c2[j])).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..d).map(|j| o[j] * tanh_c[j]).collect();
    let state = LayerState {
        h: Tensor::vector(h),
        c: Tensor::vector(c),
    };
    let cache = CombineCache::ChildSum {
        h1: h1.to_vec(),
        h2: h2.to_vec(),
        c1: c1.to_vec(),
        c2: c2.to_vec(),
        i,
        f1,
        f2,
        o,
        u,
        tanh_c,
    };
    Ok((state, cache))
}

pub fn combine_forward(
    s1: &LayerState,
    s2: &LayerState,
    params: &CombinerParams,
) -> Result<(LayerState, CombineCache)> {
    match params {
        CombinerParams::Basic(p) => basic_forward(s1, s2, p),
        CombinerParams::ChildSum(p) => childsum_forward(s1, s2, p),
    }
}

/// Gradients with respect to both inputs: `((dh₁, dc₁), (dh₂, dc₂))`.
pub type PairGrad = ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>));

pub fn combine_backward(
    cache: &CombineCache,
    dh: &[f64],
    dc: &[f64],
    params: &mut CombinerParams,
) -> PairGrad {
    match (cache, params) {
        (CombineCache::Basic { x, h }, CombinerParams::Basic(p)) => {
            let d = h.len();
            let dpre: Vec<f64> = h.iter().zip(dh).map(|(y, g)| g * (1.0 - y * y)).collect();
            outer_acc(&mut p.w_c.grad, &dpre, x);
            let mut dx = vec![0.0; 2 * d];
            gemv_t_acc(&p.w_c.value, &dpre, &mut dx);
            let dh2 = dx.split_off(d);
            ((dx, dc.to_vec()), (dh2, dc.to_vec()))
        }
        (
            CombineCache::ChildSum {
                h1,
                h2,
                c1,
                c2,
                i,
                f1,
                f2,
                o,
                u,
                tanh_c,
            },
            CombinerParams::ChildSum(p),
        ) => {
            let d = h1.len();
            let mut zi = vec![0.0; d];
            let mut zf1 = vec![0.0; d];
            let mut zf2 = vec![0.0; d];
            let mut zo = vec![0.0; d];
            let mut zu = vec![0.0; d];
            let mut dc1 = vec![0.0; d];
            let mut dc2 = vec![0.0; d];
            for j in 0..d {
                let t = tanh_c[j];
                let dct = dc[j] + dh[j] * o[j] * (1.0 - t * t);
                zo[j] = dh[j] * t * o[j] * (1.0 - o[j]);
                zi[j] = dct * u[j] * i[j] * (1.0 - i[j]);
                zu[j] = dct * i[j] * (1.0 - u[j] * u[j]);
                zf1[j] = dct * c1[j] * f1[j] * (1.0 - f1[j]);
                zf2[j] = dct * c2[j] * f2[j] * (1.0 - f2[j]);
                dc1[j] = dct * f1[j];
                dc2[j] = dct * f2[j];
            }
            let mut dh1 = vec![0.0; d];
            let mut dh2 = vec![0.0; d];
            for (w, z, x, dx) in [
                (&mut p.w1_i, &zi, h1, 0),
                (&mut p.w1_f, &zf1, h1, 0),
                (&mut p.w1_o, &zo, h1, 0),
                (&mut p.w1_u, &zu, h1, 0),
                (&mut p.w2_i, &zi, h2, 1),
                (&mut p.w2_f, &zf2, h2, 1),
                (&mut p.w2_o, &zo, h2, 1),
                (&mut p.w2_u, &zu, h2, 1),
            ] {
                outer_acc(&mut w.grad, z, x);
                gemv_t_acc(&w.value, z, if dx == 0 { &mut dh1 } else { &mut dh2 });
            }
            ((dh1, dc1), (dh2, dc2))
        }
        _ => panic!("combiner cache does not match combiner parameters"),
    }
}

/// One combiner per layer, each with its own parameters.
pub fn combine_stacks(
    e1: &StateStack,
    e2: &StateStack,
    params: &[CombinerParams],
) -> Result<StateStack> {
    combine_stacks_forward(e1, e2, params).map(|(s, _)| s)
}

pub fn combine_stacks_forward(
    e1: &StateStack,
    e2: &StateStack,
    params: &[CombinerParams],
) -> Result<(StateStack, Vec<CombineCache>)> {
    if e1.layers.len() != e2.layers.len() || e1.layers.len() != params.len() {
        return Err(NmtError::dim(
            "combine_stacks layers",
            (e1.layers.len(), e2.layers.len()),
            (params.len(), params.len()),
        ));
    }
    let mut layers = Vec::with_capacity(params.len());
    let mut caches = Vec::with_capacity(params.len());
    for ((s1, s2), p) in e1.layers.iter().zip(&e2.layers).zip(params) {
        let (s, c) = combine_forward(s1, s2, p)?;
        layers.push(s);
        caches.push(c);
    }
    Ok((StateStack { layers }, caches))
}

/// Returns the state gradients for encoder 1 and encoder 2.
pub fn combine_stacks_backward(
    caches: &[CombineCache],
    dout: &StateGrad,
    params: &mut [CombinerParams],
) -> (StateGrad, StateGrad) {
    let n = caches.len();
    let mut g1 = StateGrad {
        dh: Vec::with_capacity(n),
        dc: Vec::with_capacity(n),
    };
    let mut g2 = g1.clone();
    for (l, (cache, p)) in caches.iter().zip(params.iter_mut()).enumerate() {
        let ((dh1, dc1), (dh2, dc2)) = combine_backward(cache, &dout.dh[l], &dout.dc[l], p);
        g1.dh.push(dh1);
        g1.dc.push(dc1);
        g2.dh.push(dh2);
        g2.dc.push(dc2);
    }
    (g1, g2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, ParamSet};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(h: &[f64], c: &[f64]) -> LayerState {
        LayerState {
            h: Tensor::vector(h.to_vec()),
            c: Tensor::vector(c.to_vec()),
        }
    }

    fn randomize(ps: Vec<&mut Parameter>, rng: &mut impl Rng) {
        for p in ps {
            p.value
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }

    fn random_state(d: usize, rng: &mut impl Rng) -> LayerState {
        LayerState {
            h: Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            c: Tensor::vector((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()),
        }
    }

    #[test]
    fn basic_zero_weights() {
        let p = BasicCombinerParams::zeros("c", 2);
        let out = basic_combine(&state(&[0.3, 0.9], &[1.0, 2.0]), &state(&[-0.5, 0.1], &[0.5, -1.0]), &p)
            .unwrap();
        assert_eq!(out.h.as_slice(), &[0.0, 0.0]);
        assert_eq!(out.c.as_slice(), &[1.5, 1.0]);
    }

    #[test]
    fn basic_scalar_cases() {
        let mut p = BasicCombinerParams::zeros("c", 1);
        p.w_c.value = Tensor::vector(vec![1.0, 1.0]);
        let out = basic_combine(&state(&[0.5], &[0.2]), &state(&[-0.5], &[0.3]), &p).unwrap();
        assert_eq!(out.h.as_slice(), &[0.0]);
        assert_abs_diff_eq!(out.c.as_slice()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn childsum_zero_weights() {
        let p = ChildSumCombinerParams::zeros("c", 1);
        let z = childsum_combine(&state(&[0.4], &[0.0]), &state(&[0.7], &[0.0]), &p).unwrap();
        assert_eq!(z.c.as_slice(), &[0.0]);
        assert_eq!(z.h.as_slice(), &[0.0]);
        let out = childsum_combine(&state(&[0.0], &[1.0]), &state(&[0.0], &[0.0]), &p).unwrap();
        assert_abs_diff_eq!(out.c.as_slice()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.h.as_slice()[0], 0.5 * 0.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.h.as_slice()[0], 0.2311, epsilon = 1e-4);
    }

    #[test]
    fn childsum_swap_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..200 {
            let d = 1 + trial % 8;
            let mut cp = CombinerParams::zeros(CombineMethod::ChildSum, "c", d);
            randomize(cp.parameters_mut(), &mut rng);
            let CombinerParams::ChildSum(p) = cp else { unreachable!() };
            let (s1, s2) = (random_state(d, &mut rng), random_state(d, &mut rng));
            let a = childsum_combine(&s1, &s2, &p).unwrap();
            let b = childsum_combine(&s2, &s1, &p.swapped()).unwrap();
            assert_eq!(a, b, "trial {trial}");
        }
    }

    #[test]
    fn basic_cell_is_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cp = CombinerParams::Basic(BasicCombinerParams::zeros("c", 3));
        randomize(cp.parameters_mut(), &mut rng);
        let CombinerParams::Basic(p) = cp else { unreachable!() };
        let (s1, s2) = (random_state(3, &mut rng), random_state(3, &mut rng));
        let a = basic_combine(&s1, &s2, &p).unwrap();
        let b = basic_combine(&s2, &s1, &p).unwrap();
        assert_eq!(a.c, b.c);
    }

    #[test]
    fn dimension_mismatch() {
        let p = BasicCombinerParams::zeros("c", 2);
        assert!(basic_combine(&state(&[0.1], &[0.1]), &state(&[0.1, 0.2], &[0.1, 0.2]), &p).is_err());
        let q = ChildSumCombinerParams::zeros("c", 2);
        assert!(childsum_combine(&state(&[0.1], &[0.1]), &state(&[0.1], &[0.1]), &q).is_err());
        let e1 = StateStack::zeros(2, 2);
        let e2 = StateStack::zeros(1, 2);
        let ps = vec![CombinerParams::Basic(p.clone()), CombinerParams::Basic(p)];
        assert!(combine_stacks(&e1, &e2, &ps).is_err());
    }

    #[test]
    fn stacks_combine_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for method in [CombineMethod::Basic, CombineMethod::ChildSum] {
            let mut ps: Vec<CombinerParams> = (0..2)
                .map(|l| CombinerParams::zeros(method, &format!("c{l}"), 3))
                .collect();
            for p in ps.iter_mut() {
                randomize(p.parameters_mut(), &mut rng);
            }
            let e1 = StateStack {
                layers: vec![random_state(3, &mut rng), random_state(3, &mut rng)],
            };
            let e2 = StateStack {
                layers: vec![random_state(3, &mut rng), random_state(3, &mut rng)],
            };
            let out = combine_stacks(&e1, &e2, &ps).unwrap();
            for l in 0..2 {
                let (single, _) = combine_forward(&e1.layers[l], &e2.layers[l], &ps[l]).unwrap();
                assert_eq!(out.layers[l], single);
            }
            let one = combine_stacks(
                &StateStack { layers: vec![e1.layers[0].clone()] },
                &StateStack { layers: vec![e2.layers[0].clone()] },
                &ps[..1],
            )
            .unwrap();
            assert_eq!(one.layers[0], out.layers[0]);
        }
        let p = vec![CombinerParams::zeros(CombineMethod::Basic, "c", 2)];
        let s = StateStack {
            layers: vec![state(&[0.2, 0.4], &[0.3, -0.7])],
        };
        let doubled = combine_stacks(&s, &s, &p).unwrap();
        assert_eq!(doubled.layers[0].c.as_slice(), &[0.6, -1.4]);
    }

    #[test]
    fn gates_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mut cp = CombinerParams::zeros(CombineMethod::ChildSum, "c", 4);
            randomize(cp.parameters_mut(), &mut rng);
            let (_, cache) =
                combine_forward(&random_state(4, &mut rng), &random_state(4, &mut rng), &cp).unwrap();
            let CombineCache::ChildSum { i, f1, f2, o, u, .. } = cache else { unreachable!() };
            for g in [&i, &f1, &f2, &o] {
                assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(u.iter().all(|&v| v > -1.0 && v < 1.0));

            let mut bp = CombinerParams::zeros(CombineMethod::Basic, "c", 4);
            randomize(bp.parameters_mut(), &mut rng);
            let (s, _) =
                combine_forward(&random_state(4, &mut rng), &random_state(4, &mut rng), &bp).unwrap();
            assert!(s.h.as_slice().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    struct Fixture {
        comb: CombinerParams,
        inputs: Vec<Parameter>,
    }

    impl ParamSet for Fixture {
        fn parameters(&self) -> Vec<&Parameter> {
            let mut v = self.comb.parameters();
            v.extend(self.inputs.iter());
            v
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            let mut v = self.comb.parameters_mut();
            v.extend(self.inputs.iter_mut());
            v
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 4;
        for method in [CombineMethod::Basic, CombineMethod::ChildSum] {
            let mut fx = Fixture {
                comb: CombinerParams::zeros(method, "c", d),
                inputs: ["h1", "c1", "h2", "c2"]
                    .iter()
                    .map(|n| Parameter::zeros(*n, 1, d))
                    .collect(),
            };
            randomize(fx.parameters_mut(), &mut rng);
            let wh: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wc: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let states = |fx: &Fixture| {
                (
                    LayerState { h: fx.inputs[0].value.clone(), c: fx.inputs[1].value.clone() },
                    LayerState { h: fx.inputs[2].value.clone(), c: fx.inputs[3].value.clone() },
                )
            };
            let numeric = finite_difference_grad(&mut fx, 1e-5, |fx| {
                let (s1, s2) = states(fx);
                let (s, _) = combine_forward(&s1, &s2, &fx.comb)?;
                Ok(crate::numerics::dot(s.h.as_slice(), &wh) + crate::numerics::dot(s.c.as_slice(), &wc))
            })
            .unwrap();
            let (s1, s2) = states(&fx);
            let (_, cache) = combine_forward(&s1, &s2, &fx.comb).unwrap();
            let ((dh1, dc1), (dh2, dc2)) = combine_backward(&cache, &wh, &wc, &mut fx.comb);
            fx.inputs[0].grad = Tensor::vector(dh1);
            fx.inputs[1].grad = Tensor::vector(dc1);
            fx.inputs[2].grad = Tensor::vector(dh2);
            fx.inputs[3].grad = Tensor::vector(dc2);
            for (p, n) in fx.parameters().iter().zip(&numeric) {
                for (a, b) in p.grad.as_slice().iter().zip(n.as_slice()) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{method:?} {}: {a} vs {b}", p.name);
                }
            }
        }
    }
}
