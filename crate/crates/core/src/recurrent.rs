//! LSTM cells and the bidirectional recurrent head that emits one affine
//! transform per region from a single global feature vector.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::spatial::AffineParams;
use crate::tensor::{Real, Tensor};

/// Gate column blocks of the fused `4 * hidden` pre-activations.
const GATE_INPUT: usize = 0;
const GATE_FORGET: usize = 1;
const GATE_CANDIDATE: usize = 2;
const GATE_OUTPUT: usize = 3;

/// Indices of the rotation/skew entries of `θ`.
pub const SKEW_ENTRIES: [usize; 2] = [1, 3];

/// Initial head bias: identity scaled by 0.9, no translation.
pub const HEAD_BIAS_INIT: [f64; 6] = [0.9, 0.0, 0.0, 0.0, 0.9, 0.0];

/// Tape handles of one LSTM's weights. Gate columns are ordered input,
/// forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[input, 4 * hidden]`.
    pub wx: Var,
    /// `[hidden, 4 * hidden]`.
    pub wh: Var,
    /// `[4 * hidden]`.
    pub bias: Var,
    pub input: usize,
    pub hidden: usize,
}

/// Batched hidden and cell state, each `[batch, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<S: Real>(tape: &mut Tape<S>, batch: usize, hidden: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[batch, hidden]));
        let c = tape.constant(Tensor::zeros(&[batch, hidden]));
        Self { h, c }
    }
}

impl<S: Real> Tape<S> {
    /// One LSTM step on `[batch, input]` input.
    pub fn lstm_step(&mut self, p: &LstmParams, x: Var, state: &LstmState) -> Result<LstmState> {
        if self.shape(x).len() != 2 || self.shape(x)[1] != p.input {
            return Err(Error::dim(format!(
                "lstm_step input {:?} does not match input size {}",
                self.shape(x),
                p.input
            )));
        }
        let xw = self.matmul(x, p.wx)?;
        self.lstm_step_projected(p, xw, state)
    }

    /// [`Tape::lstm_step`] given the input projection `x * wx` already.
    fn lstm_step_projected(&mut self, p: &LstmParams, xw: Var, state: &LstmState) -> Result<LstmState> {
        for (v, what) in [(state.h, "hidden"), (state.c, "cell")] {
            if self.shape(v).len() != 2 || self.shape(v)[1] != p.hidden {
                return Err(Error::dim(format!(
                    "lstm_step {what} state {:?} does not match hidden size {}",
                    self.shape(v),
                    p.hidden
                )));
            }
        }
        let hw = self.matmul(state.h, p.wh)?;
        let pre = self.add(xw, hw)?;
        let pre = self.add_row_bias(pre, p.bias)?;
        let hidden = p.hidden;
        let block = |tape: &mut Self, gate: usize| tape.slice_cols(pre, gate * hidden, hidden);
        let i = block(self, GATE_INPUT)?;
        let i = self.sigmoid(i)?;
        let f = block(self, GATE_FORGET)?;
        let f = self.sigmoid(f)?;
        let g = block(self, GATE_CANDIDATE)?;
        let g = self.tanh(g)?;
        let o = block(self, GATE_OUTPUT)?;
        let o = self.sigmoid(o)?;
        let keep = self.mul(f, state.c)?;
        let write = self.mul(i, g)?;
        let c = self.add(keep, write)?;
        let tc = self.tanh(c)?;
        let h = self.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Runs both directions of a BLSTM for `steps` steps with the same input
/// `c` each step. Returns `[batch, 2 * hidden]` per step, forward state
/// first.
pub fn blstm_constant_input<S: Real>(
    tape: &mut Tape<S>,
    c: Var,
    steps: usize,
    forward: &LstmParams,
    backward: &LstmParams,
) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(Error::contract("the recurrence needs at least one step"));
    }
    let batch = tape.shape(c)[0];
    let run = |tape: &mut Tape<S>, p: &LstmParams| -> Result<Vec<Var>> {
        if tape.shape(c).len() != 2 || tape.shape(c)[1] != p.input {
            return Err(Error::dim(format!(
                "recurrent input {:?} does not match input size {}",
                tape.shape(c),
                p.input
            )));
        }
        let xw = tape.matmul(c, p.wx)?;
        let mut state = LstmState::zeros(tape, batch, p.hidden);
        let mut hs = Vec::with_capacity(steps);
        for _ in 0..steps {
            state = tape.lstm_step_projected(p, xw, &state)?;
            hs.push(state.h);
        }
        Ok(hs)
    };
    let fwd = run(tape, forward)?;
    let mut bwd = run(tape, backward)?;
    bwd.reverse();
    fwd.iter().zip(&bwd).map(|(&f, &b)| tape.concat_cols(&[f, b])).collect()
}

/// Predicts `n_regions` affine transforms per sample from `[batch, features]`
/// global features. The result is `[batch * n_regions, 6]` with row
/// `i * n_regions + n` holding region `n` of sample `i`. With
/// `rotation_skew_off`, entries 1 and 3 are multiplied by an exact zero mask.
#[allow(clippy::too_many_arguments)]
pub fn predict_affine_sequence<S: Real>(
    tape: &mut Tape<S>,
    conv_feat: Var,
    n_regions: usize,
    forward: &LstmParams,
    backward: &LstmParams,
    head_w: Var,
    head_b: Var,
    rotation_skew_off: bool,
) -> Result<Var> {
    if n_regions == 0 {
        return Err(Error::contract("n_regions must be at least 1"));
    }
    let states = blstm_constant_input(tape, conv_feat, n_regions, forward, backward)?;
    let mut thetas = Vec::with_capacity(n_regions);
    for h in states {
        let t = tape.matmul(h, head_w)?;
        thetas.push(tape.add_row_bias(t, head_b)?);
    }
    let theta = tape.interleave_rows(&thetas)?;
    if !rotation_skew_off {
        return Ok(theta);
    }
    let rows = tape.shape(theta)[0];
    let mask = Tensor::from_fn(&[rows, 6], |i| if SKEW_ENTRIES.contains(&(i % 6)) { S::zero() } else { S::one() });
    tape.mul_const(theta, &mask)
}

/// Reads `[m, 6]` transform rows off the tape.
pub fn affine_rows<S: Real>(theta: &Tensor<S>) -> Vec<AffineParams> {
    theta
        .data()
        .chunks(6)
        .map(|r| {
            let mut t = [0.0; 6];
            for (d, s) in t.iter_mut().zip(r) {
                *d = s.to_f64_lossy();
            }
            AffineParams::new(t)
        })
        .collect()
}

/// Parameter ids of one LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    input: usize,
    hidden: usize,
}

impl LstmLayer {
    /// Xavier-uniform weights, forget-gate bias 1, other biases 0.
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = store.add(format!("{prefix}.wx"), xavier_uniform(&[input, 4 * hidden], input, hidden, rng));
        let wh = store.add(format!("{prefix}.wh"), xavier_uniform(&[hidden, 4 * hidden], hidden, hidden, rng));
        let b = Tensor::from_fn(&[4 * hidden], |i| {
            if i / hidden == GATE_FORGET {
                S::one()
            } else {
                S::zero()
            }
        });
        let bias = store.add(format!("{prefix}.bias"), b);
        Self { wx, wh, bias, input, hidden }
    }

    pub fn bind(&self, bound: &Bound) -> LstmParams {
        LstmParams {
            wx: bound.var(self.wx),
            wh: bound.var(self.wh),
            bias: bound.var(self.bias),
            input: self.input,
            hidden: self.hidden,
        }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }
}

/// BLSTM plus the shared dense layer mapping each step to `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineHead {
    forward: LstmLayer,
    backward: LstmLayer,
    w: ParamId,
    b: ParamId,
    rotation_skew_off: bool,
}

impl AffineHead {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rotation_skew_off: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let forward = LstmLayer::new(store, &format!("{prefix}.blstm.fwd"), input, hidden, rng);
        let backward = LstmLayer::new(store, &format!("{prefix}.blstm.bwd"), input, hidden, rng);
        let w = store.add(format!("{prefix}.dense.w"), Tensor::zeros(&[2 * hidden, 6]));
        let b = store.add(format!("{prefix}.dense.b"), Tensor::from_f64(&[6], &HEAD_BIAS_INIT).expect("bias shape"));
        Self { forward, backward, w, b, rotation_skew_off }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, bound: &Bound, feat: Var, n_regions: usize) -> Result<Var> {
        predict_affine_sequence(
            tape,
            feat,
            n_regions,
            &self.forward.bind(bound),
            &self.backward.bind(bound),
            bound.var(self.w),
            bound.var(self.b),
            self.rotation_skew_off,
        )
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        2 * LstmLayer::param_count(input, hidden) + 2 * hidden * 6 + 6
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_lstm(tape: &mut Tape<f64>, input: usize, hidden: usize, seed: u64) -> LstmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = LstmLayer::new(&mut store, "l", input, hidden, &mut rng);
        // nonzero biases everywhere
        let bias = store.get_mut(store.find("l.bias").unwrap());
        *bias = crate::params::uniform(&[4 * hidden], 0.5, &mut rng);
        let bound = store.bind(tape, true);
        layer.bind(&bound)
    }

    #[test]
    fn zero_network_keeps_hidden_zero() {
        let mut tape = Tape::<f64>::new();
        let p = LstmParams {
            wx: tape.constant(Tensor::zeros(&[3, 8])),
            wh: tape.constant(Tensor::zeros(&[2, 8])),
            bias: tape.constant(Tensor::zeros(&[8])),
            input: 3,
            hidden: 2,
        };
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[5.0, -2.0, 7.0]).unwrap());
        let mut s = LstmState::zeros(&mut tape, 1, 2);
        for _ in 0..3 {
            s = tape.lstm_step(&p, x, &s).unwrap();
        }
        assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_cell() {
        let mut tape = Tape::<f64>::new();
        let h = 2;
        let bias = Tensor::from_fn(&[4 * h], |i| match i / h {
            GATE_INPUT => -50.0,
            GATE_FORGET => 50.0,
            _ => 0.0,
        });
        let p = LstmParams {
            wx: tape.constant(Tensor::zeros(&[1, 4 * h])),
            wh: tape.constant(Tensor::zeros(&[h, 4 * h])),
            bias: tape.constant(bias),
            input: 1,
            hidden: h,
        };
        let x = tape.constant(Tensor::full(&[1, 1], 1.0));
        let mut s = LstmState {
            h: tape.constant(Tensor::zeros(&[1, h])),
            c: tape.constant(Tensor::from_f64(&[1, h], &[0.7, -0.3]).unwrap()),
        };
        for _ in 0..5 {
            s = tape.lstm_step(&p, x, &s).unwrap();
        }
        let c = tape.value(s.c).data();
        assert!((c[0] - 0.7).abs() < 1e-12 && (c[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = random_lstm(&mut tape, 3, 2, 1);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let s = LstmState::zeros(&mut tape, 1, 2);
        assert!(matches!(tape.lstm_step(&p, x, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn bias_only_head_gives_identity() {
        let mut tape = Tape::<f64>::new();
        let fwd = random_lstm(&mut tape, 4, 3, 2);
        let bwd = random_lstm(&mut tape, 4, 3, 3);
        let w = tape.constant(Tensor::zeros(&[6, 6]));
        let b = tape.constant(Tensor::from_f64(&[6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let c = tape.constant(Tensor::full(&[2, 4], 0.3));
        let theta = predict_affine_sequence(&mut tape, c, 3, &fwd, &bwd, w, b, true).unwrap();
        for a in affine_rows(tape.value(theta)) {
            assert_eq!(a, AffineParams::IDENTITY);
        }
    }

    #[test]
    fn regions_get_distinct_transforms_and_exact_mask() {
        let mut tape = Tape::<f64>::new();
        let fwd = random_lstm(&mut tape, 4, 3, 4);
        let bwd = random_lstm(&mut tape, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = tape.variable(crate::params::uniform(&[6, 6], 1.0, &mut rng));
        let b = tape.variable(Tensor::zeros(&[6]));
        let c = tape.constant(crate::params::uniform(&[1, 4], 1.0, &mut rng));
        let theta = predict_affine_sequence(&mut tape, c, 2, &fwd, &bwd, w, b, true).unwrap();
        let rows = affine_rows(tape.value(theta));
        assert_ne!(rows[0], rows[1]);
        for r in &rows {
            assert_eq!(r.theta[1], 0.0);
            assert_eq!(r.theta[3], 0.0);
        }
        // gradient through the masked entries is exactly zero
        let s = tape.sum(theta).unwrap();
        let g = tape.backward(s).unwrap();
        let gb = g.get(b).unwrap();
        assert_eq!(gb[1], 0.0);
        assert_eq!(gb[3], 0.0);
        assert_ne!(gb[0], 0.0);
    }

    #[test]
    fn zero_regions_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let fwd = random_lstm(&mut tape, 2, 2, 6);
        let bwd = random_lstm(&mut tape, 2, 2, 7);
        let w = tape.constant(Tensor::zeros(&[4, 6]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let c = tape.constant(Tensor::zeros(&[1, 2]));
        let r = predict_affine_sequence(&mut tape, c, 0, &fwd, &bwd, w, b, true);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn one_step_reverse_equals_forward() {
        let mut tape = Tape::<f64>::new();
        let p = random_lstm(&mut tape, 3, 2, 8);
        let c = tape.constant(Tensor::full(&[1, 3], 0.4));
        let out = blstm_constant_input(&mut tape, c, 1, &p, &p).unwrap();
        let v = tape.value(out[0]).data();
        assert_eq!(tape.shape(out[0]), &[1, 4]);
        assert_eq!(&v[..2], &v[2..]);
    }
}
