//! Layers shared by the three networks.
//!
//! All layers are batched: activations are `B x n` tensors with one row per
//! sequence. Sequences of different lengths are padded; padded steps are
//! handled with row masks so every row computes exactly what it would
//! compute alone.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(out_dim, in_dim, in_dim, out_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, b.var(self.weight), Some(b.var(self.bias)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(batch, hidden)),
            c: tape.constant(Tensor::zeros(batch, hidden)),
        }
    }

    /// Rows with `keep_new` set take `self`, the rest keep `old`.
    pub fn masked(self, tape: &mut Tape<'_>, old: LstmState, keep_new: &[bool]) -> Result<Self> {
        Ok(LstmState {
            h: tape.mask_rows(self.h, old.h, keep_new)?,
            c: tape.mask_rows(self.c, old.c, keep_new)?,
        })
    }
}

/// One LSTM layer. Gate blocks in the fused weight are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = input + hidden;
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(4 * hidden, fan_in, fan_in, hidden, rng),
        );
        let mut bias = Tensor::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), bias);
        LstmCell {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, b: &Binding, x: Var, state: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let [bx, dx] = tape.shape(x);
        let [bh, dh] = tape.shape(state.h);
        if dx != self.input || dh != h || bx != bh || tape.shape(state.c) != [bh, h] {
            return Err(Error::Shape {
                op: "lstm_step",
                left: [bx, dx],
                right: [bh, dh],
            });
        }
        let xh = tape.concat_cols(&[x, state.h])?;
        let pre = tape.linear(xh, b.var(self.weight), Some(b.var(self.bias)))?;
        let i = tape.slice_cols(pre, 0, h)?;
        let f = tape.slice_cols(pre, h, h)?;
        let g = tape.slice_cols(pre, 2 * h, h)?;
        let o = tape.slice_cols(pre, 3 * h, h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Output of a bidirectional pass over a padded batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `(B·M) x 2H`; row `g·M + j` is position `j` of sequence `g`.
    pub annotations: Var,
    /// Forward state after each sequence's last real token.
    pub forward_final: LstmState,
    /// Backward state after reading back to position 0.
    pub backward_final: LstmState,
    /// `B·M` flags, true for real (unpadded) positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiLstm {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// `steps[j]` is the `B x d` input at position `j`; `valid[j][g]` says
    /// whether sequence `g` has a real token there. Every sequence must have
    /// at least one real token and real tokens must form a prefix.
    pub fn encode(&self, tape: &mut Tape<'_>, b: &Binding, steps: &[Var], valid: &[Vec<bool>]) -> Result<Encoded> {
        let m = steps.len();
        if m == 0 {
            return Err(Error::EmptySequence("bilstm_encode"));
        }
        let batch = tape.shape(steps[0])[0];
        if valid.len() != m || valid.iter().any(|v| v.len() != batch) {
            return Err(Error::invalid("validity mask does not match the batch"));
        }
        if (0..batch).any(|g| !valid[0][g]) {
            return Err(Error::EmptySequence("bilstm_encode"));
        }
        let hidden = self.forward.hidden;

        let mut fwd = Vec::with_capacity(m);
        let mut state = LstmState::zeros(tape, batch, hidden);
        for j in 0..m {
            let next = self.forward.step(tape, b, steps[j], state)?;
            state = next.masked(tape, state, &valid[j])?;
            fwd.push(state.h);
        }
        let forward_final = state;

        let mut bwd = vec![None; m];
        let mut state = LstmState::zeros(tape, batch, hidden);
        for j in (0..m).rev() {
            let next = self.backward.step(tape, b, steps[j], state)?;
            state = next.masked(tape, state, &valid[j])?;
            bwd[j] = Some(state.h);
        }
        let backward_final = state;

        let mut parts = Vec::with_capacity(2 * m);
        for j in 0..m {
            parts.push(fwd[j]);
            parts.push(bwd[j].expect("filled"));
        }
        let wide = tape.concat_cols(&parts)?;
        let annotations = tape.reshape(wide, batch * m, 2 * hidden)?;
        let mut mask = Vec::with_capacity(batch * m);
        for g in 0..batch {
            mask.extend((0..m).map(|j| valid[j][g]));
        }
        Ok(Encoded {
            annotations,
            forward_final,
            backward_final,
            mask,
            batch,
            len: m,
        })
    }

    /// Single unpadded sequence: `M x d` in, `M x 2H` annotations out.
    pub fn encode_sequence(&self, tape: &mut Tape<'_>, b: &Binding, embedded: Var) -> Result<Var> {
        let m = tape.shape(embedded)[0];
        let steps = (0..m)
            .map(|j| tape.gather_rows(embedded, &[j]))
            .collect::<Result<Vec<_>>>()?;
        let valid = vec![vec![true]; m];
        Ok(self.encode(tape, b, &steps, &valid)?.annotations)
    }
}

/// Additive attention: `e_j = vᵀ tanh(W_s s + W_h a_j)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_query: ParamId,
    pub w_ann: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, query: usize, annotation: usize, dim: usize, rng: &mut Rng) -> Self {
        Attention {
            w_query: store.add(format!("{name}.w_query"), glorot_uniform(dim, query, query, dim, rng)),
            w_ann: store.add(
                format!("{name}.w_ann"),
                glorot_uniform(dim, annotation, annotation, dim, rng),
            ),
            v: store.add(format!("{name}.v"), glorot_uniform(dim, 1, dim, 1, rng)),
            dim,
        }
    }

    /// Projected annotations `W_h a_j`, computed once per source batch.
    pub fn keys(&self, tape: &mut Tape<'_>, b: &Binding, annotations: Var) -> Result<Var> {
        tape.linear(annotations, b.var(self.w_ann), None)
    }

    /// Returns `(context B x 2H, weights B x M)`.
    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        query: Var,
        keys: Var,
        annotations: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let batch = tape.shape(query)[0];
        let rows = tape.shape(keys)[0];
        if batch == 0 || rows % batch != 0 || mask.len() != rows {
            return Err(Error::Shape {
                op: "attend",
                left: tape.shape(query),
                right: tape.shape(keys),
            });
        }
        let q = tape.linear(query, b.var(self.w_query), None)?;
        let e = tape.add_group_broadcast(keys, q)?;
        let e = tape.tanh(e);
        let scores = tape.matmul(e, b.var(self.v))?;
        let scores = tape.reshape(scores, batch, rows / batch)?;
        let weights = tape.masked_softmax(scores, mask)?;
        let context = tape.group_weighted_sum(weights, annotations)?;
        Ok((context, weights))
    }
}

/// Inverted dropout. Identity when not training or when `p == 0`.
pub fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let n = tape.value(x).len();
    let factor = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, factor)
}
