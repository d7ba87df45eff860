//! The captioner (image → pivot), the attention translator (pivot → target)
//! and the target-side autoencoder.
//!
//! Each model exposes a single-step decoder function. Teacher-forced
//! forwards are loops over that same function, so training and decoding
//! run identical arithmetic.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, Attention, BiLstm, Linear, LstmCell, LstmState};
use crate::params::{uniform, Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::{TokenSeq, PAD};

/// Layer widths. Embeddings and hidden states share one width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub width: usize,
    pub attention: usize,
    pub image_feature: usize,
}

impl ModelDims {
    /// Desk-scale defaults.
    pub const TOY: ModelDims = ModelDims {
        width: 64,
        attention: 64,
        image_feature: 64,
    };

    /// Widths of the full-size system: 512-wide layers over 2048-d pooled
    /// image features.
    pub const FULL: ModelDims = ModelDims {
        width: 512,
        attention: 512,
        image_feature: 2048,
    };
}

/// Which matrix stands for a model's word vectors in an alignment term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieSite {
    /// Rows of the decoder output projection.
    OutputProjection,
    /// The decoder's input embedding table.
    InputEmbedding,
}

const EMBED_INIT: f64 = 0.1;

/// Dropout switch threaded through forwards.
pub struct Dropout<'a> {
    inner: Option<(f64, &'a mut Rng)>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { inner: None }
    }

    pub fn on(rate: f64, rng: &'a mut Rng) -> Self {
        Dropout {
            inner: Some((rate, rng)),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match &mut self.inner {
            None => Ok(x),
            Some((rate, rng)) => dropout(tape, x, *rate, true, rng),
        }
    }
}

/// Teacher-forcing layout of framed sequences, padded to a common length.
/// Step `t` feeds `inputs[t]` and scores `targets` rows `t·B..(t+1)·B`.
#[derive(Clone, Debug)]
pub struct DecoderBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
}

impl DecoderBatch {
    pub fn new(seqs: &[&TokenSeq]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence("decoder batch"));
        }
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::EmptySequence("decoder batch"));
        }
        let mut inputs = vec![vec![PAD; batch]; steps];
        let mut targets = vec![PAD as usize; steps * batch];
        let mut mask = vec![false; steps * batch];
        for (g, s) in seqs.iter().enumerate() {
            for (t, (&i, &o)) in s.inputs().iter().zip(s.targets()).enumerate() {
                inputs[t][g] = i;
                targets[t * batch + g] = o as usize;
                mask[t * batch + g] = true;
            }
        }
        Ok(DecoderBatch {
            inputs,
            targets,
            mask,
            batch,
        })
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

/// Encoder layout: content tokens padded to a common length.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    pub tokens: Vec<Vec<u32>>,
    pub valid: Vec<Vec<bool>>,
    pub batch: usize,
}

impl EncoderBatch {
    pub fn new(seqs: &[&[u32]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySequence("encoder batch"));
        }
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = vec![vec![PAD; batch]; len];
        let mut valid = vec![vec![false; batch]; len];
        for (g, s) in seqs.iter().enumerate() {
            for (j, &tok) in s.iter().enumerate() {
                tokens[j][g] = tok;
                valid[j][g] = true;
            }
        }
        Ok(EncoderBatch {
            tokens,
            valid,
            batch,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn ids(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

fn embedding(store: &mut ParamStore, name: String, vocab: usize, width: usize, rng: &mut Rng) -> ParamId {
    store.add(name, uniform(vocab, width, EMBED_INIT, rng))
}

/// Image → pivot caption decoder. The projected image feature is the first
/// decoder input; token embeddings follow from BOS on.
#[derive(Clone, Debug)]
pub struct Captioner {
    pub store: ParamStore,
    pub img_proj: Linear,
    pub decoder: LstmCell,
    pub in_emb: ParamId,
    pub out_proj: Linear,
    pub vocab_size: usize,
    pub dims: ModelDims,
}

impl Captioner {
    pub fn new(vocab_size: usize, dims: ModelDims, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let w = dims.width;
        let img_proj = Linear::new(&mut store, "captioner.img_proj", dims.image_feature, w, rng);
        let decoder = LstmCell::new(&mut store, "captioner.decoder", w, w, rng);
        let in_emb = embedding(&mut store, "captioner.in_emb".into(), vocab_size, w, rng);
        let out_proj = Linear::new(&mut store, "captioner.out_proj", w, vocab_size, rng);
        Captioner {
            store,
            img_proj,
            decoder,
            in_emb,
            out_proj,
            vocab_size,
            dims,
        }
    }

    /// Word-vector matrix used by alignment terms.
    pub fn tie_matrix(&self, site: TieSite) -> ParamId {
        match site {
            TieSite::OutputProjection => self.out_proj.weight,
            TieSite::InputEmbedding => self.in_emb,
        }
    }

    /// Consumes the image features `B x D_img` from a zero state.
    pub fn init_state(&self, tape: &mut Tape<'_>, b: &Binding, feats: Var, drop: &mut Dropout<'_>) -> Result<LstmState> {
        let batch = tape.shape(feats)[0];
        let x = self.img_proj.forward(tape, b, feats)?;
        let x = drop.apply(tape, x)?;
        let zero = LstmState::zeros(tape, batch, self.dims.width);
        self.decoder.step(tape, b, x, zero)
    }

    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        prev: &[u32],
        state: LstmState,
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, LstmState)> {
        let x = tape.gather_rows(b.var(self.in_emb), &ids(prev))?;
        let x = drop.apply(tape, x)?;
        let state = self.decoder.step(tape, b, x, state)?;
        let h = drop.apply(tape, state.h)?;
        let logits = self.out_proj.forward(tape, b, h)?;
        Ok((logits, state))
    }

    /// Logits `(T·B) x V`, row `t·B + g` scoring `batch.targets` at the same row.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        feats: Var,
        batch: &DecoderBatch,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if tape.shape(feats)[0] != batch.batch {
            return Err(Error::Shape {
                op: "captioner_forward",
                left: tape.shape(feats),
                right: [batch.batch, batch.steps()],
            });
        }
        let mut state = self.init_state(tape, b, feats, drop)?;
        let mut rows = Vec::with_capacity(batch.steps());
        for prev in &batch.inputs {
            let (logits, next) = self.step(tape, b, prev, state, drop)?;
            rows.push(logits);
            state = next;
        }
        tape.concat_rows(&rows)
    }

    /// One image, one framed caption: logits `M x V` where row `t` scores
    /// `x.targets()[t]`.
    pub fn forward(&self, tape: &mut Tape<'_>, b: &Binding, feat: Var, x: &TokenSeq) -> Result<Var> {
        let batch = DecoderBatch::new(&[x])?;
        self.forward_batch(tape, b, feat, &batch, &mut Dropout::off())
    }
}

/// Encoder output prepared for attention.
#[derive(Clone, Debug)]
pub struct SourceEncoding {
    pub annotations: Var,
    pub keys: Var,
    pub mask: Vec<bool>,
    pub init: LstmState,
}

/// Bidirectional-LSTM encoder, additive attention, LSTM decoder whose input
/// is the previous target embedding concatenated with the attention context.
#[derive(Clone, Debug)]
pub struct Translator {
    pub store: ParamStore,
    pub enc_emb: ParamId,
    pub encoder: BiLstm,
    pub attention: Attention,
    pub decoder: LstmCell,
    pub dec_in_emb: ParamId,
    pub out_proj: Linear,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dims: ModelDims,
}

impl Translator {
    pub fn new(src_vocab: usize, tgt_vocab: usize, dims: ModelDims, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let w = dims.width;
        let enc_emb = embedding(&mut store, "translator.enc_emb".into(), src_vocab, w, rng);
        let encoder = BiLstm::new(&mut store, "translator.encoder", w, w, rng);
        let attention = Attention::new(&mut store, "translator.attention", w, 2 * w, dims.attention, rng);
        let decoder = LstmCell::new(&mut store, "translator.decoder", 3 * w, w, rng);
        let dec_in_emb = embedding(&mut store, "translator.dec_in_emb".into(), tgt_vocab, w, rng);
        let out_proj = Linear::new(&mut store, "translator.out_proj", w, tgt_vocab, rng);
        Translator {
            store,
            enc_emb,
            encoder,
            attention,
            decoder,
            dec_in_emb,
            out_proj,
            src_vocab,
            tgt_vocab,
            dims,
        }
    }

    /// Target-side word vectors for the target alignment term.
    pub fn target_tie_matrix(&self, site: TieSite) -> ParamId {
        match site {
            TieSite::OutputProjection => self.out_proj.weight,
            TieSite::InputEmbedding => self.dec_in_emb,
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_>, b: &Binding, src: &EncoderBatch) -> Result<SourceEncoding> {
        let steps = src
            .tokens
            .iter()
            .map(|col| tape.gather_rows(b.var(self.enc_emb), &ids(col)))
            .collect::<Result<Vec<_>>>()?;
        let enc = self.encoder.encode(tape, b, &steps, &src.valid)?;
        let keys = self.attention.keys(tape, b, enc.annotations)?;
        let init = LstmState {
            h: tape.add(enc.forward_final.h, enc.backward_final.h)?,
            c: tape.add(enc.forward_final.c, enc.backward_final.c)?,
        };
        Ok(SourceEncoding {
            annotations: enc.annotations,
            keys,
            mask: enc.mask,
            init,
        })
    }

    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        enc: &SourceEncoding,
        prev: &[u32],
        state: LstmState,
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, LstmState)> {
        let (context, _) = self
            .attention
            .attend(tape, b, state.h, enc.keys, enc.annotations, &enc.mask)?;
        let emb = tape.gather_rows(b.var(self.dec_in_emb), &ids(prev))?;
        let emb = drop.apply(tape, emb)?;
        let x = tape.concat_cols(&[emb, context])?;
        let state = self.decoder.step(tape, b, x, state)?;
        let h = drop.apply(tape, state.h)?;
        let logits = self.out_proj.forward(tape, b, h)?;
        Ok((logits, state))
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        src: &EncoderBatch,
        tgt: &DecoderBatch,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if src.batch != tgt.batch {
            return Err(Error::invalid("source and target batch sizes differ"));
        }
        let enc = self.encode(tape, b, src)?;
        let mut state = enc.init;
        let mut rows = Vec::with_capacity(tgt.steps());
        for prev in &tgt.inputs {
            let (logits, next) = self.step(tape, b, &enc, prev, state, drop)?;
            rows.push(logits);
            state = next;
        }
        tape.concat_rows(&rows)
    }

    /// One source sentence (content tokens), one framed target.
    pub fn forward(&self, tape: &mut Tape<'_>, b: &Binding, x: &[u32], y: &TokenSeq) -> Result<Var> {
        let src = EncoderBatch::new(&[x])?;
        let tgt = DecoderBatch::new(&[y])?;
        self.forward_batch(tape, b, &src, &tgt, &mut Dropout::off())
    }
}

/// Sentence autoencoder: an LSTM reads the sentence, its final state seeds
/// an LSTM decoder that reproduces it.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub store: ParamStore,
    pub emb: ParamId,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub out_proj: Linear,
    pub vocab_size: usize,
    pub dims: ModelDims,
}

impl Autoencoder {
    pub fn new(vocab_size: usize, dims: ModelDims, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let w = dims.width;
        let emb = embedding(&mut store, "autoencoder.emb".into(), vocab_size, w, rng);
        let encoder = LstmCell::new(&mut store, "autoencoder.encoder", w, w, rng);
        let decoder = LstmCell::new(&mut store, "autoencoder.decoder", w, w, rng);
        let out_proj = Linear::new(&mut store, "autoencoder.out_proj", w, vocab_size, rng);
        Autoencoder {
            store,
            emb,
            encoder,
            decoder,
            out_proj,
            vocab_size,
            dims,
        }
    }

    pub fn tie_matrix(&self, site: TieSite) -> ParamId {
        match site {
            TieSite::OutputProjection => self.out_proj.weight,
            TieSite::InputEmbedding => self.emb,
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_>, b: &Binding, src: &EncoderBatch) -> Result<LstmState> {
        let mut state = LstmState::zeros(tape, src.batch, self.dims.width);
        for (col, valid) in src.tokens.iter().zip(&src.valid) {
            let x = tape.gather_rows(b.var(self.emb), &ids(col))?;
            let next = self.encoder.step(tape, b, x, state)?;
            state = next.masked(tape, state, valid)?;
        }
        Ok(state)
    }

    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        prev: &[u32],
        state: LstmState,
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, LstmState)> {
        let x = tape.gather_rows(b.var(self.emb), &ids(prev))?;
        let x = drop.apply(tape, x)?;
        let state = self.decoder.step(tape, b, x, state)?;
        let h = drop.apply(tape, state.h)?;
        let logits = self.out_proj.forward(tape, b, h)?;
        Ok((logits, state))
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        src: &EncoderBatch,
        tgt: &DecoderBatch,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let mut state = self.encode(tape, b, src)?;
        let mut rows = Vec::with_capacity(tgt.steps());
        for prev in &tgt.inputs {
            let (logits, next) = self.step(tape, b, prev, state, drop)?;
            rows.push(logits);
            state = next;
        }
        tape.concat_rows(&rows)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Binding, y: &TokenSeq) -> Result<Var> {
        let src = EncoderBatch::new(&[y.content()])?;
        let tgt = DecoderBatch::new(&[y])?;
        self.forward_batch(tape, b, &src, &tgt, &mut Dropout::off())
    }
}

/// Recurrent state of one hypothesis, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    fn stack(tape: &mut Tape<'_>, states: &[RecurrentState]) -> Result<LstmState> {
        let width = states.first().map_or(0, |s| s.h.len());
        let mut h = Vec::with_capacity(states.len() * width);
        let mut c = Vec::with_capacity(states.len() * width);
        for s in states {
            if s.h.len() != width || s.c.len() != width {
                return Err(Error::invalid("decoder states of unequal width"));
            }
            h.extend_from_slice(&s.h);
            c.extend_from_slice(&s.c);
        }
        Ok(LstmState {
            h: tape.constant(Tensor::from_vec(states.len(), width, h)?),
            c: tape.constant(Tensor::from_vec(states.len(), width, c)?),
        })
    }

    fn unstack(tape: &Tape<'_>, state: LstmState) -> Vec<RecurrentState> {
        let (h, c) = (tape.value(state.h), tape.value(state.c));
        (0..h.rows())
            .map(|r| RecurrentState {
                h: h.row(r).to_vec(),
                c: c.row(r).to_vec(),
            })
            .collect()
    }
}

fn log_probs(tape: &mut Tape<'_>, logits: Var) -> Result<Vec<Vec<f64>>> {
    let lp = tape.log_softmax(logits)?;
    let t = tape.value(lp);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// A next-token distribution over a batch of hypotheses.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> Result<Self::State>;

    /// For each `(state, previous token)` pair, returns the log-probabilities
    /// of the next token and the successor state.
    fn step(&self, states: &[Self::State], prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

fn check_step_args<S>(states: &[S], prev: &[u32]) -> Result<()> {
    if states.is_empty() || states.len() != prev.len() {
        return Err(Error::invalid(format!(
            "step given {} states and {} tokens",
            states.len(),
            prev.len()
        )));
    }
    Ok(())
}

/// Captioner conditioned on one image, for decoding.
pub struct CaptionerDecoder<'m> {
    model: &'m Captioner,
    feat: Tensor,
}

impl<'m> CaptionerDecoder<'m> {
    pub fn new(model: &'m Captioner, feat: &[f64]) -> Result<Self> {
        if feat.len() != model.dims.image_feature {
            return Err(Error::Shape {
                op: "captioner feature",
                left: [1, feat.len()],
                right: [1, model.dims.image_feature],
            });
        }
        Ok(CaptionerDecoder {
            model,
            feat: Tensor::row_vector(feat.to_vec()),
        })
    }
}

impl StepModel for CaptionerDecoder<'_> {
    type State = RecurrentState;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn initial_state(&self) -> Result<RecurrentState> {
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let f = tape.constant_ref(&self.feat);
        let s = self.model.init_state(&mut tape, &b, f, &mut Dropout::off())?;
        Ok(RecurrentState::unstack(&tape, s).remove(0))
    }

    fn step(&self, states: &[RecurrentState], prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<RecurrentState>)> {
        check_step_args(states, prev)?;
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let s = RecurrentState::stack(&mut tape, states)?;
        let (logits, next) = self.model.step(&mut tape, &b, prev, s, &mut Dropout::off())?;
        Ok((log_probs(&mut tape, logits)?, RecurrentState::unstack(&tape, next)))
    }
}

/// Translator conditioned on one encoded source sentence, for decoding.
pub struct TranslatorDecoder<'m> {
    model: &'m Translator,
    annotations: Tensor,
    keys: Tensor,
    init: RecurrentState,
}

impl<'m> TranslatorDecoder<'m> {
    /// `source` holds content tokens (no BOS/EOS).
    pub fn new(model: &'m Translator, source: &[u32]) -> Result<Self> {
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let src = EncoderBatch::new(&[source])?;
        let enc = model.encode(&mut tape, &b, &src)?;
        let init = RecurrentState::unstack(&tape, enc.init).remove(0);
        Ok(TranslatorDecoder {
            model,
            annotations: tape.value(enc.annotations).clone(),
            keys: tape.value(enc.keys).clone(),
            init,
        })
    }

    fn tiled(t: &Tensor, n: usize) -> Tensor {
        let mut data = Vec::with_capacity(t.len() * n);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(t.rows() * n, t.cols(), data).expect("tiled")
    }
}

impl StepModel for TranslatorDecoder<'_> {
    type State = RecurrentState;

    fn vocab_size(&self) -> usize {
        self.model.tgt_vocab
    }

    fn initial_state(&self) -> Result<RecurrentState> {
        Ok(self.init.clone())
    }

    fn step(&self, states: &[RecurrentState], prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<RecurrentState>)> {
        check_step_args(states, prev)?;
        let n = states.len();
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let enc = SourceEncoding {
            annotations: tape.constant(Self::tiled(&self.annotations, n)),
            keys: tape.constant(Self::tiled(&self.keys, n)),
            mask: vec![true; n * self.annotations.rows()],
            init: RecurrentState::stack(&mut tape, states)?,
        };
        let (logits, next) = self
            .model
            .step(&mut tape, &b, &enc, prev, enc.init, &mut Dropout::off())?;
        Ok((log_probs(&mut tape, logits)?, RecurrentState::unstack(&tape, next)))
    }
}

/// Autoencoder conditioned on one encoded sentence, for decoding.
pub struct AutoencoderDecoder<'m> {
    model: &'m Autoencoder,
    init: RecurrentState,
}

impl<'m> AutoencoderDecoder<'m> {
    pub fn new(model: &'m Autoencoder, source: &[u32]) -> Result<Self> {
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let src = EncoderBatch::new(&[source])?;
        let s = model.encode(&mut tape, &b, &src)?;
        Ok(AutoencoderDecoder {
            model,
            init: RecurrentState::unstack(&tape, s).remove(0),
        })
    }
}

impl StepModel for AutoencoderDecoder<'_> {
    type State = RecurrentState;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn initial_state(&self) -> Result<RecurrentState> {
        Ok(self.init.clone())
    }

    fn step(&self, states: &[RecurrentState], prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<RecurrentState>)> {
        check_step_args(states, prev)?;
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let s = RecurrentState::stack(&mut tape, states)?;
        let (logits, next) = self.model.step(&mut tape, &b, prev, s, &mut Dropout::off())?;
        Ok((log_probs(&mut tape, logits)?, RecurrentState::unstack(&tape, next)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::vocab::{BOS, EOS};

    const TINY: ModelDims = ModelDims {
        width: 8,
        attention: 8,
        image_feature: 6,
    };

    fn rng(label: &str) -> Rng {
        SeedStream::new(11).split(label).rng()
    }

    fn feat(seed: u64) -> Vec<f64> {
        (0..TINY.image_feature)
            .map(|i| ((i as u64 * 7 + seed) as f64 * 0.61).sin())
            .collect()
    }

    fn teacher_log_probs(tape: &mut Tape<'_>, logits: Var) -> Vec<Vec<f64>> {
        log_probs(tape, logits).unwrap()
    }

    fn stepped<M: StepModel<State = RecurrentState>>(m: &M, seq: &TokenSeq) -> Vec<Vec<f64>> {
        let mut state = vec![m.initial_state().unwrap()];
        let mut out = Vec::new();
        for &tok in seq.inputs() {
            let (lp, next) = m.step(&state, &[tok]).unwrap();
            out.push(lp.into_iter().next().unwrap());
            state = next;
        }
        out
    }

    #[test]
    fn captioner_step_matches_teacher_forcing_bitwise() {
        let m = Captioner::new(12, TINY, &mut rng("cap"));
        let y = TokenSeq::from_content(vec![4, 9, 5, 11]);
        let f = feat(1);
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        let fv = tape.constant(Tensor::row_vector(f.clone()));
        let logits = m.forward(&mut tape, &b, fv, &y).unwrap();
        let want = teacher_log_probs(&mut tape, logits);
        let got = stepped(&CaptionerDecoder::new(&m, &f).unwrap(), &y);
        assert_eq!(want, got);
    }

    #[test]
    fn translator_step_matches_teacher_forcing_bitwise() {
        let m = Translator::new(10, 13, TINY, &mut rng("nmt"));
        let x = [4u32, 7, 5];
        let y = TokenSeq::from_content(vec![6, 12, 4]);
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        let logits = m.forward(&mut tape, &b, &x, &y).unwrap();
        let want = teacher_log_probs(&mut tape, logits);
        let got = stepped(&TranslatorDecoder::new(&m, &x).unwrap(), &y);
        assert_eq!(want, got);
    }

    #[test]
    fn autoencoder_step_matches_teacher_forcing_bitwise() {
        let m = Autoencoder::new(9, TINY, &mut rng("ae"));
        let y = TokenSeq::from_content(vec![4, 8, 8, 5]);
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        let logits = m.forward(&mut tape, &b, &y).unwrap();
        let want = teacher_log_probs(&mut tape, logits);
        let got = stepped(&AutoencoderDecoder::new(&m, y.content()).unwrap(), &y);
        assert_eq!(want, got);
    }

    #[test]
    fn batched_step_equals_separate_steps() {
        let m = Translator::new(10, 13, TINY, &mut rng("nmt"));
        let d = TranslatorDecoder::new(&m, &[4, 5]).unwrap();
        let s0 = d.initial_state().unwrap();
        let (_, s1) = d.step(&[s0.clone()], &[BOS]).unwrap();
        let (both, _) = d.step(&[s0.clone(), s1[0].clone()], &[BOS, 7]).unwrap();
        let (a, _) = d.step(&[s0], &[BOS]).unwrap();
        let (b, _) = d.step(&s1, &[7]).unwrap();
        for (x, y) in both[0].iter().zip(&a[0]).chain(both[1].iter().zip(&b[0])) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_batch_rows_match_single_sequences() {
        let m = Translator::new(10, 13, TINY, &mut rng("nmt"));
        let xs: [&[u32]; 2] = [&[4, 7, 5], &[6]];
        let ys = [TokenSeq::from_content(vec![6, 12]), TokenSeq::from_content(vec![4, 5, 9, 10])];
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        let src = EncoderBatch::new(&xs).unwrap();
        let tgt = DecoderBatch::new(&[&ys[0], &ys[1]]).unwrap();
        let batched = m.forward_batch(&mut tape, &b, &src, &tgt, &mut Dropout::off()).unwrap();
        let batched = tape.value(batched).clone();
        for g in 0..2 {
            let single = m.forward(&mut tape, &b, xs[g], &ys[g]).unwrap();
            let single = tape.value(single).clone();
            for t in 0..single.rows() {
                for (x, y) in batched.row(t * 2 + g).iter().zip(single.row(t)) {
                    assert!((x - y).abs() < 1e-12, "row {t} of sequence {g}");
                }
            }
        }
        assert_eq!(tgt.mask.iter().filter(|&&m| m).count(), 3 + 5);
    }

    #[test]
    fn image_feature_conditions_the_caption_distribution() {
        let m = Captioner::new(12, TINY, &mut rng("cap"));
        let a = CaptionerDecoder::new(&m, &feat(1)).unwrap();
        let b = CaptionerDecoder::new(&m, &feat(2)).unwrap();
        let (la, _) = a.step(&[a.initial_state().unwrap()], &[BOS]).unwrap();
        let (lb, _) = b.step(&[b.initial_state().unwrap()], &[BOS]).unwrap();
        assert_ne!(la, lb);
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let m = Captioner::new(12, TINY, &mut rng("cap"));
        assert!(CaptionerDecoder::new(&m, &[0.0; 5]).is_err());
    }

    #[test]
    fn out_of_vocabulary_input_is_an_index_error() {
        let m = Autoencoder::new(9, TINY, &mut rng("ae"));
        let y = TokenSeq::from_content(vec![4, 9]);
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        assert!(matches!(m.forward(&mut tape, &b, &y), Err(Error::Index { .. })));
    }

    #[test]
    fn empty_source_is_rejected() {
        let m = Translator::new(10, 13, TINY, &mut rng("nmt"));
        assert!(TranslatorDecoder::new(&m, &[]).is_err());
        assert!(EncoderBatch::new(&[&[4], &[]]).is_err());
    }

    #[test]
    fn decoder_batch_layout() {
        let a = TokenSeq::from_content(vec![5]);
        let b = TokenSeq::from_content(vec![6, 7]);
        let batch = DecoderBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.inputs, vec![vec![BOS, BOS], vec![5, 6], vec![PAD, 7]]);
        assert_eq!(batch.targets, vec![5, 6, EOS as usize, 7, PAD as usize, EOS as usize]);
        assert_eq!(batch.mask, vec![true, true, true, true, false, true]);
    }
}
