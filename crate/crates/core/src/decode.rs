//! Greedy and beam-search decoding over a [`StepModel`], and the two-stage
//! image → pivot → target pipeline.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::models::{Captioner, CaptionerDecoder, Translator, TranslatorDecoder};
pub use crate::models::StepModel;
use crate::vocab::{TokenSeq, Vocab, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Most tokens generated after BOS, the closing EOS included.
    pub max_len: usize,
}

impl BeamConfig {
    pub const CAPTIONER: BeamConfig = BeamConfig { beam: 5, max_len: 16 };
    pub const TRANSLATOR: BeamConfig = BeamConfig { beam: 10, max_len: 20 };

    fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::invalid(format!(
                "beam size {} and max length {} must be positive",
                self.beam, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
    pub state: S,
}

/// A decoded sequence. `truncated` marks output that never emitted EOS
/// within the length limit.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub seq: TokenSeq,
    pub score: f64,
    pub truncated: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_row(row: &[f64], vocab: usize) -> Result<()> {
    if row.len() != vocab {
        return Err(Error::invalid(format!(
            "step returned {} log-probabilities for a vocabulary of {vocab}",
            row.len()
        )));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("decoder log-probabilities".into()));
    }
    Ok(())
}

/// Arg-max token at every step (lowest id on ties) until EOS or `max_len`.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::invalid("max length must be positive"));
    }
    let mut state = model.initial_state()?;
    let mut tokens = vec![BOS];
    let mut score = 0.0;
    for _ in 0..max_len {
        let (rows, mut next) = model.step(std::slice::from_ref(&state), &[*tokens.last().unwrap()])?;
        check_row(&rows[0], model.vocab_size())?;
        let w = argmax(&rows[0]);
        score += rows[0][w];
        tokens.push(w as u32);
        if w as u32 == EOS {
            return Ok(Decoded {
                seq: TokenSeq::from_framed(tokens)?,
                score,
                truncated: false,
            });
        }
        state = next.swap_remove(0);
    }
    Ok(Decoded {
        seq: TokenSeq::from_framed(tokens)?,
        score,
        truncated: true,
    })
}

/// Higher score first; equal scores prefer the lexicographically smaller
/// token sequence, which puts lower ids and then shorter sequences first.
fn rank(a_score: f64, a_tokens: &[u32], b_score: f64, b_tokens: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search on raw cumulative log-probability.
///
/// Every live hypothesis is expanded by the full vocabulary and candidates
/// are ranked by score (ties: lower token id, then earlier parent). EOS
/// candidates ranked above the `beam`-th unfinished one enter the completed
/// pool; the rest refill the beam. Search stops at `max_len` or once the
/// best completed score is at least the best live score, since further
/// tokens can only lower a score.
pub fn beam_search<M: StepModel>(model: &M, cfg: BeamConfig) -> Result<Decoded> {
    cfg.validate()?;
    let vocab = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
        state: model.initial_state()?,
    }];
    let mut completed: Vec<Hypothesis<()>> = Vec::new();

    for _ in 0..cfg.max_len {
        let states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
        let prev: Vec<u32> = live.iter().map(|h| *h.tokens.last().unwrap()).collect();
        let (rows, next_states) = model.step(&states, &prev)?;
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * vocab);
        for (i, row) in rows.iter().enumerate() {
            check_row(row, vocab)?;
            cands.extend(row.iter().enumerate().map(|(w, &lp)| (live[i].score + lp, w as u32, i)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut beam = Vec::with_capacity(cfg.beam);
        for (score, w, parent) in cands {
            if beam.len() == cfg.beam {
                break;
            }
            let mut tokens = live[parent].tokens.clone();
            tokens.push(w);
            if w == EOS {
                completed.push(Hypothesis {
                    tokens,
                    score,
                    finished: true,
                    state: (),
                });
            } else {
                beam.push(Hypothesis {
                    tokens,
                    score,
                    finished: false,
                    state: next_states[parent].clone(),
                });
            }
        }
        live = beam;
        let best_done = completed.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }

    if let Some(best) = completed
        .iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
    {
        return Ok(Decoded {
            seq: TokenSeq::from_framed(best.tokens.clone())?,
            score: best.score,
            truncated: false,
        });
    }
    let best = live
        .iter()
        .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
        .ok_or_else(|| Error::invalid("beam emptied without a hypothesis"))?;
    Ok(Decoded {
        seq: TokenSeq::from_framed(best.tokens.clone())?,
        score: best.score,
        truncated: true,
    })
}

/// Sum of the model's log-probabilities along `seq`, one token at a time.
pub fn sequence_log_prob<M: StepModel>(model: &M, seq: &TokenSeq) -> Result<f64> {
    let mut state = model.initial_state()?;
    let mut total = 0.0;
    for (&prev, &next) in seq.inputs().iter().zip(seq.targets()) {
        let (rows, mut states) = model.step(std::slice::from_ref(&state), &[prev])?;
        check_row(&rows[0], model.vocab_size())?;
        total += rows[0][next as usize];
        state = states.swap_remove(0);
    }
    Ok(total)
}

/// Maps ids between vocabularies by surface token; unknown tokens become UNK.
pub fn remap(ids: &[u32], from: &Vocab, to: &Vocab) -> Vec<u32> {
    ids.iter().map(|&id| to.id(from.token(id))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStage {
    pub pivot: Decoded,
    /// Pivot content in the translator's source ids.
    pub source: Vec<u32>,
    pub target: Decoded,
}

/// Vocabularies of the two models on either side of the pivot.
pub struct PipelineVocabs<'v> {
    pub captioner: &'v Vocab,
    pub source: &'v Vocab,
}

/// Captions an image in the pivot language, then translates that caption.
pub fn two_stage_caption(
    captioner: &Captioner,
    translator: &Translator,
    vocabs: &PipelineVocabs<'_>,
    feat: &[f64],
    pivot_cfg: BeamConfig,
    target_cfg: BeamConfig,
) -> Result<TwoStage> {
    let pivot = beam_search(&CaptionerDecoder::new(captioner, feat)?, pivot_cfg)?;
    if pivot.seq.content().is_empty() {
        return Err(Error::DegeneratePivot);
    }
    let source = remap(pivot.seq.content(), vocabs.captioner, vocabs.source);
    let target = beam_search(&TranslatorDecoder::new(translator, &source)?, target_cfg)?;
    Ok(TwoStage { pivot, source, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_softmax_in_place;
    use crate::rng::{Rng, SeedStream};
    use rand::Rng as _;

    /// Next-token distribution from a table indexed by the full prefix hash,
    /// so every prefix has its own arbitrary distribution.
    struct TableModel {
        vocab: usize,
        seed: u64,
    }

    impl TableModel {
        fn row(&self, prefix: &[u32]) -> Vec<f64> {
            let mut h = self.seed;
            for &t in prefix {
                h = crate::rng::splitmix64(h ^ t as u64);
            }
            let mut rng: Rng = SeedStream::new(h).rng();
            let mut row: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
            log_softmax_in_place(&mut row);
            row
        }
    }

    impl StepModel for TableModel {
        type State = Vec<u32>;

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn initial_state(&self) -> Result<Vec<u32>> {
            Ok(Vec::new())
        }

        fn step(&self, states: &[Vec<u32>], prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<u32>>)> {
            let mut rows = Vec::new();
            let mut next = Vec::new();
            for (s, &p) in states.iter().zip(prev) {
                let mut prefix = s.clone();
                prefix.push(p);
                rows.push(self.row(&prefix));
                next.push(prefix);
            }
            Ok((rows, next))
        }
    }

    /// Fixed per-step distribution regardless of history.
    struct Constant(Vec<f64>);

    impl StepModel for Constant {
        type State = ();
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn initial_state(&self) -> Result<()> {
            Ok(())
        }
        fn step(&self, states: &[()], _prev: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<()>)> {
            Ok((vec![self.0.clone(); states.len()], vec![(); states.len()]))
        }
    }

    #[test]
    fn uniform_greedy_repeats_token_zero() {
        let m = Constant(vec![-(4f64.ln()); 4]);
        let d = greedy_decode(&m, 5).unwrap();
        assert_eq!(d.seq.ids(), &[BOS, 0, 0, 0, 0, 0]);
        assert!(d.truncated);
    }

    #[test]
    fn certain_sentence_is_reproduced() {
        struct Script;
        impl StepModel for Script {
            type State = usize;
            fn vocab_size(&self) -> usize {
                8
            }
            fn initial_state(&self) -> Result<usize> {
                Ok(0)
            }
            fn step(&self, states: &[usize], _: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
                let script = [5, 7, 4, EOS];
                let rows = states
                    .iter()
                    .map(|&t| {
                        let mut r = vec![f64::NEG_INFINITY; 8];
                        r[script[t.min(3)] as usize] = 0.0;
                        r
                    })
                    .collect();
                Ok((rows, states.iter().map(|t| t + 1).collect()))
            }
        }
        let g = greedy_decode(&Script, 10).unwrap();
        let b = beam_search(&Script, BeamConfig { beam: 3, max_len: 10 }).unwrap();
        assert_eq!(g.seq.ids(), &[BOS, 5, 7, 4, EOS]);
        assert_eq!(b.seq, g.seq);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn beam_one_is_greedy_bitwise() {
        for seed in 0..100 {
            let m = TableModel { vocab: 6, seed };
            let g = greedy_decode(&m, 7).unwrap();
            let b = beam_search(&m, BeamConfig { beam: 1, max_len: 7 }).unwrap();
            assert_eq!(g.seq, b.seq, "seed {seed}");
            assert_eq!(g.score.to_bits(), b.score.to_bits(), "seed {seed}");
            assert_eq!(g.truncated, b.truncated);
        }
    }

    fn brute_force(m: &TableModel, max_len: usize) -> (Vec<u32>, f64) {
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, score)) = stack.pop() {
            let row = m.row(&prefix[..]);
            for (w, &lp) in row.iter().enumerate() {
                let mut next = prefix.clone();
                next.push(w as u32);
                let s = score + lp;
                if w as u32 == EOS {
                    let better = match &best {
                        None => true,
                        Some((bt, bs)) => rank(s, &next, *bs, bt) == Ordering::Less,
                    };
                    if better {
                        best = Some((next, s));
                    }
                } else if next.len() - 1 < max_len {
                    stack.push((next, s));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn exhaustive_beam_finds_the_brute_force_argmax() {
        for seed in 0..20 {
            let m = TableModel { vocab: 5, seed };
            let (tokens, score) = brute_force(&m, 4);
            let b = beam_search(&m, BeamConfig { beam: 625, max_len: 4 }).unwrap();
            assert_eq!(b.seq.ids(), &tokens[..], "seed {seed}");
            assert!((b.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn returned_score_matches_recomputation() {
        for seed in 0..30 {
            let m = TableModel { vocab: 7, seed };
            let b = beam_search(&m, BeamConfig { beam: 4, max_len: 6 }).unwrap();
            let again = sequence_log_prob(&m, &b.seq).unwrap();
            assert!((b.score - again).abs() < 1e-9);
            if !b.truncated {
                assert_eq!(b.seq.ids().iter().filter(|&&t| t == EOS).count(), 1);
                assert_eq!(*b.seq.ids().last().unwrap(), EOS);
            }
        }
    }

    #[test]
    fn truncation_is_marked() {
        let never = Constant(vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, -1.0]);
        let b = beam_search(&never, BeamConfig { beam: 2, max_len: 3 }).unwrap();
        assert!(b.truncated);
        assert_eq!(b.seq.ids(), &[BOS, 0, 0, 0]);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let m = Constant(vec![0.0]);
        assert!(beam_search(&m, BeamConfig { beam: 0, max_len: 3 }).is_err());
        assert!(greedy_decode(&m, 0).is_err());
    }

    #[test]
    fn remap_uses_surface_tokens() {
        let a = Vocab::from_tokens(["<pad>", "<bos>", "<eos>", "<unk>", "x", "y", "z"].map(String::from).to_vec()).unwrap();
        let b = Vocab::from_tokens(["<pad>", "<bos>", "<eos>", "<unk>", "z", "x"].map(String::from).to_vec()).unwrap();
        assert_eq!(remap(&[4, 5, 6], &a, &b), vec![5, crate::vocab::UNK, 4]);
    }
}
