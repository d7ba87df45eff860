//! Training losses: per-model cross-entropy, the embedding-alignment
//! regularizer and the joint objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Autoencoder, Captioner, DecoderBatch, Dropout, EncoderBatch, TieSite, Translator};
use crate::params::Binding;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Smoothing inside the square root of the alignment distance.
pub const ALIGN_EPS: f64 = 1e-12;

/// Mean over unmasked rows of `-log_softmax(logits)[row, target]`.
pub fn xe_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    tape.nll_mean(logp, targets, mask)
}

/// Row pairs `(row in A, row in B)` for surface tokens present in both
/// vocabularies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SharedVocabMap {
    pairs: Vec<(usize, usize)>,
}

impl SharedVocabMap {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for &(a, b) in &pairs {
            if !seen_a.insert(a) || !seen_b.insert(b) {
                return Err(Error::invalid(format!("row pair ({a}, {b}) repeats a row")));
            }
        }
        Ok(SharedVocabMap { pairs })
    }

    /// Regular tokens of `a` that also occur in `b`, in `a`'s id order.
    /// The reserved markers are not words and are left untied.
    pub fn between(a: &Vocab, b: &Vocab) -> Self {
        let pairs = a
            .regular()
            .filter_map(|(ia, tok)| b.get(tok).map(|ib| (ia as usize, ib as usize)))
            .filter(|&(_, ib)| ib >= crate::vocab::SPECIALS.len())
            .collect();
        SharedVocabMap { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check(&self, rows_a: usize, rows_b: usize) -> Result<()> {
        for &(a, b) in &self.pairs {
            if a >= rows_a {
                return Err(Error::Index {
                    what: "shared vocabulary row of A",
                    index: a,
                    bound: rows_a,
                });
            }
            if b >= rows_b {
                return Err(Error::Index {
                    what: "shared vocabulary row of B",
                    index: b,
                    bound: rows_b,
                });
            }
        }
        Ok(())
    }
}

/// `Σ sqrt(‖A_a − B_b‖² + eps)` over the mapped pairs. `trainable` receives
/// gradient; `reference` is read through a detached copy.
pub fn embed_align_reg(tape: &mut Tape<'_>, trainable: Var, reference: Var, map: &SharedVocabMap, eps: f64) -> Result<Var> {
    let [ra, ca] = tape.shape(trainable);
    let [rb, cb] = tape.shape(reference);
    if ca != cb {
        return Err(Error::Shape {
            op: "embed_align_reg",
            left: [ra, ca],
            right: [rb, cb],
        });
    }
    map.check(ra, rb)?;
    if map.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (ia, ib): (Vec<usize>, Vec<usize>) = map.pairs.iter().copied().unzip();
    let frozen = tape.detach(reference);
    let a = tape.gather_rows(trainable, &ia)?;
    let b = tape.gather_rows(frozen, &ib)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let dist2 = tape.sum_cols(sq);
    let dist2 = tape.add_scalar(dist2, eps);
    let dist = tape.sqrt(dist2)?;
    Ok(tape.sum(dist))
}

/// Mean shared-row distance, for logging outside any tape.
pub fn mean_align_distance(a: &Tensor, b: &Tensor, map: &SharedVocabMap) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "mean_align_distance",
            left: a.shape(),
            right: b.shape(),
        });
    }
    map.check(a.rows(), b.rows())?;
    if map.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = map
        .pairs
        .iter()
        .map(|&(i, j)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / map.len() as f64)
}

/// Image features with framed pivot captions.
#[derive(Clone, Debug)]
pub struct CaptionBatch {
    pub feats: Tensor,
    pub seqs: DecoderBatch,
}

/// Source content tokens with framed targets (translation pairs, or
/// sentences paired with themselves for the autoencoder).
#[derive(Clone, Debug)]
pub struct Seq2SeqBatch {
    pub src: EncoderBatch,
    pub tgt: DecoderBatch,
}

pub fn captioner_xe(
    tape: &mut Tape<'_>,
    m: &Captioner,
    b: &Binding,
    batch: &CaptionBatch,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let feats = tape.constant(batch.feats.clone());
    let logits = m.forward_batch(tape, b, feats, &batch.seqs, drop)?;
    xe_loss(tape, logits, &batch.seqs.targets, &batch.seqs.mask)
}

pub fn translator_xe(
    tape: &mut Tape<'_>,
    m: &Translator,
    b: &Binding,
    batch: &Seq2SeqBatch,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let logits = m.forward_batch(tape, b, &batch.src, &batch.tgt, drop)?;
    xe_loss(tape, logits, &batch.tgt.targets, &batch.tgt.mask)
}

pub fn autoencoder_xe(
    tape: &mut Tape<'_>,
    m: &Autoencoder,
    b: &Binding,
    batch: &Seq2SeqBatch,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let logits = m.forward_batch(tape, b, &batch.src, &batch.tgt, drop)?;
    xe_loss(tape, logits, &batch.tgt.targets, &batch.tgt.mask)
}

/// The lower-bound objective: captioner and translator cross-entropies on
/// their own corpora, nothing linking them.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_loss(
    tape: &mut Tape<'_>,
    cap: &Captioner,
    cap_b: &Binding,
    cap_batch: &CaptionBatch,
    mt: &Translator,
    mt_b: &Binding,
    mt_batch: &Seq2SeqBatch,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let l_ix = captioner_xe(tape, cap, cap_b, cap_batch, drop)?;
    let l_xy = translator_xe(tape, mt, mt_b, mt_batch, drop)?;
    tape.add(l_ix, l_xy)
}

/// Which terms the joint objective carries and where the alignment terms tie.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointSettings {
    pub lambda: f64,
    /// Include the autoencoder cross-entropy and the target-side alignment.
    /// Without it the autoencoder is disconnected from the other two models.
    pub target_reg: bool,
    pub pivot_site: TieSite,
    pub target_site: TieSite,
    pub eps: f64,
}

impl Default for JointSettings {
    fn default() -> Self {
        JointSettings {
            lambda: 1.0,
            target_reg: true,
            pivot_site: TieSite::OutputProjection,
            target_site: TieSite::OutputProjection,
            eps: ALIGN_EPS,
        }
    }
}

/// Vocabulary maps for both alignment terms.
#[derive(Clone, Debug, Default)]
pub struct AlignMaps {
    /// translator source rows ↔ captioner rows
    pub pivot: SharedVocabMap,
    /// translator target rows ↔ autoencoder rows
    pub target: SharedVocabMap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLossBreakdown {
    pub l_ix: f64,
    pub l_xy: f64,
    pub l_yy: f64,
    pub r_pivot: f64,
    pub r_target: f64,
    pub total: f64,
}

pub struct JointModels<'m> {
    pub captioner: &'m Captioner,
    pub translator: &'m Translator,
    pub autoencoder: &'m Autoencoder,
}

pub struct JointBindings<'b> {
    pub captioner: &'b Binding,
    pub translator: &'b Binding,
    pub autoencoder: &'b Binding,
    /// Stand-ins for the reference side of each alignment term. `None`
    /// reads the live parameter (detached).
    pub pivot_reference: Option<Var>,
    pub target_reference: Option<Var>,
}

impl<'b> JointBindings<'b> {
    pub fn new(captioner: &'b Binding, translator: &'b Binding, autoencoder: &'b Binding) -> Self {
        JointBindings {
            captioner,
            translator,
            autoencoder,
            pivot_reference: None,
            target_reference: None,
        }
    }
}

pub struct JointBatches<'a> {
    pub caption: &'a CaptionBatch,
    pub parallel: &'a Seq2SeqBatch,
    pub target: &'a Seq2SeqBatch,
}

/// `l_ix + l_xy + l_yy + λ (r_pivot + r_target)` in minimization form.
/// Excluded terms report 0.
pub fn joint_loss(
    tape: &mut Tape<'_>,
    models: &JointModels<'_>,
    binds: &JointBindings<'_>,
    batches: &JointBatches<'_>,
    maps: &AlignMaps,
    settings: &JointSettings,
    drop: &mut Dropout<'_>,
) -> Result<(Var, JointLossBreakdown)> {
    if !(settings.lambda >= 0.0) || !settings.lambda.is_finite() {
        return Err(Error::invalid(format!("lambda {} must be finite and ≥ 0", settings.lambda)));
    }
    let (cap, mt, ae) = (models.captioner, models.translator, models.autoencoder);
    let l_ix = captioner_xe(tape, cap, binds.captioner, batches.caption, drop)?;
    let l_xy = translator_xe(tape, mt, binds.translator, batches.parallel, drop)?;
    let mut total = tape.add(l_ix, l_xy)?;

    let r_pivot = embed_align_reg(
        tape,
        binds.translator.var(mt.enc_emb),
        binds
            .pivot_reference
            .unwrap_or_else(|| binds.captioner.var(cap.tie_matrix(settings.pivot_site))),
        &maps.pivot,
        settings.eps,
    )?;
    let mut reg = r_pivot;
    let mut parts = JointLossBreakdown {
        l_ix: tape.value(l_ix).item(),
        l_xy: tape.value(l_xy).item(),
        r_pivot: tape.value(r_pivot).item(),
        ..Default::default()
    };

    if settings.target_reg {
        let l_yy = autoencoder_xe(tape, ae, binds.autoencoder, batches.target, drop)?;
        total = tape.add(total, l_yy)?;
        let r_target = embed_align_reg(
            tape,
            binds.translator.var(mt.target_tie_matrix(settings.target_site)),
            binds
                .target_reference
                .unwrap_or_else(|| binds.autoencoder.var(ae.tie_matrix(settings.target_site))),
            &maps.target,
            settings.eps,
        )?;
        reg = tape.add(reg, r_target)?;
        parts.l_yy = tape.value(l_yy).item();
        parts.r_target = tape.value(r_target).item();
    }

    let reg = tape.scale(reg, settings.lambda);
    let total = tape.add(total, reg)?;
    parts.total = tape.value(total).item();
    let all = [parts.l_ix, parts.l_xy, parts.l_yy, parts.r_pivot, parts.r_target, parts.total];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("joint loss".into()));
    }
    Ok((total, parts))
}
