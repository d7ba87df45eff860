//! Pretraining of each model on its own corpus, joint training with the
//! alignment terms, and two-stage evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decode::{two_stage_caption, BeamConfig, PipelineVocabs};
use crate::error::{Error, Result};
use crate::metrics::{cider, corpus_bleu, self_bleu};
use crate::models::{Autoencoder, Captioner, DecoderBatch, Dropout, EncoderBatch, ModelDims, TieSite, Translator};
use crate::objectives::{
    autoencoder_xe, captioner_xe, joint_loss, mean_align_distance, translator_xe, AlignMaps, CaptionBatch,
    JointBatches, JointBindings, JointLossBreakdown, JointModels, JointSettings, Seq2SeqBatch, SharedVocabMap,
    ALIGN_EPS,
};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::{Binding, ParamStore};
use crate::rng::SeedStream;
use crate::synth::{gen_corpora, oracle_captions, Corpora, SynthWorldConfig, Vocabs};
use crate::tensor::Tensor;
use crate::vocab::{TokenSeq, Vocab};

/// Fraction of each corpus held out for validation (its tail).
pub const VALID_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
}

impl<T> Split<T> {
    fn new(mut items: Vec<T>) -> Self {
        let n_valid = if items.len() < 2 {
            0
        } else {
            ((items.len() as f64 * VALID_FRACTION).round() as usize).max(1)
        };
        let valid = items.split_off(items.len() - n_valid);
        Split { train: items, valid }
    }

    fn part(&self, valid: bool) -> &[T] {
        if valid {
            &self.valid
        } else {
            &self.train
        }
    }
}

/// All corpora as id sequences under their models' vocabularies.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub vocabs: Vocabs,
    pub features: Tensor,
    /// (feature row, pivot caption)
    pub captions: Split<(usize, TokenSeq)>,
    /// (pivot content, target caption)
    pub parallel: Split<(Vec<u32>, TokenSeq)>,
    pub target: Split<TokenSeq>,
}

fn encode(vocab: &Vocab, sentence: &[String], max_len: usize) -> TokenSeq {
    let n = sentence.len().min(max_len);
    vocab.encode(&sentence[..n])
}

impl TrainingData {
    pub fn new(corpora: &Corpora, min_freq: usize, max_len: usize) -> Result<Self> {
        let vocabs = corpora.vocabs(min_freq)?;
        let captions = corpora
            .captions
            .iter()
            .enumerate()
            .map(|(i, s)| (i, encode(&vocabs.captioner, s, max_len)))
            .collect();
        let parallel = corpora
            .parallel
            .iter()
            .map(|(p, t)| {
                let src = encode(&vocabs.source, p, max_len).content().to_vec();
                (src, encode(&vocabs.target, t, max_len))
            })
            .collect();
        let target = corpora
            .target_captions
            .iter()
            .map(|s| encode(&vocabs.autoencoder, s, max_len))
            .collect();
        Ok(TrainingData {
            features: corpora.images.features.clone(),
            captions: Split::new(captions),
            parallel: Split::new(parallel),
            target: Split::new(target),
            vocabs,
        })
    }

    pub fn caption_batch(&self, valid: bool, idx: &[usize]) -> Result<CaptionBatch> {
        let items = self.captions.part(valid);
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.features.row(items[i].0)).collect();
        let feats = Tensor::from_vec(idx.len(), self.features.cols(), rows.concat())?;
        let seqs: Vec<&TokenSeq> = idx.iter().map(|&i| &items[i].1).collect();
        Ok(CaptionBatch {
            feats,
            seqs: DecoderBatch::new(&seqs)?,
        })
    }

    pub fn parallel_batch(&self, valid: bool, idx: &[usize]) -> Result<Seq2SeqBatch> {
        let items = self.parallel.part(valid);
        let src: Vec<&[u32]> = idx.iter().map(|&i| items[i].0.as_slice()).collect();
        let tgt: Vec<&TokenSeq> = idx.iter().map(|&i| &items[i].1).collect();
        Ok(Seq2SeqBatch {
            src: EncoderBatch::new(&src)?,
            tgt: DecoderBatch::new(&tgt)?,
        })
    }

    pub fn autoencoder_batch(&self, valid: bool, idx: &[usize]) -> Result<Seq2SeqBatch> {
        let items = self.target.part(valid);
        let src: Vec<&[u32]> = idx.iter().map(|&i| items[i].content()).collect();
        let tgt: Vec<&TokenSeq> = idx.iter().map(|&i| &items[i]).collect();
        Ok(Seq2SeqBatch {
            src: EncoderBatch::new(&src)?,
            tgt: DecoderBatch::new(&tgt)?,
        })
    }

    /// Translator source rows ↔ captioner rows, translator target rows ↔
    /// autoencoder rows.
    pub fn align_maps(&self) -> AlignMaps {
        AlignMaps {
            pivot: SharedVocabMap::between(&self.vocabs.source, &self.vocabs.captioner),
            target: SharedVocabMap::between(&self.vocabs.target, &self.vocabs.autoencoder),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainCaptioner,
    PretrainTranslator,
    PretrainAutoencoder,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PretrainCaptioner => "pretrain-captioner",
            Phase::PretrainTranslator => "pretrain-translator",
            Phase::PretrainAutoencoder => "pretrain-autoencoder",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub phase: Phase,
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub clip: f64,
}

impl TrainPlan {
    /// Adam at 4e-4, batches of 100, no dropout or weight decay.
    pub fn pretrain(phase: Phase, seed: u64) -> Self {
        TrainPlan {
            phase,
            max_epochs: 30,
            batch: 100,
            lr: 4e-4,
            lambda: 0.0,
            patience: 5,
            seed,
            dropout: 0.0,
            weight_decay: 0.0,
            clip: 5.0,
        }
    }

    /// Adam at 2e-4, batches of 64, λ = 1, dropout 0.3, weight decay 1e-5.
    pub fn joint(seed: u64) -> Self {
        TrainPlan {
            phase: Phase::Joint,
            max_epochs: 10,
            batch: 64,
            lr: 2e-4,
            lambda: 1.0,
            patience: 5,
            seed,
            dropout: 0.3,
            weight_decay: 1e-5,
            clip: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch == 0 || self.patience == 0 {
            return Err(Error::invalid("epochs, batch size and patience must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda {} must be finite and ≥ 0", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::invalid("weight decay must be ≥ 0 and the clip norm positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr).with_weight_decay(self.weight_decay)
    }

    fn stream(&self) -> SeedStream {
        SeedStream::new(self.seed).split(self.phase.name())
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        phase: Phase,
        seed: u64,
        config_hash: String,
    },
    Step {
        phase: Phase,
        epoch: usize,
        step: u64,
        xe: f64,
        grad_norm: f64,
    },
    Epoch {
        phase: Phase,
        epoch: usize,
        step: u64,
        valid_xe: f64,
        best: bool,
    },
    JointStep {
        epoch: usize,
        step: u64,
        l_ix: f64,
        l_xy: f64,
        l_yy: f64,
        r_pivot: f64,
        r_target: f64,
        total: f64,
        grad_norm: f64,
    },
    /// Epoch 0 is the state before the first joint step.
    JointEpoch {
        epoch: usize,
        step: u64,
        valid_ix: f64,
        valid_xy: f64,
        valid_yy: f64,
        valid_total: f64,
        d_pivot: f64,
        d_target: f64,
        best: bool,
    },
}

/// Append-only record list, rendered one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("log line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

/// A model trained on its own corpus by cross-entropy.
pub trait Trainable: Clone {
    const PHASE: Phase;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    fn corpus_len(data: &TrainingData, valid: bool) -> usize;

    /// Mean token cross-entropy of the selected examples and the number of
    /// scored tokens.
    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        data: &TrainingData,
        valid: bool,
        idx: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, usize)>;
}

impl Trainable for Captioner {
    const PHASE: Phase = Phase::PretrainCaptioner;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn corpus_len(data: &TrainingData, valid: bool) -> usize {
        data.captions.part(valid).len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        data: &TrainingData,
        valid: bool,
        idx: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, usize)> {
        let batch = data.caption_batch(valid, idx)?;
        let tokens = batch.seqs.mask.iter().filter(|&&m| m).count();
        Ok((captioner_xe(tape, self, b, &batch, drop)?, tokens))
    }
}

impl Trainable for Translator {
    const PHASE: Phase = Phase::PretrainTranslator;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn corpus_len(data: &TrainingData, valid: bool) -> usize {
        data.parallel.part(valid).len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        data: &TrainingData,
        valid: bool,
        idx: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, usize)> {
        let batch = data.parallel_batch(valid, idx)?;
        let tokens = batch.tgt.mask.iter().filter(|&&m| m).count();
        Ok((translator_xe(tape, self, b, &batch, drop)?, tokens))
    }
}

impl Trainable for Autoencoder {
    const PHASE: Phase = Phase::PretrainAutoencoder;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn corpus_len(data: &TrainingData, valid: bool) -> usize {
        data.target.part(valid).len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        data: &TrainingData,
        valid: bool,
        idx: &[usize],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, usize)> {
        let batch = data.autoencoder_batch(valid, idx)?;
        let tokens = batch.tgt.mask.iter().filter(|&&m| m).count();
        Ok((autoencoder_xe(tape, self, b, &batch, drop)?, tokens))
    }
}

/// Token-weighted validation cross-entropy, no dropout.
pub fn validation_xe<M: Trainable>(model: &M, data: &TrainingData, batch: usize) -> Result<f64> {
    let n = M::corpus_len(data, true);
    if n == 0 {
        return Err(Error::EmptySequence("validation split"));
    }
    let (mut sum, mut tokens) = (0.0, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch) {
        let mut tape = Tape::new();
        let b = model.store().bind_frozen(&mut tape);
        let (loss, t) = model.batch_loss(&mut tape, &b, data, true, chunk, &mut Dropout::off())?;
        sum += tape.value(loss).item() * t as f64;
        tokens += t;
    }
    Ok(sum / tokens as f64)
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

/// The outcome of one pretraining run: the best-validation parameters.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub steps: u64,
}

/// Trains `model` on its own corpus by minibatch Adam and returns the
/// parameters of the epoch with the lowest validation cross-entropy.
pub fn pretrain<M: Trainable>(mut model: M, data: &TrainingData, plan: &TrainPlan, log: &mut TrainLog) -> Result<Trained<M>> {
    plan.validate()?;
    if plan.phase != M::PHASE {
        return Err(Error::invalid(format!(
            "plan phase {} does not match model phase {}",
            plan.phase.name(),
            M::PHASE.name()
        )));
    }
    let n = M::corpus_len(data, false);
    if n == 0 {
        return Err(Error::EmptySequence("training corpus"));
    }
    let stream = plan.stream();
    let mut adam = Adam::new(model.store(), plan.adam());
    let mut best = (f64::INFINITY, model.store().clone(), 0usize);
    let mut bad_epochs = 0;
    let mut step = 0u64;
    for epoch in 1..=plan.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream.split_index("order", epoch as u64).rng());
        for chunk in order.chunks(plan.batch) {
            let mut drop_rng = stream.split_index("dropout", step).rng();
            let mut drop = if plan.dropout > 0.0 {
                Dropout::on(plan.dropout, &mut drop_rng)
            } else {
                Dropout::off()
            };
            let (xe, mut grads) = {
                let mut tape = Tape::new();
                let b = model.store().bind(&mut tape);
                let (loss, _) = model.batch_loss(&mut tape, &b, data, false, chunk, &mut drop)?;
                tape.backward(loss)?;
                (tape.value(loss).item(), model.store().grads(&tape, &b))
            };
            if !xe.is_finite() || !all_finite(&grads) {
                model.store_mut().load_from(&best.1)?;
                return Err(Error::Diverged {
                    step,
                    reason: format!("{} loss {xe}", plan.phase.name()),
                    last_good: vec![best.1],
                });
            }
            let grad_norm = clip_global_norm(&mut grads, plan.clip)?;
            adam.update(model.store_mut(), &grads)?;
            log.push(LogRecord::Step {
                phase: plan.phase,
                epoch,
                step,
                xe,
                grad_norm,
            });
            step += 1;
        }
        let valid_xe = validation_xe(&model, data, plan.batch)?;
        let improved = valid_xe < best.0;
        log.push(LogRecord::Epoch {
            phase: plan.phase,
            epoch,
            step,
            valid_xe,
            best: improved,
        });
        if improved {
            best = (valid_xe, model.store().clone(), epoch);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= plan.patience {
                break;
            }
        }
    }
    model.store_mut().load_from(&best.1)?;
    Ok(Trained {
        model,
        best_epoch: best.2,
        best_valid: best.0,
        steps: step,
    })
}

/// Which joint objective to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pretraining only; no joint phase.
    LowerBound,
    /// Pivot-side alignment only; the autoencoder is left out.
    PivotOnly,
    /// Both alignment terms with the autoencoder.
    Full,
    /// The full objective at λ = 0.
    Control,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LowerBound, Variant::PivotOnly, Variant::Full, Variant::Control];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LowerBound => "lower-bound",
            Variant::PivotOnly => "pivot-only",
            Variant::Full => "full",
            Variant::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Joint settings for this variant, or `None` for the lower bound.
    pub fn settings(self, lambda: f64, pivot_site: TieSite, target_site: TieSite) -> Option<JointSettings> {
        let base = JointSettings {
            lambda,
            target_reg: true,
            pivot_site,
            target_site,
            eps: ALIGN_EPS,
        };
        match self {
            Variant::LowerBound => None,
            Variant::PivotOnly => Some(JointSettings {
                target_reg: false,
                ..base
            }),
            Variant::Full => Some(base),
            Variant::Control => Some(JointSettings { lambda: 0.0, ..base }),
        }
    }
}

/// Captioner, translator and autoencoder trained together.
#[derive(Clone, Debug)]
pub struct Trio {
    pub captioner: Captioner,
    pub translator: Translator,
    pub autoencoder: Autoencoder,
}

impl Trio {
    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.captioner.store, &self.translator.store, &self.autoencoder.store]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.captioner.store,
            &mut self.translator.store,
            &mut self.autoencoder.store,
        ]
    }

    fn load(&mut self, stores: &[ParamStore; 3]) -> Result<()> {
        for (dst, src) in self.stores_mut().into_iter().zip(stores) {
            dst.load_from(src)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> [ParamStore; 3] {
        self.stores().map(Clone::clone)
    }

    /// All parameters in one store; names already carry the model prefix.
    pub fn merged(&self) -> ParamStore {
        merge(&self.stores().map(Clone::clone))
    }

    /// Inverse of [`Trio::merged`].
    pub fn load_merged(&mut self, store: &ParamStore) -> Result<()> {
        for dst in self.stores_mut() {
            dst.load_from(store)?;
        }
        Ok(())
    }

    /// Mean shared-row distances of the pivot and target alignment pairs.
    pub fn align_distances(&self, maps: &AlignMaps, settings: &JointSettings) -> Result<(f64, f64)> {
        let cap = self.captioner.store.get(self.captioner.tie_matrix(settings.pivot_site));
        let src = self.translator.store.get(self.translator.enc_emb);
        let tgt = self
            .translator
            .store
            .get(self.translator.target_tie_matrix(settings.target_site));
        let ae = self
            .autoencoder
            .store
            .get(self.autoencoder.tie_matrix(settings.target_site));
        Ok((
            mean_align_distance(src, cap, &maps.pivot)?,
            mean_align_distance(tgt, ae, &maps.target)?,
        ))
    }
}

pub fn merge(stores: &[ParamStore]) -> ParamStore {
    let mut out = ParamStore::new();
    for p in stores.iter().flat_map(ParamStore::iter) {
        out.add(p.name.clone(), p.value.clone());
    }
    out
}

/// Everything needed to continue a joint run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct JointState {
    pub models: Trio,
    pub adam: [Adam; 3],
    /// Steps taken so far.
    pub step: u64,
    pub best_valid: f64,
    pub best_epoch: usize,
    pub best: [ParamStore; 3],
    pub bad_epochs: usize,
    pub finished: bool,
}

/// Validation cross-entropies of the three models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointValidation {
    pub ix: f64,
    pub xy: f64,
    pub yy: f64,
}

impl JointValidation {
    pub fn total(&self) -> f64 {
        self.ix + self.xy + self.yy
    }
}

pub fn joint_validation(models: &Trio, data: &TrainingData, batch: usize) -> Result<JointValidation> {
    Ok(JointValidation {
        ix: validation_xe(&models.captioner, data, batch)?,
        xy: validation_xe(&models.translator, data, batch)?,
        yy: validation_xe(&models.autoencoder, data, batch)?,
    })
}

/// Indices drawn at `step` from a cyclic iterator over `n` items: item `k`
/// of the stream is position `k mod n` of the shuffle for cycle `k / n`.
fn cyclic_batch(stream: SeedStream, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in start..start + batch {
        let cycle = k / n;
        if cached.as_ref().is_none_or(|(c, _)| *c != cycle) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream.split_index("cycle", cycle as u64).rng());
            cached = Some((cycle, perm));
        }
        out.push(cached.as_ref().expect("cycle cached").1[k % n]);
    }
    out
}

/// Joint optimisation of all three models. Each step draws one minibatch
/// from each corpus; an epoch is one pass over the largest corpus.
pub struct JointTrainer<'d> {
    pub data: &'d TrainingData,
    pub plan: TrainPlan,
    pub settings: JointSettings,
    pub maps: AlignMaps,
    pub state: JointState,
}

impl<'d> JointTrainer<'d> {
    /// Starts from pretrained models. Logs the epoch-0 validation, which
    /// is also the first best-so-far checkpoint.
    pub fn new(
        models: Trio,
        data: &'d TrainingData,
        plan: TrainPlan,
        settings: JointSettings,
        log: &mut TrainLog,
    ) -> Result<Self> {
        plan.validate()?;
        if plan.phase != Phase::Joint {
            return Err(Error::invalid(format!("joint training given a {} plan", plan.phase.name())));
        }
        let maps = data.align_maps();
        let adam = models.stores().map(|s| Adam::new(s, plan.adam()));
        let valid = joint_validation(&models, data, plan.batch)?;
        let (d_pivot, d_target) = models.align_distances(&maps, &settings)?;
        log.push(LogRecord::JointEpoch {
            epoch: 0,
            step: 0,
            valid_ix: valid.ix,
            valid_xy: valid.xy,
            valid_yy: valid.yy,
            valid_total: valid.total(),
            d_pivot,
            d_target,
            best: true,
        });
        let best = models.snapshot();
        Ok(JointTrainer {
            data,
            settings,
            maps,
            state: JointState {
                models,
                adam,
                step: 0,
                best_valid: valid.total(),
                best_epoch: 0,
                best,
                bad_epochs: 0,
                finished: false,
            },
            plan,
        })
    }

    pub fn resume(data: &'d TrainingData, plan: TrainPlan, settings: JointSettings, state: JointState) -> Result<Self> {
        plan.validate()?;
        Ok(JointTrainer {
            data,
            plan,
            settings,
            maps: data.align_maps(),
            state,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let largest = [
            self.data.captions.train.len(),
            self.data.parallel.train.len(),
            self.data.target.train.len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        largest.div_ceil(self.plan.batch) as u64
    }

    fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.plan.max_epochs as u64
    }

    /// One optimisation step, plus validation at an epoch boundary.
    pub fn step(&mut self, log: &mut TrainLog) -> Result<()> {
        if self.state.finished {
            return Ok(());
        }
        let data = self.data;
        let stream = self.plan.stream();
        let step = self.state.step;
        let b = self.plan.batch;
        let cap_idx = cyclic_batch(stream.split("captions"), data.captions.train.len(), b, step);
        let mt_idx = cyclic_batch(stream.split("parallel"), data.parallel.train.len(), b, step);
        let ae_idx = cyclic_batch(stream.split("target"), data.target.train.len(), b, step);
        let caption = data.caption_batch(false, &cap_idx)?;
        let parallel = data.parallel_batch(false, &mt_idx)?;
        let target = data.autoencoder_batch(false, &ae_idx)?;

        let mut drop_rng = stream.split_index("dropout", step).rng();
        let mut drop = if self.plan.dropout > 0.0 {
            Dropout::on(self.plan.dropout, &mut drop_rng)
        } else {
            Dropout::off()
        };
        let models = &self.state.models;
        let result: Result<(JointLossBreakdown, Vec<Vec<Tensor>>)> = (|| {
            let mut tape = Tape::new();
            let cb = models.captioner.store.bind(&mut tape);
            let tb = models.translator.store.bind(&mut tape);
            let ab = models.autoencoder.store.bind(&mut tape);
            let (loss, parts) = joint_loss(
                &mut tape,
                &JointModels {
                    captioner: &models.captioner,
                    translator: &models.translator,
                    autoencoder: &models.autoencoder,
                },
                &JointBindings::new(&cb, &tb, &ab),
                &JointBatches {
                    caption: &caption,
                    parallel: &parallel,
                    target: &target,
                },
                &self.maps,
                &self.settings,
                &mut drop,
            )?;
            tape.backward(loss)?;
            let grads = vec![
                models.captioner.store.grads(&tape, &cb),
                models.translator.store.grads(&tape, &tb),
                models.autoencoder.store.grads(&tape, &ab),
            ];
            Ok((parts, grads))
        })();
        let (parts, grads) = match result {
            Ok((p, g)) if g.iter().all(|g| all_finite(g)) => (p, g),
            Ok(_) => return Err(self.diverged(step, "non-finite gradient".into())),
            Err(Error::NonFinite(what)) => return Err(self.diverged(step, format!("non-finite {what}"))),
            Err(e) => return Err(e),
        };

        let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
        let mut flat: Vec<Tensor> = grads.into_iter().flatten().collect();
        let grad_norm = clip_global_norm(&mut flat, self.plan.clip)?;
        let mut rest = flat.into_iter();
        let target_reg = self.settings.target_reg;
        for (k, (store, adam)) in self.state.models.stores_mut().into_iter().zip(&mut self.state.adam).enumerate() {
            let g: Vec<Tensor> = rest.by_ref().take(sizes[k]).collect();
            // Outside the objective the autoencoder must not move, not even by decay.
            if k == 2 && !target_reg {
                continue;
            }
            adam.update(store, &g)?;
        }

        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize + 1;
        log.push(LogRecord::JointStep {
            epoch,
            step,
            l_ix: parts.l_ix,
            l_xy: parts.l_xy,
            l_yy: parts.l_yy,
            r_pivot: parts.r_pivot,
            r_target: parts.r_target,
            total: parts.total,
            grad_norm,
        });
        self.state.step += 1;

        if self.state.step % spe == 0 {
            let valid = joint_validation(&self.state.models, data, self.plan.batch)?;
            let (d_pivot, d_target) = self.state.models.align_distances(&self.maps, &self.settings)?;
            let improved = valid.total() < self.state.best_valid;
            log.push(LogRecord::JointEpoch {
                epoch,
                step: self.state.step,
                valid_ix: valid.ix,
                valid_xy: valid.xy,
                valid_yy: valid.yy,
                valid_total: valid.total(),
                d_pivot,
                d_target,
                best: improved,
            });
            if improved {
                self.state.best_valid = valid.total();
                self.state.best_epoch = epoch;
                self.state.best = self.state.models.snapshot();
                self.state.bad_epochs = 0;
            } else {
                self.state.bad_epochs += 1;
                if self.state.bad_epochs >= self.plan.patience {
                    self.state.finished = true;
                }
            }
        }
        if self.state.step >= self.total_steps() {
            self.state.finished = true;
        }
        Ok(())
    }

    fn diverged(&mut self, step: u64, reason: String) -> Error {
        let best = self.state.best.clone();
        let _ = self.state.models.load(&best);
        Error::Diverged {
            step,
            reason,
            last_good: best.into(),
        }
    }

    /// Runs until the plan's epoch budget or early stopping ends training,
    /// or `max_steps` more steps have been taken.
    pub fn run(&mut self, max_steps: Option<u64>, log: &mut TrainLog) -> Result<()> {
        let mut taken = 0;
        while !self.state.finished && max_steps.is_none_or(|m| taken < m) {
            self.step(log)?;
            taken += 1;
        }
        Ok(())
    }

    /// The best-validation models.
    pub fn finish(mut self) -> Result<JointOutcome> {
        let best = self.state.best.clone();
        self.state.models.load(&best)?;
        Ok(JointOutcome {
            models: self.state.models,
            best_epoch: self.state.best_epoch,
            best_valid: self.state.best_valid,
            steps: self.state.step,
        })
    }
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub models: Trio,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub steps: u64,
}

pub fn joint_train(
    models: Trio,
    data: &TrainingData,
    plan: &TrainPlan,
    settings: JointSettings,
    log: &mut TrainLog,
) -> Result<JointOutcome> {
    let mut t = JointTrainer::new(models, data, plan.clone(), settings, log)?;
    t.run(None, log)?;
    t.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub pivot: String,
    pub caption: String,
    pub reference: String,
}

/// Corpus metrics of one system on the evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// B@1..B@4
    pub bleu: Vec<f64>,
    pub cider: f64,
    /// Self-B@1..Self-B@5 over the generated captions.
    pub self_bleu: Vec<f64>,
    pub images: usize,
    /// Images whose pivot caption was empty; they count as empty output.
    pub degenerate: usize,
    pub samples: Vec<Sample>,
}

impl MetricReport {
    pub fn b4(&self) -> f64 {
        self.bleu[3]
    }

    pub fn self_b5(&self) -> f64 {
        self.self_bleu[4]
    }
}

/// Maps strings to ids in first-seen order so metrics can count n-grams.
#[derive(Default)]
struct Interner(BTreeMap<String, u32>);

impl Interner {
    fn ids(&mut self, sentence: &[String]) -> Vec<u32> {
        sentence
            .iter()
            .map(|w| {
                let next = self.0.len() as u32;
                *self.0.entry(w.clone()).or_insert(next)
            })
            .collect()
    }
}

/// Scores candidate sentences against references.
pub fn score(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptySequence("evaluation set"));
    }
    let mut interner = Interner::default();
    let refs: Vec<Vec<Vec<u32>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| interner.ids(r)).collect())
        .collect();
    let cands: Vec<Vec<u32>> = candidates.iter().map(|c| interner.ids(c)).collect();
    Ok((
        corpus_bleu(&cands, &refs, 4)?,
        cider(&cands, &refs, 4)?,
        self_bleu(&cands, 5)?,
    ))
}

/// Two-stage captions of every evaluation image, scored against its references.
pub fn evaluate_pipeline(
    captioner: &Captioner,
    translator: &Translator,
    vocabs: &Vocabs,
    features: &Tensor,
    references: &[Vec<Vec<String>>],
    beams: (BeamConfig, BeamConfig),
    samples: usize,
) -> Result<MetricReport> {
    if features.rows() == 0 {
        return Err(Error::EmptySequence("evaluation set"));
    }
    if features.rows() != references.len() {
        return Err(Error::invalid(format!(
            "{} evaluation images but {} reference sets",
            features.rows(),
            references.len()
        )));
    }
    let pv = PipelineVocabs {
        captioner: &vocabs.captioner,
        source: &vocabs.source,
    };
    let mut degenerate = 0;
    let mut candidates = Vec::with_capacity(features.rows());
    let mut pivots = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        match two_stage_caption(captioner, translator, &pv, features.row(r), beams.0, beams.1) {
            Ok(out) => {
                pivots.push(vocabs.captioner.decode_line(&out.pivot.seq));
                candidates.push(vocabs.target.decode(&out.target.seq).into_iter().map(String::from).collect());
            }
            Err(Error::DegeneratePivot) => {
                degenerate += 1;
                pivots.push(String::new());
                candidates.push(Vec::new());
            }
            Err(e) => return Err(e),
        }
    }
    let (bleu, cider, self_bleu) = score(&candidates, references)?;
    let samples = (0..samples.min(candidates.len()))
        .map(|i| Sample {
            index: i,
            pivot: pivots[i].clone(),
            caption: candidates[i].join(" "),
            reference: references[i].first().map(|r| r.join(" ")).unwrap_or_default(),
        })
        .collect();
    Ok(MetricReport {
        bleu,
        cider,
        self_bleu,
        images: candidates.len(),
        degenerate,
        samples,
    })
}

/// Everything one seed of the comparison needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub world: SynthWorldConfig,
    pub dims: ModelDims,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub joint_epochs: usize,
    pub joint_batch: usize,
    pub joint_lr: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub patience: usize,
    pub pivot_site: TieSite,
    pub target_site: TieSite,
    pub pivot_beam: BeamConfig,
    pub target_beam: BeamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pre = TrainPlan::pretrain(Phase::PretrainCaptioner, 0);
        let joint = TrainPlan::joint(0);
        ExperimentConfig {
            world: SynthWorldConfig::default(),
            dims: ModelDims::TOY,
            pretrain_epochs: pre.max_epochs,
            pretrain_batch: pre.batch,
            pretrain_lr: pre.lr,
            joint_epochs: joint.max_epochs,
            joint_batch: joint.batch,
            joint_lr: joint.lr,
            lambda: joint.lambda,
            dropout: joint.dropout,
            weight_decay: joint.weight_decay,
            clip: joint.clip,
            patience: joint.patience,
            pivot_site: TieSite::OutputProjection,
            target_site: TieSite::OutputProjection,
            pivot_beam: BeamConfig::CAPTIONER,
            target_beam: BeamConfig::TRANSLATOR,
        }
    }
}

impl ExperimentConfig {
    pub fn pretrain_plan(&self, phase: Phase, seed: u64) -> TrainPlan {
        TrainPlan {
            max_epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            patience: self.patience,
            clip: self.clip,
            ..TrainPlan::pretrain(phase, seed)
        }
    }

    pub fn joint_plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            max_epochs: self.joint_epochs,
            batch: self.joint_batch,
            lr: self.joint_lr,
            lambda: self.lambda,
            dropout: self.dropout,
            weight_decay: self.weight_decay,
            clip: self.clip,
            patience: self.patience,
            ..TrainPlan::joint(seed)
        }
    }

    pub fn settings(&self, variant: Variant) -> Option<JointSettings> {
        variant.settings(self.lambda, self.pivot_site, self.target_site)
    }

    pub fn image_dims(&self) -> ModelDims {
        ModelDims {
            image_feature: self.world.image_feature,
            ..self.dims
        }
    }
}

/// Fresh models sized for `data`, initialised from `seed`.
pub fn init_models(data: &TrainingData, dims: ModelDims, seed: u64) -> Trio {
    let s = SeedStream::new(seed).split("init");
    let v = &data.vocabs;
    Trio {
        captioner: Captioner::new(v.captioner.len(), dims, &mut s.split("captioner").rng()),
        translator: Translator::new(v.source.len(), v.target.len(), dims, &mut s.split("translator").rng()),
        autoencoder: Autoencoder::new(v.autoencoder.len(), dims, &mut s.split("autoencoder").rng()),
    }
}

/// Pretrains all three models from fresh initialisations.
pub fn pretrain_all(cfg: &ExperimentConfig, data: &TrainingData, seed: u64, log: &mut TrainLog) -> Result<Trio> {
    let fresh = init_models(data, cfg.image_dims(), seed);
    Ok(Trio {
        captioner: pretrain(fresh.captioner, data, &cfg.pretrain_plan(Phase::PretrainCaptioner, seed), log)?.model,
        translator: pretrain(fresh.translator, data, &cfg.pretrain_plan(Phase::PretrainTranslator, seed), log)?.model,
        autoencoder: pretrain(fresh.autoencoder, data, &cfg.pretrain_plan(Phase::PretrainAutoencoder, seed), log)?.model,
    })
}

/// Metrics and alignment distances of one trained system.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: MetricReport,
    /// Mean shared-row distances (pivot, target) at the start and end of
    /// the joint phase; equal for the lower bound.
    pub start_distances: (f64, f64),
    /// Distances of the returned (best-validation) models.
    pub end_distances: (f64, f64),
    /// Distances at the last joint epoch, whichever epoch was selected.
    pub final_distances: (f64, f64),
    pub joint_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
    pub oracle: MetricReport,
}

impl SeedResult {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Generates the world for `seed`, pretrains once, then trains and scores
/// every requested variant from the same pretrained start.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, variants: &[Variant]) -> Result<SeedResult> {
    let corpora = gen_corpora(&cfg.world, seed)?;
    let data = TrainingData::new(&corpora, cfg.world.min_freq, cfg.world.max_len)?;
    let mut log = TrainLog::new();
    let pretrained = pretrain_all(cfg, &data, seed, &mut log)?;
    let eval = |m: &Trio| {
        evaluate_pipeline(
            &m.captioner,
            &m.translator,
            &data.vocabs,
            &corpora.eval.features,
            &corpora.references,
            (cfg.pivot_beam, cfg.target_beam),
            3,
        )
    };
    let maps = data.align_maps();
    let mut results = Vec::new();
    for &variant in variants {
        let settings = cfg.settings(variant).or(cfg.settings(Variant::Full)).expect("full variant trains");
        let start = pretrained.align_distances(&maps, &settings)?;
        let (models, steps, last) = match cfg.settings(variant) {
            None => (pretrained.clone(), 0, start),
            Some(settings) => {
                let mut log = TrainLog::new();
                let out = joint_train(pretrained.clone(), &data, &cfg.joint_plan(seed), settings, &mut log)?;
                let last = log
                    .records
                    .iter()
                    .rev()
                    .find_map(|r| match r {
                        LogRecord::JointEpoch { d_pivot, d_target, .. } => Some((*d_pivot, *d_target)),
                        _ => None,
                    })
                    .unwrap_or(start);
                (out.models, out.steps, last)
            }
        };
        results.push(VariantResult {
            variant,
            report: eval(&models)?,
            start_distances: start,
            end_distances: models.align_distances(&maps, &settings)?,
            final_distances: last,
            joint_steps: steps,
        });
    }
    let oracle = oracle_captions(&cfg.world, &corpora.eval, seed);
    let (bleu, cider, self_bleu) = score(&oracle, &corpora.references)?;
    Ok(SeedResult {
        seed,
        variants: results,
        oracle: MetricReport {
            bleu,
            cider,
            self_bleu,
            images: oracle.len(),
            degenerate: 0,
            samples: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world() -> SynthWorldConfig {
        SynthWorldConfig {
            image_captions: 40,
            parallel_pairs: 60,
            target_captions: 30,
            eval_scenes: 6,
            image_feature: 8,
            min_freq: 1,
            ..SynthWorldConfig::default()
        }
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            world: tiny_world(),
            dims: ModelDims {
                width: 8,
                attention: 8,
                image_feature: 8,
            },
            pretrain_epochs: 2,
            pretrain_batch: 8,
            joint_epochs: 2,
            joint_batch: 8,
            ..ExperimentConfig::default()
        }
    }

    fn tiny_data(cfg: &ExperimentConfig, seed: u64) -> TrainingData {
        let corpora = gen_corpora(&cfg.world, seed).unwrap();
        TrainingData::new(&corpora, cfg.world.min_freq, cfg.world.max_len).unwrap()
    }

    fn joint_start(cfg: &ExperimentConfig, data: &TrainingData) -> Trio {
        let mut log = TrainLog::new();
        pretrain_all(cfg, data, 3, &mut log).unwrap()
    }

    #[test]
    fn split_holds_out_the_tail() {
        let s = Split::new((0..20).collect::<Vec<_>>());
        assert_eq!(s.train, (0..18).collect::<Vec<_>>());
        assert_eq!(s.valid, vec![18, 19]);
        let s = Split::new(vec![1]);
        assert_eq!((s.train.len(), s.valid.len()), (1, 0));
        let s = Split::new(vec![1, 2]);
        assert_eq!((s.train.len(), s.valid.len()), (1, 1));
    }

    #[test]
    fn cyclic_batches_visit_every_item_once_per_cycle() {
        let stream = SeedStream::new(5).split("t");
        let (n, b) = (7, 3);
        let drawn: Vec<usize> = (0..14).flat_map(|s| cyclic_batch(stream, n, b, s)).collect();
        for cycle in drawn.chunks(n) {
            let mut c = cycle.to_vec();
            c.sort();
            assert_eq!(c, (0..n).collect::<Vec<_>>());
        }
        assert_ne!(&drawn[..n], &drawn[n..2 * n], "each cycle reshuffles");
        assert_eq!(cyclic_batch(stream, n, b, 4), cyclic_batch(stream, n, b, 4));
    }

    #[test]
    fn plan_defaults_and_validation() {
        let p = TrainPlan::pretrain(Phase::PretrainTranslator, 0);
        assert_eq!((p.lr, p.batch, p.dropout, p.weight_decay), (4e-4, 100, 0.0, 0.0));
        let j = TrainPlan::joint(0);
        assert_eq!((j.lr, j.batch, j.lambda, j.dropout, j.weight_decay), (2e-4, 64, 1.0, 0.3, 1e-5));
        assert!(p.validate().is_ok() && j.validate().is_ok());
        for bad in [
            TrainPlan { batch: 0, ..p.clone() },
            TrainPlan { max_epochs: 0, ..p.clone() },
            TrainPlan { lambda: -1.0, ..j.clone() },
            TrainPlan { lr: f64::NAN, ..j.clone() },
            TrainPlan { dropout: 1.0, ..j.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))), "{bad:?}");
        }
    }

    #[test]
    fn pretrain_rejects_a_plan_for_another_model() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 0);
        let m = init_models(&data, cfg.image_dims(), 0);
        let plan = cfg.pretrain_plan(Phase::PretrainTranslator, 0);
        let err = pretrain(m.captioner.clone(), &data, &plan, &mut TrainLog::new()).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
        let joint = cfg.pretrain_plan(Phase::PretrainCaptioner, 0);
        let err = JointTrainer::new(m, &data, joint, cfg.settings(Variant::Full).unwrap(), &mut TrainLog::new());
        assert!(err.is_err());
    }

    /// Full-batch Adam on the training split until the loss drops below
    /// `target`; returns the step at which it did.
    fn steps_to_memorize(mut model: Captioner, data: &TrainingData, lr: f64, target: f64, max_steps: u64) -> Option<u64> {
        let idx: Vec<usize> = (0..data.captions.train.len()).collect();
        let mut adam = Adam::new(&model.store, AdamConfig::new(lr));
        for step in 0..max_steps {
            let (xe, grads) = {
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape);
                let (loss, _) = model.batch_loss(&mut tape, &b, data, false, &idx, &mut Dropout::off()).unwrap();
                tape.backward(loss).unwrap();
                (tape.value(loss).item(), model.store.grads(&tape, &b))
            };
            if xe < target {
                return Some(step);
            }
            adam.update(&mut model.store, &grads).unwrap();
        }
        None
    }

    #[test]
    fn captioner_memorizes_sixteen_pairs() {
        // 18 captions: the last two are held out, sixteen are trained on.
        let world = SynthWorldConfig {
            image_captions: 18,
            ..tiny_world()
        };
        let corpora = gen_corpora(&world, 1).unwrap();
        let data = TrainingData::new(&corpora, 1, world.max_len).unwrap();
        assert_eq!(data.captions.train.len(), 16);
        let dims = ModelDims {
            image_feature: world.image_feature,
            ..ModelDims::FULL
        };
        let model = init_models(&data, dims, 1).captioner;
        let reached = steps_to_memorize(model, &data, TrainPlan::pretrain(Phase::PretrainCaptioner, 1).lr, 0.1, 200);
        assert!(reached.is_some(), "XE stayed above 0.1 for 200 steps");
    }

    #[test]
    fn pretrain_returns_the_best_validation_epoch() {
        let cfg = ExperimentConfig {
            pretrain_epochs: 4,
            ..tiny_cfg()
        };
        let data = tiny_data(&cfg, 2);
        let m = init_models(&data, cfg.image_dims(), 2).translator;
        let mut log = TrainLog::new();
        let out = pretrain(m, &data, &cfg.pretrain_plan(Phase::PretrainTranslator, 2), &mut log).unwrap();
        let valids: Vec<f64> = log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { valid_xe, .. } => Some(*valid_xe),
                _ => None,
            })
            .collect();
        assert_eq!(valids.len(), 4);
        assert!(valids.iter().all(|&v| out.best_valid <= v));
        assert_eq!(validation_xe(&out.model, &data, 8).unwrap(), out.best_valid);
        assert_eq!(valids[out.best_epoch - 1], out.best_valid);
    }

    #[test]
    fn pretrain_aborts_on_a_non_finite_loss() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 0);
        let mut m = init_models(&data, cfg.image_dims(), 0).autoencoder;
        let before = m.store.clone();
        m.store.iter_mut().next().unwrap().value.data_mut()[0] = f64::NAN;
        let plan = cfg.pretrain_plan(Phase::PretrainAutoencoder, 0);
        match pretrain(m, &data, &plan, &mut TrainLog::new()) {
            Err(Error::Diverged { step, last_good, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good.len(), 1);
                // No update was taken, so the best-so-far store is the
                // (poisoned) starting point and every other value is intact.
                for (a, b) in last_good[0].iter().zip(before.iter()).skip(1) {
                    assert_eq!(a, b);
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn joint_step_at_zero_learning_rate_changes_nothing() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 4);
        let start = init_models(&data, cfg.image_dims(), 4);
        let plan = TrainPlan {
            lr: 0.0,
            ..cfg.joint_plan(4)
        };
        let mut log = TrainLog::new();
        let mut t = JointTrainer::new(start.clone(), &data, plan, cfg.settings(Variant::Full).unwrap(), &mut log).unwrap();
        for _ in 0..3 {
            t.step(&mut log).unwrap();
        }
        for (a, b) in t.state.models.stores().iter().zip(start.stores()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn pivot_only_leaves_the_autoencoder_alone() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 4);
        let start = init_models(&data, cfg.image_dims(), 4);
        let mut log = TrainLog::new();
        let settings = cfg.settings(Variant::PivotOnly).unwrap();
        let mut t = JointTrainer::new(start.clone(), &data, cfg.joint_plan(4), settings, &mut log).unwrap();
        t.run(Some(4), &mut log).unwrap();
        assert_eq!(t.state.models.autoencoder.store, start.autoencoder.store);
        assert_ne!(t.state.models.captioner.store, start.captioner.store);
        assert_ne!(t.state.models.translator.store, start.translator.store);
        assert!(log.records.iter().all(|r| match r {
            LogRecord::JointStep { l_yy, r_target, .. } => *l_yy == 0.0 && *r_target == 0.0,
            _ => true,
        }));
    }

    #[test]
    fn resumed_run_matches_an_uninterrupted_one() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 5);
        let start = joint_start(&cfg, &data);
        let settings = cfg.settings(Variant::Full).unwrap();
        let plan = cfg.joint_plan(5);

        let mut whole_log = TrainLog::new();
        let whole = joint_train(start.clone(), &data, &plan, settings, &mut whole_log).unwrap();

        let mut log = TrainLog::new();
        let mut t = JointTrainer::new(start, &data, plan.clone(), settings, &mut log).unwrap();
        let spe = t.steps_per_epoch();
        // Stop mid-epoch so the resumed half crosses a validation boundary.
        t.run(Some(spe + spe / 2), &mut log).unwrap();
        let saved = t.state.clone();
        drop(t);
        let mut t = JointTrainer::resume(&data, plan, settings, saved).unwrap();
        t.run(None, &mut log).unwrap();
        let resumed = t.finish().unwrap();

        assert_eq!(log, whole_log);
        assert_eq!(resumed.steps, whole.steps);
        assert_eq!(resumed.best_epoch, whole.best_epoch);
        for (a, b) in resumed.models.stores().iter().zip(whole.models.stores()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let cfg = tiny_cfg();
        let run = |seed| {
            let data = tiny_data(&cfg, seed);
            let mut log = TrainLog::new();
            let pre = pretrain_all(&cfg, &data, seed, &mut log).unwrap();
            joint_train(pre, &data, &cfg.joint_plan(seed), cfg.settings(Variant::Full).unwrap(), &mut log).unwrap();
            log.to_jsonl()
        };
        let a = run(8);
        assert_eq!(a, run(8));
        assert_ne!(a, run(9));
    }

    #[test]
    fn log_lines_round_trip_exactly() {
        // Values whose shortest decimal form needs all 17 digits.
        let mut log = TrainLog::new();
        for (i, xe) in [0.19578682681840776, 3.9979714954009378, 0.1 + 0.2, 1e-300, f64::MAX].into_iter().enumerate() {
            log.push(LogRecord::Step {
                phase: Phase::PretrainCaptioner,
                epoch: 1,
                step: i as u64,
                xe,
                grad_norm: xe / 3.0,
            });
        }
        let text = log.to_jsonl();
        let back = TrainLog::from_jsonl(&text).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn joint_log_starts_with_the_pretrained_state_as_best() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 6);
        let start = joint_start(&cfg, &data);
        let mut log = TrainLog::new();
        let out = joint_train(start.clone(), &data, &cfg.joint_plan(6), cfg.settings(Variant::Full).unwrap(), &mut log).unwrap();
        let epochs: Vec<_> = log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::JointEpoch { epoch, valid_total, best, .. } => Some((*epoch, *valid_total, *best)),
                _ => None,
            })
            .collect();
        assert_eq!(epochs[0].0, 0);
        assert!(epochs[0].2);
        assert_eq!(epochs[0].1, joint_validation(&start, &data, cfg.joint_batch).unwrap().total());
        let best = epochs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_valid, best);
        assert_eq!(joint_validation(&out.models, &data, cfg.joint_batch).unwrap().total(), best);
    }

    #[test]
    fn evaluation_is_deterministic_and_counts_every_image() {
        let cfg = tiny_cfg();
        let corpora = gen_corpora(&cfg.world, 7).unwrap();
        let data = TrainingData::new(&corpora, 1, cfg.world.max_len).unwrap();
        let m = init_models(&data, cfg.image_dims(), 7);
        let beams = (BeamConfig::CAPTIONER, BeamConfig::TRANSLATOR);
        let run = || {
            evaluate_pipeline(&m.captioner, &m.translator, &data.vocabs, &corpora.eval.features, &corpora.references, beams, 2)
                .unwrap()
        };
        let r = run();
        assert_eq!(r, run());
        assert_eq!(r.images, cfg.world.eval_scenes);
        assert_eq!(r.samples.len(), 2);
    }

    #[test]
    fn oracle_captions_score_above_untrained_models() {
        let cfg = tiny_cfg();
        let corpora = gen_corpora(&cfg.world, 7).unwrap();
        let data = TrainingData::new(&corpora, 1, cfg.world.max_len).unwrap();
        let m = init_models(&data, cfg.image_dims(), 7);
        let beams = (BeamConfig::CAPTIONER, BeamConfig::TRANSLATOR);
        let r = evaluate_pipeline(&m.captioner, &m.translator, &data.vocabs, &corpora.eval.features, &corpora.references, beams, 0)
            .unwrap();
        let oracle = oracle_captions(&cfg.world, &corpora.eval, 7);
        let (bleu, _, _) = score(&oracle, &corpora.references).unwrap();
        assert!(bleu[0] > r.bleu[0] + 0.2, "oracle {} vs untrained {}", bleu[0], r.bleu[0]);
        assert!(bleu[0] <= 1.0);
    }
}
