//! The subcommands behind the `pivotcap` binary.
//!
//! Layout under the configured output root:
//!
//! ```text
//! data/                 corpora, features, vocabularies
//! pretrain-<model>/     model.ckpt, train.log
//! joint-<variant>/      model.ckpt, state.ckpt, train.log
//! evaluate/             report.txt
//! ```
//!
//! Every directory also gets `config.resolved` and, where training ran,
//! `timing.txt`. Wall-clock time lives only in `timing.txt`, so every other
//! file is a pure function of the config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Config;
use crate::decode::{two_stage_caption, PipelineVocabs};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::{self, Checkpoint, DirLock};
use crate::models::ModelDims;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::synth::{gen_corpora, Corpora};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate_pipeline, init_models, merge, pretrain, ExperimentConfig, JointState, JointTrainer, LogRecord, Phase,
    TrainLog, TrainPlan, Trainable, TrainingData, Trio, Variant,
};

pub const CONFIG_FILE: &str = "config.resolved";
pub const TIMING_FILE: &str = "timing.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train.log";

/// Which images `caption` decodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionTarget {
    Index(usize),
    All,
}

pub struct Runtime {
    pub config: Config,
    pub hash: String,
    pub exp: ExperimentConfig,
    pub seed: u64,
}

pub fn pretrain_phase(which: &str) -> Option<Phase> {
    match which {
        "captioner" => Some(Phase::PretrainCaptioner),
        "translator" => Some(Phase::PretrainTranslator),
        "autoencoder" => Some(Phase::PretrainAutoencoder),
        _ => None,
    }
}

fn models_dir(phase: Phase) -> &'static str {
    phase.name()
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, path: &Path, key: &str) -> Result<T> {
    ckpt.meta(path, key)?
        .parse()
        .map_err(|_| Error::format(path, format!("meta `{key}` does not parse")))
}

impl Runtime {
    pub fn new(config: Config) -> Result<Self> {
        let exp = config.experiment()?;
        Ok(Runtime {
            hash: config.hash(),
            seed: config.seed()?,
            exp,
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Runtime::new(Config::load(path)?)
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.config.out_dir().join(name)
    }

    fn begin(&self, name: &str) -> Result<(PathBuf, DirLock)> {
        let dir = self.dir(name);
        let lock = DirLock::acquire(&dir)?;
        io::write_bytes(&dir.join(CONFIG_FILE), self.config.resolved().as_bytes())?;
        Ok((dir, lock))
    }

    fn write_timing(dir: &Path, started: Instant) -> Result<()> {
        let text = format!("elapsed_seconds {:.3}\n", started.elapsed().as_secs_f64());
        io::write_bytes(&dir.join(TIMING_FILE), text.as_bytes())
    }

    /// Fails unless `dir` was produced under this exact config.
    fn expect_same_config(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        let found = Config::parse(&io::read_text(&path)?)?.hash();
        if found != self.hash {
            return Err(Error::HashMismatch {
                path,
                expected: self.hash.clone(),
                found,
            });
        }
        Ok(())
    }

    fn header(&self, phase: Phase) -> LogRecord {
        LogRecord::Header {
            phase,
            seed: self.seed,
            config_hash: self.hash.clone(),
        }
    }

    pub fn gen_data(&self) -> Result<String> {
        let (dir, _lock) = self.begin("data")?;
        let world = &self.exp.world;
        let corpora = gen_corpora(world, self.seed)?;
        io::save_corpora(&dir, &corpora, world.inventory(), world.eval_references)?;
        let vocabs = corpora.vocabs(world.min_freq)?;
        for (name, v) in [
            ("captioner", &vocabs.captioner),
            ("source", &vocabs.source),
            ("target", &vocabs.target),
            ("autoencoder", &vocabs.autoencoder),
        ] {
            io::write_vocab(&dir.join(format!("{name}.vocab")), v)?;
        }
        Ok(format!(
            "wrote {}: {} image captions, {} parallel pairs, {} target captions, {} eval images\n\
             vocabularies: captioner {}, source {}, target {}, autoencoder {}\n",
            dir.display(),
            corpora.captions.len(),
            corpora.parallel.len(),
            corpora.target_captions.len(),
            corpora.eval.features.rows(),
            vocabs.captioner.len(),
            vocabs.source.len(),
            vocabs.target.len(),
            vocabs.autoencoder.len(),
        ))
    }

    pub fn corpora(&self) -> Result<Corpora> {
        let dir = self.dir("data");
        self.expect_same_config(&dir)?;
        let world = &self.exp.world;
        let corpora = io::load_corpora(&dir, world.inventory(), world.eval_references)?;
        let vocabs = corpora.vocabs(world.min_freq)?;
        for (name, v) in [
            ("captioner", &vocabs.captioner),
            ("source", &vocabs.source),
            ("target", &vocabs.target),
            ("autoencoder", &vocabs.autoencoder),
        ] {
            let path = dir.join(format!("{name}.vocab"));
            if &io::read_vocab(&path)? != v {
                return Err(Error::format(path, "vocabulary does not match the corpora"));
            }
        }
        Ok(corpora)
    }

    fn training_data(&self, corpora: &Corpora) -> Result<TrainingData> {
        TrainingData::new(corpora, self.exp.world.min_freq, self.exp.world.max_len)
    }

    fn dims(&self) -> ModelDims {
        self.exp.image_dims()
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_config(path, &self.hash)?;
        Ok(ckpt)
    }

    pub fn pretrain(&self, phase: Phase) -> Result<String> {
        let data = self.training_data(&self.corpora()?)?;
        let fresh = init_models(&data, self.dims(), self.seed);
        match phase {
            Phase::PretrainCaptioner => self.pretrain_model(fresh.captioner, &data),
            Phase::PretrainTranslator => self.pretrain_model(fresh.translator, &data),
            Phase::PretrainAutoencoder => self.pretrain_model(fresh.autoencoder, &data),
            Phase::Joint => Err(Error::invalid("pretrain needs a model, not the joint phase")),
        }
    }

    fn pretrain_model<M: Trainable>(&self, model: M, data: &TrainingData) -> Result<String> {
        let started = Instant::now();
        let (dir, _lock) = self.begin(models_dir(M::PHASE))?;
        let mut log = TrainLog::new();
        log.push(self.header(M::PHASE));
        let plan = self.exp.pretrain_plan(M::PHASE, self.seed);
        let result = pretrain(model, data, &plan, &mut log);
        io::write_bytes(&dir.join(LOG_FILE), log.to_jsonl().as_bytes())?;
        let trained = match result {
            Ok(t) => t,
            Err(Error::Diverged { step, reason, last_good }) => {
                let path = dir.join("last_good.ckpt");
                Checkpoint::new(&self.hash, step, merge(&last_good)).save(&path)?;
                return Err(Error::Diverged {
                    step,
                    reason: format!("{reason}; last good parameters saved to {}", path.display()),
                    last_good,
                });
            }
            Err(e) => return Err(e),
        };
        let mut ckpt = Checkpoint::new(&self.hash, trained.steps, trained.model.store().clone());
        ckpt.meta.insert("best_epoch".into(), trained.best_epoch.to_string());
        ckpt.meta.insert("best_valid".into(), fmt_f64(trained.best_valid));
        ckpt.save(&dir.join(MODEL_FILE))?;
        Self::write_timing(&dir, started)?;
        Ok(format!(
            "{}: best epoch {} with validation xe {:.4} after {} steps\n",
            M::PHASE.name(),
            trained.best_epoch,
            trained.best_valid,
            trained.steps
        ))
    }

    /// The three pretrained models.
    pub fn pretrained(&self, data: &TrainingData) -> Result<Trio> {
        let mut trio = init_models(data, self.dims(), self.seed);
        for phase in [Phase::PretrainCaptioner, Phase::PretrainTranslator, Phase::PretrainAutoencoder] {
            let path = self.dir(models_dir(phase)).join(MODEL_FILE);
            let ckpt = self.load_checkpoint(&path)?;
            let store = match phase {
                Phase::PretrainCaptioner => &mut trio.captioner.store,
                Phase::PretrainTranslator => &mut trio.translator.store,
                _ => &mut trio.autoencoder.store,
            };
            store
                .load_from(&ckpt.params)
                .map_err(|e| Error::format(&path, e.to_string()))?;
        }
        Ok(trio)
    }

    /// Runs (or continues) the joint phase of `variant`. The lower bound
    /// only bundles the pretrained models into one checkpoint.
    pub fn joint_train(&self, variant: Variant, max_steps: Option<u64>, resume: bool) -> Result<String> {
        let started = Instant::now();
        let data = self.training_data(&self.corpora()?)?;
        let pretrained = self.pretrained(&data)?;
        let (dir, _lock) = self.begin(&format!("joint-{}", variant.name()))?;
        let Some(settings) = self.exp.settings(variant) else {
            Checkpoint::new(&self.hash, 0, pretrained.merged()).save(&dir.join(MODEL_FILE))?;
            return Ok(format!("lower-bound: bundled the pretrained models into {}\n", dir.display()));
        };
        let plan = self.exp.joint_plan(self.seed);
        let state_path = dir.join(STATE_FILE);
        let log_path = dir.join(LOG_FILE);
        let mut log;
        let mut trainer = if resume && state_path.exists() {
            log = TrainLog::from_jsonl(&io::read_text(&log_path)?).map_err(|e| Error::format(&log_path, e.to_string()))?;
            let state = self.load_state(&state_path, pretrained, &plan)?;
            JointTrainer::resume(&data, plan, settings, state)?
        } else {
            log = TrainLog::new();
            log.push(self.header(Phase::Joint));
            JointTrainer::new(pretrained, &data, plan, settings, &mut log)?
        };
        let result = trainer.run(max_steps, &mut log);
        io::write_bytes(&log_path, log.to_jsonl().as_bytes())?;
        result?;
        self.save_state(&state_path, &trainer.state)?;
        let (step, finished) = (trainer.state.step, trainer.state.finished);
        if !finished {
            return Ok(format!(
                "{}: paused at step {step}; rerun with --resume to continue\n",
                variant.name()
            ));
        }
        let outcome = trainer.finish()?;
        let mut ckpt = Checkpoint::new(&self.hash, outcome.steps, outcome.models.merged());
        ckpt.meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
        ckpt.meta.insert("best_valid".into(), fmt_f64(outcome.best_valid));
        ckpt.meta.insert("variant".into(), variant.name().into());
        ckpt.save(&dir.join(MODEL_FILE))?;
        Self::write_timing(&dir, started)?;
        Ok(format!(
            "{}: best epoch {} with validation total {:.4} after {} steps\n",
            variant.name(),
            outcome.best_epoch,
            outcome.best_valid,
            outcome.steps
        ))
    }

    fn save_state(&self, path: &Path, state: &JointState) -> Result<()> {
        let prefixed = |prefix: &str, store: &ParamStore| {
            let mut out = ParamStore::new();
            for p in store.iter() {
                out.add(format!("{prefix}/{}", p.name), p.value.clone());
            }
            out
        };
        let moments = |adam: &Adam, which: &str, store: &ParamStore| {
            let mut out = ParamStore::new();
            let values = if which == "m" { &adam.m } else { &adam.v };
            for (p, t) in store.iter().zip(values) {
                out.add(format!("adam.{which}/{}", p.name), t.clone());
            }
            out
        };
        let mut parts = vec![prefixed("model", &state.models.merged()), prefixed("best", &merge(&state.best))];
        for (adam, store) in state.adam.iter().zip(state.models.stores()) {
            parts.push(moments(adam, "m", store));
            parts.push(moments(adam, "v", store));
        }
        let mut ckpt = Checkpoint::new(&self.hash, state.step, merge(&parts));
        for (i, adam) in state.adam.iter().enumerate() {
            ckpt.meta.insert(format!("adam_step.{i}"), adam.step.to_string());
        }
        ckpt.meta.insert("best_valid".into(), fmt_f64(state.best_valid));
        ckpt.meta.insert("best_epoch".into(), state.best_epoch.to_string());
        ckpt.meta.insert("bad_epochs".into(), state.bad_epochs.to_string());
        ckpt.meta.insert("finished".into(), state.finished.to_string());
        ckpt.save(path)
    }

    fn load_state(&self, path: &Path, template: Trio, plan: &TrainPlan) -> Result<JointState> {
        let ckpt = self.load_checkpoint(path)?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let section = |prefix: &str| {
            let mut out = ParamStore::new();
            for p in ckpt.params.iter() {
                if let Some(name) = p.name.strip_prefix(prefix) {
                    out.add(name, p.value.clone());
                }
            }
            out
        };
        let mut models = template;
        models.load_merged(&section("model/")).map_err(bad)?;
        let mut best_trio = models.clone();
        best_trio.load_merged(&section("best/")).map_err(bad)?;
        let (m, v) = (section("adam.m/"), section("adam.v/"));
        let mut adam = models.stores().map(|s| Adam::new(s, plan.adam()));
        for (i, (a, store)) in adam.iter_mut().zip(models.stores()).enumerate() {
            let mut ms = store.clone();
            ms.load_from(&m).map_err(bad)?;
            let mut vs = store.clone();
            vs.load_from(&v).map_err(bad)?;
            a.m = ms.iter().map(|p| p.value.clone()).collect::<Vec<Tensor>>();
            a.v = vs.iter().map(|p| p.value.clone()).collect::<Vec<Tensor>>();
            a.step = parse_meta(&ckpt, path, &format!("adam_step.{i}"))?;
        }
        Ok(JointState {
            best: best_trio.stores().map(Clone::clone),
            models,
            adam,
            step: ckpt.step,
            best_valid: parse_meta(&ckpt, path, "best_valid")?,
            best_epoch: parse_meta(&ckpt, path, "best_epoch")?,
            bad_epochs: parse_meta(&ckpt, path, "bad_epochs")?,
            finished: parse_meta(&ckpt, path, "finished")?,
        })
    }

    /// Captioner and translator from a bundled checkpoint.
    fn system(&self, data: &TrainingData, path: &Path) -> Result<Trio> {
        let ckpt = self.load_checkpoint(path)?;
        let mut trio = init_models(data, self.dims(), self.seed);
        trio.load_merged(&ckpt.params)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(trio)
    }

    pub fn caption(&self, ckpt: &Path, target: CaptionTarget) -> Result<String> {
        let corpora = self.corpora()?;
        let data = self.training_data(&corpora)?;
        let trio = self.system(&data, ckpt)?;
        let feats = &corpora.eval.features;
        let rows: Vec<usize> = match target {
            CaptionTarget::All => (0..feats.rows()).collect(),
            CaptionTarget::Index(i) if i < feats.rows() => vec![i],
            CaptionTarget::Index(i) => {
                return Err(Error::Index {
                    what: "feature index",
                    index: i,
                    bound: feats.rows(),
                })
            }
        };
        let pv = PipelineVocabs {
            captioner: &data.vocabs.captioner,
            source: &data.vocabs.source,
        };
        let mut out = String::new();
        for r in rows {
            let line = match two_stage_caption(
                &trio.captioner,
                &trio.translator,
                &pv,
                feats.row(r),
                self.exp.pivot_beam,
                self.exp.target_beam,
            ) {
                Ok(s) => format!(
                    "{r}\t{}\t{}",
                    data.vocabs.captioner.decode_line(&s.pivot.seq),
                    data.vocabs.target.decode_line(&s.target.seq)
                ),
                Err(Error::DegeneratePivot) => format!("{r}\t\t"),
                Err(e) => return Err(e),
            };
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    /// Scores every checkpoint on the evaluation set, one row each.
    pub fn evaluate(&self, ckpts: &[PathBuf]) -> Result<String> {
        if ckpts.is_empty() {
            return Err(Error::invalid("evaluate needs at least one checkpoint"));
        }
        let corpora = self.corpora()?;
        let data = self.training_data(&corpora)?;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<32} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9} {:>10}",
            "checkpoint", "B@1", "B@2", "B@3", "B@4", "CIDEr", "Self-B@5", "degenerate"
        );
        for path in ckpts {
            let trio = self.system(&data, path)?;
            let r = evaluate_pipeline(
                &trio.captioner,
                &trio.translator,
                &data.vocabs,
                &corpora.eval.features,
                &corpora.references,
                (self.exp.pivot_beam, self.exp.target_beam),
                0,
            )?;
            let label = path
                .parent()
                .and_then(Path::file_name)
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            let _ = writeln!(
                out,
                "{:<32} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>10}",
                label, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.cider, r.self_b5(), r.degenerate
            );
        }
        let (dir, _lock) = self.begin("evaluate")?;
        io::write_bytes(&dir.join("report.txt"), out.as_bytes())?;
        Ok(out)
    }

    /// The finite-difference suites. The flag is false if any suite fails.
    pub fn gradcheck(&self) -> Result<(String, bool)> {
        let results = gradcheck::run_all(self.seed)?;
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>12} {:>12}  status", "suite", "rel_error", "unfloored");
        for r in &results {
            let _ = writeln!(
                out,
                "{:<24} {:>12.3e} {:>12.3e}  {}",
                r.name,
                r.rel_error(),
                r.unfloored_rel_error(),
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        Ok((out, results.iter().all(|r| r.passed())))
    }
}
