//! `key = value` run configuration.
//!
//! Every key has a default; unknown keys are rejected. The resolved config
//! (all keys, defaults applied, fixed order) is what gets hashed and written
//! next to outputs.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::models::{ModelDims, TieSite};
use crate::synth::{Slot, SynthWorldConfig};
use crate::trainer::ExperimentConfig;

/// Key, default, description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed of every random stream"),
    ("world.inventory", "8 6 8 4", "subject, verb, object and setting counts (at most 8 6 8 4)"),
    ("world.image_captions", "2000", "image / pivot caption pairs"),
    ("world.parallel_pairs", "4000", "pivot / target translation pairs"),
    ("world.target_captions", "1000", "target caption sentences for the autoencoder"),
    ("world.eval_scenes", "200", "held-out evaluation images"),
    ("world.eval_references", "5", "target references per evaluation image"),
    ("world.noise", "0.1", "standard deviation of image feature noise"),
    ("world.projection_seed", "7", "seed of the scene-to-feature projection"),
    ("world.image_feature", "64", "image feature width"),
    ("world.translation_skew", "1.0", "Zipf exponent of slot values in the parallel corpus"),
    ("world.min_freq", "5", "vocabulary minimum count"),
    ("world.max_len", "16", "maximum sentence length in tokens"),
    ("model.width", "64", "embedding and hidden width"),
    ("model.attention", "64", "attention width"),
    ("pretrain.lr", "4e-4", "pretraining learning rate"),
    ("pretrain.batch", "100", "pretraining batch size"),
    ("pretrain.epochs", "30", "pretraining epoch cap"),
    ("joint.lr", "2e-4", "joint learning rate"),
    ("joint.batch", "64", "joint batch size per corpus"),
    ("joint.epochs", "10", "joint epoch cap"),
    ("joint.lambda", "1.0", "weight of the alignment terms"),
    ("joint.dropout", "0.3", "joint-phase dropout rate"),
    ("joint.weight_decay", "1e-5", "joint-phase decoupled weight decay"),
    ("train.clip", "5.0", "global gradient norm cap"),
    ("train.patience", "5", "epochs without validation improvement before stopping"),
    ("decode.pivot_beam", "5", "captioner beam width"),
    ("decode.pivot_max_len", "16", "captioner length limit"),
    ("decode.target_beam", "10", "translator beam width"),
    ("decode.target_max_len", "20", "translator length limit"),
    ("reg.pivot_site", "output", "captioner matrix tied to the translator source embedding: output | input"),
    ("reg.target_site", "output", "translator and autoencoder target matrices: output | input"),
    ("paths.out", "out", "output root, relative to the config file"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Values in `KEYS` order.
    values: Vec<String>,
    /// Directory the config file lives in; relative paths resolve against it.
    pub base: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect(),
            base: PathBuf::from("."),
        }
    }
}

fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl Config {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// skipped. Later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::parse(&text)?;
        cfg.base = path.parent().map(PathBuf::from).unwrap_or_default();
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = KEYS
            .iter()
            .position(|(k, _, _)| *k == key)
            .ok_or_else(|| config_err(key, "unknown key"))?;
        self.values[i] = value.to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        let i = KEYS
            .iter()
            .position(|(k, _, _)| *k == key)
            .unwrap_or_else(|| panic!("`{key}` is not a config key"));
        &self.values[i]
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| config_err(key, format!("cannot parse `{}`", self.get(key))))
    }

    fn count(&self, key: &str) -> Result<usize> {
        let n: usize = self.num(key)?;
        if n == 0 {
            return Err(config_err(key, "must be at least 1"));
        }
        Ok(n)
    }

    fn site(&self, key: &str) -> Result<TieSite> {
        match self.get(key) {
            "output" => Ok(TieSite::OutputProjection),
            "input" => Ok(TieSite::InputEmbedding),
            other => Err(config_err(key, format!("`{other}` is neither `output` nor `input`"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    /// Checks that every value parses and lies in range.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.experiment()?.world.validate()?;
        Ok(())
    }

    /// The resolved text: every key in order, defaults applied.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for ((k, _, _), v) in KEYS.iter().zip(&self.values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// sha256 of `resolved()`, hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.resolved().as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base.join(self.get("paths.out"))
    }

    pub fn world(&self) -> Result<SynthWorldConfig> {
        let mut world = SynthWorldConfig::default();
        let inv: Vec<usize> = self
            .get("world.inventory")
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| config_err("world.inventory", "expected four counts"))?;
        if inv.len() != 4 {
            return Err(config_err("world.inventory", "expected four counts"));
        }
        for slot in Slot::ALL {
            let k = slot as usize;
            let n = inv[k];
            if n == 0 || n > world.lexicon[k].len() {
                return Err(config_err(
                    "world.inventory",
                    format!("{slot:?} count {n} must lie in 1..={}", world.lexicon[k].len()),
                ));
            }
            world.lexicon[k].truncate(n);
        }
        world.caption_only.retain(|&(slot, v)| v < inv[slot as usize]);
        world.image_captions = self.count("world.image_captions")?;
        world.parallel_pairs = self.count("world.parallel_pairs")?;
        world.target_captions = self.count("world.target_captions")?;
        world.eval_scenes = self.count("world.eval_scenes")?;
        world.eval_references = self.count("world.eval_references")?;
        world.noise = self.num("world.noise")?;
        world.projection_seed = self.num("world.projection_seed")?;
        world.image_feature = self.count("world.image_feature")?;
        world.translation_skew = self.num("world.translation_skew")?;
        world.min_freq = self.count("world.min_freq")?;
        world.max_len = self.count("world.max_len")?;
        Ok(world)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let world = self.world()?;
        let beam = |b: &str, l: &str| -> Result<BeamConfig> {
            Ok(BeamConfig {
                beam: self.count(b)?,
                max_len: self.count(l)?,
            })
        };
        let cfg = ExperimentConfig {
            dims: ModelDims {
                width: self.count("model.width")?,
                attention: self.count("model.attention")?,
                image_feature: world.image_feature,
            },
            world,
            pretrain_epochs: self.count("pretrain.epochs")?,
            pretrain_batch: self.count("pretrain.batch")?,
            pretrain_lr: self.num("pretrain.lr")?,
            joint_epochs: self.count("joint.epochs")?,
            joint_batch: self.count("joint.batch")?,
            joint_lr: self.num("joint.lr")?,
            lambda: self.num("joint.lambda")?,
            dropout: self.num("joint.dropout")?,
            weight_decay: self.num("joint.weight_decay")?,
            clip: self.num("train.clip")?,
            patience: self.count("train.patience")?,
            pivot_site: self.site("reg.pivot_site")?,
            target_site: self.site("reg.target_site")?,
            pivot_beam: beam("decode.pivot_beam", "decode.pivot_max_len")?,
            target_beam: beam("decode.target_beam", "decode.target_max_len")?,
        };
        let checks = [
            ("pretrain.lr", cfg.pretrain_lr >= 0.0 && cfg.pretrain_lr.is_finite()),
            ("joint.lr", cfg.joint_lr >= 0.0 && cfg.joint_lr.is_finite()),
            ("joint.lambda", cfg.lambda >= 0.0 && cfg.lambda.is_finite()),
            ("joint.dropout", (0.0..1.0).contains(&cfg.dropout)),
            ("joint.weight_decay", cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()),
            ("train.clip", cfg.clip > 0.0 && cfg.clip.is_finite()),
        ];
        if let Some((key, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(config_err(key, format!("`{}` is out of range", self.get(key))));
        }
        Ok(cfg)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Documentation of every key with its default.
pub fn describe() -> String {
    let mut out = String::new();
    for (k, d, desc) in KEYS {
        let _ = writeln!(out, "{k} = {d}    # {desc}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_validate() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        let e = cfg.experiment().unwrap();
        assert_eq!(e.lambda, 1.0);
        assert_eq!(e.pivot_beam, BeamConfig::CAPTIONER);
        assert_eq!(e.target_beam, BeamConfig::TRANSLATOR);
        assert_eq!(e.pretrain_lr, 4e-4);
        assert_eq!(e.pretrain_batch, 100);
        assert_eq!(e.joint_lr, 2e-4);
        assert_eq!(e.joint_batch, 64);
        assert_eq!(e.world, SynthWorldConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = Config::parse("joint.lamda = 2").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "joint.lamda"), "{err}");
    }

    #[test]
    fn bad_value_names_its_key() {
        for (text, key) in [
            ("joint.lambda = -1", "joint.lambda"),
            ("pretrain.batch = 0", "pretrain.batch"),
            ("reg.pivot_site = middle", "reg.pivot_site"),
            ("world.inventory = 9 6 8 4", "world.inventory"),
            ("seed = x", "seed"),
        ] {
            let err = Config::parse(text).unwrap_err();
            assert!(matches!(&err, Error::Config { key: k, .. } if k == key), "{text}: {err}");
        }
        assert!(Config::parse("no equals sign").is_err());
    }

    #[test]
    fn comments_overrides_and_hash() {
        let a = Config::parse("# comment\nseed = 3   # trailing\n\nseed = 4\n").unwrap();
        assert_eq!(a.get("seed"), "4");
        let b = Config::parse("seed = 4").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), Config::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn resolved_text_parses_back_to_itself() {
        let cfg = Config::parse("joint.lambda = 0.5\nworld.inventory = 6 5 6 3").unwrap();
        let again = Config::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_eq!(again.world().unwrap().inventory(), [6, 5, 6, 3]);
    }

    #[test]
    fn every_key_is_documented() {
        let doc = describe();
        for (k, d, _) in KEYS {
            assert!(doc.contains(&format!("{k} = {d}")));
        }
    }
}
