//! On-disk formats: corpora, features, vocabularies, checkpoints, locks.
//!
//! Text files are UTF-8, one sentence per line, tokens separated by single
//! spaces. Binary files are little-endian.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synth::{Corpora, ImageSet, Scene, SLOTS};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const FEATURE_MAGIC: &[u8; 4] = b"PVC1";
pub const CHECKPOINT_MAGIC: &str = "PVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8"))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

/// `<stem>.src` and `<stem>.tgt`, line-aligned.
pub fn write_parallel(stem: &Path, pairs: &[(Vec<String>, Vec<String>)]) -> Result<()> {
    let (src, tgt): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    write_sentences(&stem.with_extension("src"), &src)?;
    write_sentences(&stem.with_extension("tgt"), &tgt)
}

pub fn read_parallel(stem: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (sp, tp) = (stem.with_extension("src"), stem.with_extension("tgt"));
    let src = read_sentences(&sp)?;
    let tgt = read_sentences(&tp)?;
    if src.len() != tgt.len() {
        return Err(Error::format(
            stem,
            format!(
                "aligned files differ in length: {} has {} lines, {} has {} lines",
                sp.display(),
                src.len(),
                tp.display(),
                tgt.len()
            ),
        ));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

fn reference_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("eval.ref{k}"))
}

/// One file per reference index; line `i` of every file belongs to image `i`.
pub fn write_references(dir: &Path, refs: &[Vec<Vec<String>>], per_image: usize) -> Result<()> {
    if refs.iter().any(|r| r.len() != per_image) {
        return Err(Error::invalid(format!("every image needs {per_image} references")));
    }
    for k in 0..per_image {
        let lines: Vec<Vec<String>> = refs.iter().map(|r| r[k].clone()).collect();
        write_sentences(&reference_path(dir, k), &lines)?;
    }
    Ok(())
}

pub fn read_references(dir: &Path, per_image: usize) -> Result<Vec<Vec<Vec<String>>>> {
    let mut files = Vec::with_capacity(per_image);
    for k in 0..per_image {
        files.push((reference_path(dir, k), read_sentences(&reference_path(dir, k))?));
    }
    let n = files.first().map_or(0, |f| f.1.len());
    if let Some((path, lines)) = files.iter().find(|f| f.1.len() != n) {
        return Err(Error::format(
            path,
            format!("{} lines, expected {n} like {}", lines.len(), files[0].0.display()),
        ));
    }
    Ok((0..n).map(|i| files.iter().map(|f| f.1[i].clone()).collect()).collect())
}

fn index_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".index");
    PathBuf::from(name)
}

/// Writes the feature matrix and `<path>.index`, one scene id per row.
pub fn write_features(path: &Path, features: &Tensor, scene_ids: &[usize]) -> Result<()> {
    if scene_ids.len() != features.rows() {
        return Err(Error::invalid(format!(
            "{} scene ids for {} feature rows",
            scene_ids.len(),
            features.rows()
        )));
    }
    let mut bytes = Vec::with_capacity(12 + features.len() * 8);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    let index: String = scene_ids.iter().map(|id| format!("{id}\n")).collect();
    write_bytes(&index_path(path), index.as_bytes())
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected PVC1 feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim) = (word(4), word(8));
    let want = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(path, "feature header overflows"))?;
    let payload = &bytes[12..];
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("truncated payload: {count}x{dim} needs {want} bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(count, dim, data)
}

/// Feature matrix and the scene id of each row.
pub fn read_features(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let features = decode_features(path, &read_bytes(path)?)?;
    let ipath = index_path(path);
    let ids = read_text(&ipath)?
        .lines()
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(&ipath, format!("bad scene id `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != features.rows() {
        return Err(Error::format(
            &ipath,
            format!("{} scene ids for {} feature rows", ids.len(), features.rows()),
        ));
    }
    Ok((features, ids))
}

/// One token per line, id order, reserved markers included.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let text: String = vocab.tokens().iter().map(|t| format!("{t}\n")).collect();
    write_bytes(path, text.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let tokens = read_text(path)?.lines().map(str::to_owned).collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes every generated corpus under `dir`.
pub fn save_corpora(dir: &Path, corpora: &Corpora, inventory: [usize; SLOTS], per_image: usize) -> Result<()> {
    let ids = |set: &ImageSet| set.scenes.iter().map(|s| s.index(inventory)).collect::<Vec<_>>();
    write_features(&dir.join("images.feat"), &corpora.images.features, &ids(&corpora.images))?;
    write_sentences(&dir.join("captions.txt"), &corpora.captions)?;
    write_parallel(&dir.join("parallel"), &corpora.parallel)?;
    write_sentences(&dir.join("target_captions.txt"), &corpora.target_captions)?;
    write_features(&dir.join("eval.feat"), &corpora.eval.features, &ids(&corpora.eval))?;
    write_references(dir, &corpora.references, per_image)
}

pub fn load_corpora(dir: &Path, inventory: [usize; SLOTS], per_image: usize) -> Result<Corpora> {
    let load_set = |name: &str| -> Result<ImageSet> {
        let path = dir.join(name);
        let (features, ids) = read_features(&path)?;
        let bound: usize = inventory.iter().product();
        if let Some(bad) = ids.iter().find(|&&id| id >= bound) {
            return Err(Error::format(index_path(&path), format!("scene id {bad} outside the inventory")));
        }
        let scenes = ids.iter().map(|&id| Scene::from_index(id, inventory)).collect();
        Ok(ImageSet { scenes, features })
    };
    let images = load_set("images.feat")?;
    let captions_path = dir.join("captions.txt");
    let captions = read_sentences(&captions_path)?;
    if captions.len() != images.features.rows() {
        return Err(Error::format(
            &captions_path,
            format!("{} captions for {} images", captions.len(), images.features.rows()),
        ));
    }
    let eval = load_set("eval.feat")?;
    let references = read_references(dir, per_image)?;
    if references.len() != eval.features.rows() {
        return Err(Error::format(
            reference_path(dir, 0),
            format!("{} reference lines for {} eval images", references.len(), eval.features.rows()),
        ));
    }
    Ok(Corpora {
        images,
        captions,
        parallel: read_parallel(&dir.join("parallel"))?,
        target_captions: read_sentences(&dir.join("target_captions.txt"))?,
        eval,
        references,
    })
}

/// Named tensors plus provenance. Written as a text manifest `<path>` and a
/// raw payload `<path>.bin` holding every value in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    /// Extra scalar state, sorted by key.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn payload_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".bin");
    PathBuf::from(name)
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, step: u64, params: ParamStore) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            step,
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.params.num_values() * 8);
        for p in self.params.iter() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn manifest(&self, payload: &[u8]) -> String {
        let mut m = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nconfig_hash {}\nstep {}\npayload_sha256 {}\n",
            self.config_hash,
            self.step,
            sha256_hex(payload)
        );
        for (k, v) in &self.meta {
            m.push_str(&format!("meta {k} {v}\n"));
        }
        for p in self.params.iter() {
            m.push_str(&format!("param {} {} {}\n", p.name, p.value.rows(), p.value.cols()));
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for p in self.params.iter() {
            if p.name.is_empty() || p.name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("parameter name `{}` cannot be stored", p.name)));
            }
        }
        let payload = self.payload();
        write_bytes(&payload_path(path), &payload)?;
        write_bytes(path, self.manifest(&payload).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let bad = |msg: String| Error::format(path, msg);
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported checkpoint header `{header}`")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("expected `{name}`, found `{line}`")))
        };
        let config_hash = field("config_hash")?;
        let step = field("step")?
            .parse()
            .map_err(|_| bad("step is not an integer".into()))?;
        let expected = field("payload_sha256")?;
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["meta", k, v @ ..] => {
                    meta.insert(k.to_string(), v.join(" "));
                }
                ["param", name, r, c] => {
                    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad shape in `{line}`")));
                    shapes.push((name.to_string(), dim(r)?, dim(c)?));
                }
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        let ppath = payload_path(path);
        let payload = read_bytes(&ppath)?;
        let found = sha256_hex(&payload);
        if found != expected {
            return Err(Error::HashMismatch { path: ppath, expected, found });
        }
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        if payload.len() != total * 8 {
            return Err(Error::format(
                &ppath,
                format!("payload has {} bytes, manifest needs {}", payload.len(), total * 8),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = ParamStore::new();
        for (name, r, c) in shapes {
            let data: Vec<f64> = values.by_ref().take(r * c).collect();
            params.add(name, Tensor::from_vec(r, c, data)?);
        }
        Ok(Checkpoint { config_hash, step, meta, params })
    }

    /// Fails unless the checkpoint was written under `config_hash`.
    pub fn expect_config(&self, path: &Path, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::HashMismatch {
                path: path.to_owned(),
                expected: config_hash.to_owned(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn meta(&self, path: &Path, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing meta `{key}`")))
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked { path }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
