//! A small deterministic world of scenes and the four corpora built from it.
//!
//! A scene fills four slots (subject, verb, object, setting). Every slot
//! value is a short phrase with a word-for-word pivot and target wording.
//! Sentences come from templates: caption-domain templates for the image
//! captions, the target captions and the evaluation references, and
//! translation-domain templates for the parallel corpus. The two domains use
//! disjoint sets of function ("style") words and different slot frequencies,
//! so a translator trained on one sees foreign text when fed the other.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::tensor::Tensor;
use crate::vocab::{build_vocab, Vocab};
use Item::{Fill, Style};
use Slot::{Object as O, Setting as L, Subject as S, Verb as V};

pub const SLOTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Subject = 0,
    Verb = 1,
    Object = 2,
    Setting = 3,
}

impl Slot {
    pub const ALL: [Slot; SLOTS] = [Slot::Subject, Slot::Verb, Slot::Object, Slot::Setting];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scene(pub [usize; SLOTS]);

impl Scene {
    pub fn get(self, slot: Slot) -> usize {
        self.0[slot as usize]
    }

    /// Dense index in `0..Π inventory`.
    pub fn index(self, inventory: [usize; SLOTS]) -> usize {
        self.0.iter().zip(inventory).fold(0, |acc, (&v, n)| acc * n + v)
    }

    pub fn from_index(mut index: usize, inventory: [usize; SLOTS]) -> Scene {
        let mut s = [0; SLOTS];
        for k in (0..SLOTS).rev() {
            s[k] = index % inventory[k];
            index /= inventory[k];
        }
        Scene(s)
    }
}

/// One template position: a style word of the template's domain, or a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Item {
    Style(usize),
    Fill(Slot),
}

/// Style words (pivot and target wording of each) and the templates that
/// use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub style: Vec<(String, String)>,
    pub templates: Vec<Vec<Item>>,
}

/// Pivot and target wording of one slot value.
#[derive(Clone, Debug, PartialEq)]
pub struct Phrase {
    pub pivot: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Pivot,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorldConfig {
    /// `lexicon[slot][value]`
    pub lexicon: [Vec<Phrase>; SLOTS],
    pub caption: Domain,
    pub translation: Domain,
    /// Slot values that never occur in the translation domain.
    pub caption_only: Vec<(Slot, usize)>,
    /// Translation-domain slot values are drawn with weight `(v + 1)^-skew`.
    pub translation_skew: f64,
    pub image_feature: usize,
    pub projection_seed: u64,
    pub noise: f64,
    pub image_captions: usize,
    pub parallel_pairs: usize,
    pub target_captions: usize,
    pub eval_scenes: usize,
    pub eval_references: usize,
    pub min_freq: usize,
    pub max_len: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn phrases(pairs: &[(&str, &str)]) -> Vec<Phrase> {
    pairs
        .iter()
        .map(|(p, t)| Phrase {
            pivot: words(p),
            target: words(t),
        })
        .collect()
}

fn style(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(p, t)| (p.to_string(), t.to_string())).collect()
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        let subjects = phrases(&[
            ("laode nanren", "old man"),
            ("nianqing nvzi", "young woman"),
            ("xiaode nanhai", "small boy"),
            ("youxiao nvhai", "little girl"),
            ("zongse gou", "brown dog"),
            ("baise mao", "white cat"),
            ("gaoda qiuyuan", "tall player"),
            ("manglu chushi", "busy chef"),
        ]);
        let verbs = phrases(&[
            ("nazhe", "holds"),
            ("banyun", "carries"),
            ("kanzhe", "watches"),
            ("rengchu", "throws"),
            ("tuidong", "pushes"),
            ("qingjie", "cleans"),
        ]);
        let objects = phrases(&[
            ("hongse qiu", "red ball"),
            ("muzhi xiangzi", "wooden box"),
            ("lanse fengzheng", "blue kite"),
            ("lvse beibao", "green bag"),
            ("zhizhi ditu", "paper map"),
            ("jinshu tongzi", "metal bucket"),
            ("huangse yusan", "yellow umbrella"),
            ("changchang shengzi", "long rope"),
        ]);
        let settings = phrases(&[
            ("chengshi gongyuan", "city park"),
            ("shatan haibian", "sandy beach"),
            ("yongji jiedao", "crowded street"),
            ("anjing chufang", "quiet kitchen"),
        ]);
        let caption = Domain {
            style: style(&[
                ("yige", "a"),
                ("shi", "is"),
                ("zai", "in"),
                ("nage", "the"),
                ("you", "there"),
                ("ta", "that"),
            ]),
            templates: vec![
                vec![Style(0), Fill(S), Fill(V), Fill(O), Style(2), Style(3), Fill(L)],
                vec![Style(2), Style(3), Fill(L), Style(0), Fill(S), Fill(V), Fill(O)],
                vec![Style(4), Style(1), Style(0), Fill(S), Style(5), Fill(V), Fill(O)],
                vec![Style(4), Style(1), Style(0), Fill(S), Fill(V), Fill(O), Style(2), Style(3), Fill(L)],
            ],
        };
        let translation = Domain {
            style: style(&[
                ("zhege", "this"),
                ("yu", "at"),
                ("le", "."),
                ("zuotian", "yesterday"),
                ("jushuo", "reportedly"),
                ("bei", "was"),
                ("kanjian", "seen"),
            ]),
            templates: vec![
                vec![Style(0), Fill(S), Fill(V), Fill(O), Style(1), Fill(L), Style(2)],
                vec![Style(3), Style(1), Fill(L), Style(0), Fill(S), Fill(V), Fill(O), Style(2)],
                vec![Style(0), Fill(S), Style(4), Fill(V), Fill(O), Style(2)],
                vec![Style(0), Fill(S), Style(5), Style(6), Style(1), Fill(L), Style(2)],
                vec![Style(3), Style(0), Fill(S), Fill(V), Fill(O), Style(2)],
            ],
        };
        SynthWorldConfig {
            lexicon: [subjects, verbs, objects, settings],
            caption,
            translation,
            caption_only: vec![(Slot::Object, 7)],
            translation_skew: 1.0,
            image_feature: 64,
            projection_seed: 7,
            noise: 0.1,
            image_captions: 2000,
            parallel_pairs: 4000,
            target_captions: 1000,
            eval_scenes: 200,
            eval_references: 5,
            min_freq: 5,
            max_len: 16,
        }
    }
}

fn template_len(t: &[Item], lexicon: &[Vec<Phrase>; SLOTS], side: Side) -> usize {
    t.iter()
        .map(|item| match *item {
            Style(_) => 1,
            Fill(slot) => lexicon[slot as usize]
                .iter()
                .map(|p| match side {
                    Side::Pivot => p.pivot.len(),
                    Side::Target => p.target.len(),
                })
                .max()
                .unwrap_or(0),
        })
        .sum()
}

impl SynthWorldConfig {
    pub fn inventory(&self) -> [usize; SLOTS] {
        [0, 1, 2, 3].map(|k| self.lexicon[k].len())
    }

    pub fn num_scenes(&self) -> usize {
        self.inventory().iter().product()
    }

    /// Content words (slot wording) of one side.
    pub fn content_words(&self, side: Side) -> BTreeSet<String> {
        self.lexicon
            .iter()
            .flatten()
            .flat_map(|p| match side {
                Side::Pivot => p.pivot.clone(),
                Side::Target => p.target.clone(),
            })
            .collect()
    }

    /// Content words the translation domain can produce.
    pub fn translation_content_words(&self, side: Side) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for slot in Slot::ALL {
            for (v, p) in self.lexicon[slot as usize].iter().enumerate() {
                if !self.caption_only.contains(&(slot, v)) {
                    out.extend(match side {
                        Side::Pivot => p.pivot.clone(),
                        Side::Target => p.target.clone(),
                    });
                }
            }
        }
        out
    }

    /// Fraction of caption-domain content words also used in the
    /// translation domain.
    pub fn content_overlap(&self) -> f64 {
        let all = self.content_words(Side::Pivot);
        let shared = self.translation_content_words(Side::Pivot);
        shared.len() as f64 / all.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: key.to_string(),
                msg,
            })
        };
        for (k, values) in self.lexicon.iter().enumerate() {
            if values.is_empty() {
                return bad("inventory", format!("slot {k} has no values"));
            }
            for p in values {
                if p.pivot.len() != p.target.len() || p.pivot.is_empty() {
                    return bad("lexicon", format!("phrase {:?} / {:?} is not word-aligned", p.pivot, p.target));
                }
            }
        }
        // Word-level bijection over content and style words of both sides.
        let mut pivot = BTreeSet::new();
        let mut target = BTreeSet::new();
        let style = self.caption.style.iter().chain(&self.translation.style);
        let content = self
            .lexicon
            .iter()
            .flatten()
            .flat_map(|p| p.pivot.iter().cloned().zip(p.target.iter().cloned()));
        for (p, t) in style.cloned().chain(content) {
            if !pivot.insert(p.clone()) || !target.insert(t.clone()) {
                return bad("lexicon", format!("word `{p}` / `{t}` is used twice"));
            }
        }
        for (name, d) in [("caption", &self.caption), ("translation", &self.translation)] {
            if d.templates.is_empty() {
                return bad("templates", format!("{name} domain has no templates"));
            }
            for t in &d.templates {
                if !t.iter().any(|i| matches!(i, Fill(_))) {
                    return bad("templates", format!("{name} template {t:?} fills no slot"));
                }
                if let Some(&Style(i)) = t.iter().find(|i| matches!(i, Style(j) if *j >= d.style.len())) {
                    return bad("templates", format!("{name} template uses style word {i} of {}", d.style.len()));
                }
                for side in [Side::Pivot, Side::Target] {
                    let n = template_len(t, &self.lexicon, side);
                    if n > self.max_len {
                        return bad("max_len", format!("{name} template of {n} tokens exceeds {}", self.max_len));
                    }
                }
            }
        }
        for &(slot, v) in &self.caption_only {
            if v >= self.lexicon[slot as usize].len() {
                return bad("caption_only", format!("{slot:?} value {v} out of range"));
            }
        }
        for slot in Slot::ALL {
            let n = self.lexicon[slot as usize].len();
            if (0..n).all(|v| self.caption_only.contains(&(slot, v))) {
                return bad("caption_only", format!("every {slot:?} value is caption-only"));
            }
        }
        if self.content_overlap() < 0.8 {
            return bad("caption_only", format!("content overlap {:.2} is below 0.8", self.content_overlap()));
        }
        if self.image_feature == 0 {
            return bad("image_feature", "must be positive".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise", format!("{} must be finite and ≥ 0", self.noise));
        }
        if !(self.translation_skew >= 0.0) || !self.translation_skew.is_finite() {
            return bad("translation_skew", format!("{} must be finite and ≥ 0", self.translation_skew));
        }
        for (key, n) in [
            ("image_captions", self.image_captions),
            ("parallel_pairs", self.parallel_pairs),
            ("target_captions", self.target_captions),
            ("eval_scenes", self.eval_scenes),
            ("eval_references", self.eval_references),
            ("min_freq", self.min_freq),
        ] {
            if n == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if self.eval_scenes >= self.num_scenes() {
            return bad(
                "eval_scenes",
                format!("{} eval scenes leave no training scenes out of {}", self.eval_scenes, self.num_scenes()),
            );
        }
        Ok(())
    }

    /// Fills `template` for `scene`.
    pub fn realize(&self, domain: &Domain, template: usize, scene: Scene, side: Side) -> Vec<String> {
        let mut out = Vec::new();
        for item in &domain.templates[template] {
            match *item {
                Style(i) => {
                    let (p, t) = &domain.style[i];
                    out.push(if side == Side::Pivot { p.clone() } else { t.clone() });
                }
                Fill(slot) => {
                    let p = &self.lexicon[slot as usize][scene.get(slot)];
                    out.extend_from_slice(if side == Side::Pivot { &p.pivot } else { &p.target });
                }
            }
        }
        out
    }

    /// Word-for-word translation from one side to the other. `None` if a
    /// word is outside the lexicon.
    pub fn translate(&self, sentence: &[String], from: Side) -> Option<Vec<String>> {
        let pairs: Vec<(&String, &String)> = self
            .caption
            .style
            .iter()
            .chain(&self.translation.style)
            .map(|(p, t)| (p, t))
            .chain(
                self.lexicon
                    .iter()
                    .flatten()
                    .flat_map(|p| p.pivot.iter().zip(&p.target)),
            )
            .collect();
        sentence
            .iter()
            .map(|w| {
                pairs.iter().find_map(|&(p, t)| match from {
                    Side::Pivot if p == w => Some(t.clone()),
                    Side::Target if t == w => Some(p.clone()),
                    _ => None,
                })
            })
            .collect()
    }

    /// The scene a caption-domain sentence describes, if it is a template
    /// realization. Slots a template omits are not checked.
    pub fn parse(&self, domain: &Domain, sentence: &[String], side: Side) -> Option<(usize, [Option<usize>; SLOTS])> {
        (0..domain.templates.len()).find_map(|t| {
            let mut rest = sentence;
            let mut slots = [None; SLOTS];
            for item in &domain.templates[t] {
                match *item {
                    Style(i) => {
                        let (p, tw) = &domain.style[i];
                        let w = if side == Side::Pivot { p } else { tw };
                        rest = rest.strip_prefix(std::slice::from_ref(w))?;
                    }
                    Fill(slot) => {
                        let (v, n) = self.lexicon[slot as usize].iter().enumerate().find_map(|(v, p)| {
                            let ws = if side == Side::Pivot { &p.pivot } else { &p.target };
                            rest.starts_with(ws).then_some((v, ws.len()))
                        })?;
                        slots[slot as usize] = Some(v);
                        rest = &rest[n..];
                    }
                }
            }
            rest.is_empty().then_some((t, slots))
        })
    }
}

/// Fixed Gaussian map from concatenated one-hot slots to image features.
pub fn projection(cfg: &SynthWorldConfig) -> Tensor {
    let rows: usize = cfg.inventory().iter().sum();
    let mut rng = SeedStream::new(cfg.projection_seed).split("projection").rng();
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let data = (0..rows * cfg.image_feature).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_vec(rows, cfg.image_feature, data).expect("projection shape")
}

/// One-hot slot encoding through `projection`, plus N(0, σ²) noise drawn from `rng`.
pub fn scene_to_feature(scene: Scene, cfg: &SynthWorldConfig, projection: &Tensor, rng: &mut Rng) -> Vec<f64> {
    let inv = cfg.inventory();
    let mut feat = vec![0.0; cfg.image_feature];
    let mut offset = 0;
    for k in 0..SLOTS {
        for (f, p) in feat.iter_mut().zip(projection.row(offset + scene.0[k])) {
            *f += p;
        }
        offset += inv[k];
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("valid normal");
        for f in &mut feat {
            *f += normal.sample(rng);
        }
    }
    feat
}

/// Features of an image corpus, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub scenes: Vec<Scene>,
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    /// Images with pivot caption-domain captions.
    pub images: ImageSet,
    pub captions: Vec<Vec<String>>,
    /// Pivot / target translation-domain pairs.
    pub parallel: Vec<(Vec<String>, Vec<String>)>,
    /// Target caption-domain sentences.
    pub target_captions: Vec<Vec<String>>,
    /// Held-out images with target caption-domain references.
    pub eval: ImageSet,
    pub references: Vec<Vec<Vec<String>>>,
}

/// Vocabularies of the four corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub captioner: Vocab,
    pub source: Vocab,
    pub target: Vocab,
    pub autoencoder: Vocab,
}

impl Corpora {
    pub fn vocabs(&self, min_freq: usize) -> Result<Vocabs> {
        Ok(Vocabs {
            captioner: build_vocab(&self.captions, min_freq)?,
            source: build_vocab(self.parallel.iter().map(|(p, _)| p), min_freq)?,
            target: build_vocab(self.parallel.iter().map(|(_, t)| t), min_freq)?,
            autoencoder: build_vocab(&self.target_captions, min_freq)?,
        })
    }
}

fn weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates all corpora from one seed. Each corpus draws from its own
/// child stream, so changing one corpus size leaves the others untouched.
pub fn gen_corpora(cfg: &SynthWorldConfig, seed: u64) -> Result<Corpora> {
    cfg.validate()?;
    let root = SeedStream::new(seed);
    let inv = cfg.inventory();
    let proj = projection(cfg);

    let mut order: Vec<usize> = (0..cfg.num_scenes()).collect();
    order.shuffle(&mut root.split("eval split").rng());
    let (held, train) = order.split_at(cfg.eval_scenes);
    let mut held = held.to_vec();
    held.sort_unstable();

    let caption_domain = &cfg.caption;
    let n_caption_templates = caption_domain.templates.len();

    let mut rng = root.split("images").rng();
    let mut noise = root.split("image noise").rng();
    let mut scenes = Vec::with_capacity(cfg.image_captions);
    let mut feats = Vec::with_capacity(cfg.image_captions * cfg.image_feature);
    let mut captions = Vec::with_capacity(cfg.image_captions);
    for _ in 0..cfg.image_captions {
        let scene = Scene::from_index(train[rng.random_range(0..train.len())], inv);
        let t = rng.random_range(0..n_caption_templates);
        captions.push(cfg.realize(caption_domain, t, scene, Side::Pivot));
        feats.extend(scene_to_feature(scene, cfg, &proj, &mut noise));
        scenes.push(scene);
    }
    let images = ImageSet {
        scenes,
        features: Tensor::from_vec(cfg.image_captions, cfg.image_feature, feats)?,
    };

    let weights: Vec<Vec<f64>> = Slot::ALL
        .iter()
        .map(|&slot| {
            (0..inv[slot as usize])
                .map(|v| {
                    if cfg.caption_only.contains(&(slot, v)) {
                        0.0
                    } else {
                        ((v + 1) as f64).powf(-cfg.translation_skew)
                    }
                })
                .collect()
        })
        .collect();
    let mut rng = root.split("parallel").rng();
    let parallel = (0..cfg.parallel_pairs)
        .map(|_| {
            let scene = Scene([0, 1, 2, 3].map(|k| weighted(&weights[k], &mut rng)));
            let t = rng.random_range(0..cfg.translation.templates.len());
            (
                cfg.realize(&cfg.translation, t, scene, Side::Pivot),
                cfg.realize(&cfg.translation, t, scene, Side::Target),
            )
        })
        .collect();

    let mut rng = root.split("target captions").rng();
    let target_captions = (0..cfg.target_captions)
        .map(|_| {
            let scene = Scene::from_index(train[rng.random_range(0..train.len())], inv);
            let t = rng.random_range(0..n_caption_templates);
            cfg.realize(caption_domain, t, scene, Side::Target)
        })
        .collect();

    let mut rng = root.split("references").rng();
    let mut noise = root.split("eval noise").rng();
    let mut eval_feats = Vec::with_capacity(held.len() * cfg.image_feature);
    let mut references = Vec::with_capacity(held.len());
    let eval_scenes: Vec<Scene> = held.iter().map(|&i| Scene::from_index(i, inv)).collect();
    for &scene in &eval_scenes {
        eval_feats.extend(scene_to_feature(scene, cfg, &proj, &mut noise));
        references.push(
            (0..cfg.eval_references)
                .map(|_| {
                    let t = rng.random_range(0..n_caption_templates);
                    cfg.realize(caption_domain, t, scene, Side::Target)
                })
                .collect(),
        );
    }
    let eval = ImageSet {
        features: Tensor::from_vec(eval_scenes.len(), cfg.image_feature, eval_feats)?,
        scenes: eval_scenes,
    };

    Ok(Corpora {
        images,
        captions,
        parallel,
        target_captions,
        eval,
        references,
    })
}

/// Ground-truth two-stage output: a caption-domain pivot caption of the true
/// scene, translated word for word. Scores as an upper reference.
pub fn oracle_captions(cfg: &SynthWorldConfig, eval: &ImageSet, seed: u64) -> Vec<Vec<String>> {
    let mut rng = SeedStream::new(seed).split("oracle").rng();
    eval.scenes
        .iter()
        .map(|&scene| {
            let t = rng.random_range(0..cfg.caption.templates.len());
            let pivot = cfg.realize(&cfg.caption, t, scene, Side::Pivot);
            cfg.translate(&pivot, Side::Pivot).expect("lexicon words translate")
        })
        .collect()
}

/// Unigram Naive Bayes over style words, two classes, add-one smoothing.
/// Returns the accuracy of classifying `test` sentences (label `true` for
/// caption domain).
pub fn style_classifier_accuracy(
    style_words: &BTreeSet<String>,
    train: &[(Vec<String>, bool)],
    test: &[(Vec<String>, bool)],
) -> f64 {
    let vocab: Vec<&String> = style_words.iter().collect();
    let mut counts = [vec![1.0f64; vocab.len()], vec![1.0f64; vocab.len()]];
    let mut docs = [1.0f64, 1.0];
    for (s, label) in train {
        let c = *label as usize;
        docs[c] += 1.0;
        for w in s {
            if let Ok(i) = vocab.binary_search(&w) {
                counts[c][i] += 1.0;
            }
        }
    }
    let log_probs: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|c| (c / total).ln()).collect()
        })
        .collect();
    let prior_total = docs[0] + docs[1];
    let correct = test
        .iter()
        .filter(|(s, label)| {
            let score = |c: usize| {
                (docs[c] / prior_total).ln()
                    + s
                        .iter()
                        .filter_map(|w| vocab.binary_search(&w).ok())
                        .map(|i| log_probs[c][i])
                        .sum::<f64>()
            };
            (score(1) > score(0)) == *label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SynthWorldConfig {
        SynthWorldConfig {
            image_captions: 300,
            parallel_pairs: 400,
            target_captions: 200,
            eval_scenes: 40,
            ..SynthWorldConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = SynthWorldConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.inventory(), [8, 6, 8, 4]);
        assert!(cfg.content_overlap() >= 0.8);
    }

    #[test]
    fn shared_style_word_is_rejected() {
        let mut cfg = SynthWorldConfig::default();
        cfg.translation.style[0] = ("yige".into(), "this".into());
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn overlong_template_is_rejected() {
        let mut cfg = SynthWorldConfig::default();
        cfg.max_len = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "max_len"));
    }

    #[test]
    fn scene_index_round_trips() {
        let inv = [8, 6, 8, 4];
        for i in 0..8 * 6 * 8 * 4 {
            assert_eq!(Scene::from_index(i, inv).index(inv), i);
        }
    }

    #[test]
    fn noiseless_features_are_deterministic() {
        let cfg = SynthWorldConfig {
            noise: 0.0,
            ..SynthWorldConfig::default()
        };
        let proj = projection(&cfg);
        let mut rng = SeedStream::new(1).rng();
        let s = Scene([1, 2, 3, 0]);
        let a = scene_to_feature(s, &cfg, &proj, &mut rng);
        let b = scene_to_feature(s, &cfg, &proj, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.image_feature);
    }

    #[test]
    fn distinct_scenes_have_distinct_features() {
        let cfg = SynthWorldConfig {
            noise: 0.0,
            ..SynthWorldConfig::default()
        };
        let proj = projection(&cfg);
        let mut rng = SeedStream::new(1).rng();
        let feats: Vec<Vec<f64>> = (0..cfg.num_scenes())
            .map(|i| scene_to_feature(Scene::from_index(i, cfg.inventory()), &cfg, &proj, &mut rng))
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..feats.len() {
            for j in 0..i {
                let d: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 1e-6, "closest pair at squared distance {min}");
    }

    #[test]
    fn same_seed_same_corpora() {
        let cfg = small();
        assert_eq!(gen_corpora(&cfg, 3).unwrap(), gen_corpora(&cfg, 3).unwrap());
        assert_ne!(gen_corpora(&cfg, 3).unwrap().captions, gen_corpora(&cfg, 4).unwrap().captions);
    }

    #[test]
    fn corpus_sizes_and_length_cap() {
        let cfg = small();
        let c = gen_corpora(&cfg, 0).unwrap();
        assert_eq!(c.captions.len(), 300);
        assert_eq!(c.images.features.shape(), [300, cfg.image_feature]);
        assert_eq!(c.parallel.len(), 400);
        assert_eq!(c.target_captions.len(), 200);
        assert_eq!(c.references.len(), 40);
        assert!(c.references.iter().all(|r| r.len() == 5));
        let all = c
            .captions
            .iter()
            .chain(c.parallel.iter().flat_map(|(p, t)| [p, t]))
            .chain(&c.target_captions)
            .chain(c.references.iter().flatten());
        for s in all {
            assert!(!s.is_empty() && s.len() <= cfg.max_len);
        }
    }

    #[test]
    fn eval_scenes_never_captioned_in_training() {
        let c = gen_corpora(&SynthWorldConfig::default(), 0).unwrap();
        let train: HashSet<Scene> = c.images.scenes.iter().copied().collect();
        assert_eq!(c.eval.scenes.len(), 200);
        assert!(c.eval.scenes.iter().all(|s| !train.contains(s)));
        let distinct: HashSet<Scene> = c.eval.scenes.iter().copied().collect();
        assert_eq!(distinct.len(), 200);
    }

    #[test]
    fn pivot_vocab_overlap_is_the_shared_content() {
        let cfg = SynthWorldConfig::default();
        let c = gen_corpora(&cfg, 0).unwrap();
        let v = c.vocabs(cfg.min_freq).unwrap();
        let cap: BTreeSet<String> = v.captioner.regular().map(|(_, t)| t.to_string()).collect();
        let src: BTreeSet<String> = v.source.regular().map(|(_, t)| t.to_string()).collect();
        let shared: BTreeSet<String> = cap.intersection(&src).cloned().collect();
        assert!(!shared.is_empty());
        assert_eq!(shared, cfg.translation_content_words(Side::Pivot));

        let tgt: BTreeSet<String> = v.target.regular().map(|(_, t)| t.to_string()).collect();
        let ae: BTreeSet<String> = v.autoencoder.regular().map(|(_, t)| t.to_string()).collect();
        let shared: BTreeSet<String> = tgt.intersection(&ae).cloned().collect();
        assert_eq!(shared, cfg.translation_content_words(Side::Target));
    }

    #[test]
    fn references_round_trip_to_pivot_captions() {
        let cfg = small();
        let c = gen_corpora(&cfg, 1).unwrap();
        for (scene, refs) in c.eval.scenes.iter().zip(&c.references) {
            for r in refs {
                let pivot = cfg.translate(r, Side::Target).unwrap();
                let (_, slots) = cfg.parse(&cfg.caption, &pivot, Side::Pivot).expect("caption-domain pivot sentence");
                for k in 0..SLOTS {
                    assert!(slots[k].is_none_or(|v| v == scene.0[k]));
                }
                assert_eq!(cfg.translate(&pivot, Side::Pivot).as_ref(), Some(r));
            }
        }
    }

    #[test]
    fn parallel_pairs_are_word_for_word() {
        let cfg = small();
        let c = gen_corpora(&cfg, 2).unwrap();
        for (p, t) in &c.parallel {
            assert_eq!(cfg.translate(p, Side::Pivot).as_ref(), Some(t));
            assert!(cfg.parse(&cfg.translation, p, Side::Pivot).is_some());
            assert!(cfg.parse(&cfg.caption, p, Side::Pivot).is_none());
        }
    }

    #[test]
    fn rare_word_below_min_freq_is_unknown() {
        let cfg = small();
        let mut c = gen_corpora(&cfg, 0).unwrap();
        for s in c.captions.iter_mut().take(4) {
            s.push("xiyou".into());
        }
        let v = c.vocabs(5).unwrap();
        assert!(!v.captioner.contains("xiyou"));
        assert_eq!(v.captioner.id("xiyou"), crate::vocab::UNK);
    }

    #[test]
    fn domains_are_separable_by_style() {
        let cfg = SynthWorldConfig::default();
        let c = gen_corpora(&cfg, 0).unwrap();
        let style: BTreeSet<String> = cfg
            .caption
            .style
            .iter()
            .chain(&cfg.translation.style)
            .map(|(_, t)| t.clone())
            .collect();
        let labeled: Vec<(Vec<String>, bool)> = c
            .target_captions
            .iter()
            .map(|s| (s.clone(), true))
            .chain(c.parallel.iter().take(1000).map(|(_, t)| (t.clone(), false)))
            .collect();
        let (train, test): (Vec<_>, Vec<_>) = labeled.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
        let strip = |v: Vec<(usize, (Vec<String>, bool))>| v.into_iter().map(|(_, x)| x).collect::<Vec<_>>();
        let acc = style_classifier_accuracy(&style, &strip(train), &strip(test));
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn translation_domain_skews_slot_frequencies() {
        let cfg = SynthWorldConfig::default();
        let c = gen_corpora(&cfg, 0).unwrap();
        let count = |sents: &mut dyn Iterator<Item = &Vec<String>>, w: &str| {
            sents.map(|s| s.iter().filter(|x| *x == w).count()).sum::<usize>() as f64
        };
        let ratio = |w: &str, rare: &str| {
            let cap = count(&mut c.captions.iter(), w) / count(&mut c.captions.iter(), rare);
            let par = count(&mut c.parallel.iter().map(|(p, _)| p), w) / count(&mut c.parallel.iter().map(|(p, _)| p), rare);
            (cap, par)
        };
        let (cap, par) = ratio("laode", "manglu");
        assert!(par > 3.0 * cap, "caption ratio {cap}, parallel ratio {par}");
        assert!(!c.parallel.iter().any(|(p, _)| p.contains(&"shengzi".to_string())));
    }

    #[test]
    fn oracle_captions_are_caption_domain_targets() {
        let cfg = small();
        let c = gen_corpora(&cfg, 0).unwrap();
        let oracle = oracle_captions(&cfg, &c.eval, 0);
        assert_eq!(oracle.len(), c.eval.scenes.len());
        for o in &oracle {
            assert!(cfg.parse(&cfg.caption, o, Side::Target).is_some());
        }
    }

    #[test]
    fn classifier_on_unseparable_data_is_near_chance() {
        let style: BTreeSet<String> = ["x".to_string()].into();
        let data: Vec<(Vec<String>, bool)> = (0..100).map(|i| (vec!["x".to_string()], i % 2 == 0)).collect();
        let acc = style_classifier_accuracy(&style, &data, &data);
        assert!((acc - 0.5).abs() < 1e-12);
    }
}
