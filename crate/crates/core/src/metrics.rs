//! Corpus BLEU, CIDEr and Self-BLEU over token-id sentences.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Smoothing added to numerator and denominator of each sentence-level
/// precision inside Self-BLEU.
pub const SELF_BLEU_EPS: f64 = 1e-9;

type Counts<'a> = BTreeMap<&'a [u32], usize>;

/// Counts of every n-gram of order `n`.
pub fn ngrams(sent: &[u32], n: usize) -> Counts<'_> {
    let mut c = BTreeMap::new();
    if n > 0 && sent.len() >= n {
        for g in sent.windows(n) {
            *c.entry(g).or_insert(0) += 1;
        }
    }
    c
}

/// Matched and total n-gram counts per order, candidate length and
/// effective reference length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matched: Vec<usize>,
    pub total: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        BleuStats {
            matched: vec![0; max_n],
            total: vec![0; max_n],
            cand_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, other: &BleuStats) {
        for n in 0..self.matched.len() {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn brevity(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Unsmoothed BLEU for orders `1..=max_n`.
    pub fn scores(&self) -> Vec<f64> {
        let bp = self.brevity();
        let mut out = Vec::with_capacity(self.matched.len());
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..self.matched.len() {
            if self.matched[n] == 0 || self.total[n] == 0 {
                zero = true;
            } else {
                log_sum += (self.matched[n] as f64 / self.total[n] as f64).ln();
            }
            out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
        }
        out
    }

    /// Precisions `(m + eps) / (t + eps)`, or `eps` when the candidate has no
    /// n-grams of that order.
    pub fn smoothed_scores(&self, eps: f64) -> Vec<f64> {
        let bp = self.brevity();
        let mut log_sum = 0.0;
        (0..self.matched.len())
            .map(|n| {
                let p = if self.total[n] == 0 {
                    eps
                } else {
                    (self.matched[n] as f64 + eps) / (self.total[n] as f64 + eps)
                };
                log_sum += p.ln();
                bp * (log_sum / (n + 1) as f64).exp()
            })
            .collect()
    }
}

/// Closest reference length; ties go to the shorter reference.
fn closest_ref_len<R: AsRef<[u32]>>(cand_len: usize, refs: &[R]) -> usize {
    refs.iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

pub fn sentence_stats<R: AsRef<[u32]>>(cand: &[u32], refs: &[R], max_n: usize) -> BleuStats {
    let mut s = BleuStats::new(max_n);
    s.cand_len = cand.len();
    s.ref_len = closest_ref_len(cand.len(), refs);
    for n in 1..=max_n {
        let c = ngrams(cand, n);
        let mut max_ref: Counts<'_> = BTreeMap::new();
        for r in refs {
            for (g, k) in ngrams(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        s.total[n - 1] = c.values().sum();
        s.matched[n - 1] = c
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn check_corpus<C, R>(cands: &[C], refs: &[Vec<R>], max_n: usize) -> Result<()>
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if cands.is_empty() {
        return Err(Error::EmptySequence("metric candidates"));
    }
    if cands.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every candidate needs at least one reference"));
    }
    if max_n == 0 {
        return Err(Error::invalid("max n-gram order must be positive"));
    }
    Ok(())
}

/// Corpus statistics: per-sentence clipped counts summed over the corpus.
pub fn corpus_stats<C, R>(cands: &[C], refs: &[Vec<R>], max_n: usize) -> Result<BleuStats>
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    check_corpus(cands, refs, max_n)?;
    let mut total = BleuStats::new(max_n);
    for (c, r) in cands.iter().zip(refs) {
        total.add(&sentence_stats(c.as_ref(), r, max_n));
    }
    Ok(total)
}

/// BLEU-1 through BLEU-`max_n` for the corpus.
pub fn corpus_bleu<C, R>(cands: &[C], refs: &[Vec<R>], max_n: usize) -> Result<Vec<f64>>
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    Ok(corpus_stats(cands, refs, max_n)?.scores())
}

/// Self-BLEU for orders `1..=max_n`: each sentence scored against all the
/// others, averaged. Lower means more diverse output.
pub fn self_bleu<C: AsRef<[u32]>>(cands: &[C], max_n: usize) -> Result<Vec<f64>> {
    if cands.len() < 2 {
        return Err(Error::invalid("self-BLEU needs at least two sentences"));
    }
    if max_n == 0 {
        return Err(Error::invalid("max n-gram order must be positive"));
    }
    let mut sums = vec![0.0; max_n];
    for i in 0..cands.len() {
        let others: Vec<&[u32]> = cands
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| c.as_ref())
            .collect();
        let s = sentence_stats(cands[i].as_ref(), &others, max_n).smoothed_scores(SELF_BLEU_EPS);
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
    }
    Ok(sums.into_iter().map(|v| v / cands.len() as f64).collect())
}

/// TF-IDF vector of one sentence at one order.
fn tfidf<'a>(sent: &'a [u32], n: usize, idf: &dyn Fn(&[u32]) -> f64) -> BTreeMap<&'a [u32], f64> {
    let counts = ngrams(sent, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, k)| (g, k as f64 / total as f64 * idf(g)))
        .collect()
}

fn cosine(a: &BTreeMap<&[u32], f64>, b: &BTreeMap<&[u32], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(g, v)| large.get(g).map(|w| v * w))
        .sum();
    dot / (na * nb)
}

/// Per-item CIDEr (×10 scale), orders 1..=`max_n`, IDF `ln(|I| / max(1, df))`
/// with document frequency counted over reference sets.
pub fn cider_items<C, R>(cands: &[C], refs: &[Vec<R>], max_n: usize) -> Result<Vec<f64>>
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    check_corpus(cands, refs, max_n)?;
    if cands.len() < 2 {
        return Err(Error::invalid("CIDEr needs at least two items"));
    }
    let items = cands.len() as f64;
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=max_n {
        let mut df: BTreeMap<&[u32], usize> = BTreeMap::new();
        for set in refs {
            let seen: BTreeSet<&[u32]> = set.iter().flat_map(|r| ngrams(r.as_ref(), n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[u32]| (items / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (c, set)) in cands.iter().zip(refs).enumerate() {
            let vc = tfidf(c.as_ref(), n, &idf);
            let mean: f64 = set
                .iter()
                .map(|r| cosine(&vc, &tfidf(r.as_ref(), n, &idf)))
                .sum::<f64>()
                / set.len() as f64;
            scores[i] += mean;
        }
    }
    Ok(scores.into_iter().map(|s| 10.0 * s / max_n as f64).collect())
}

pub fn cider<C, R>(cands: &[C], refs: &[Vec<R>], max_n: usize) -> Result<f64>
where
    C: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    let items = cider_items(cands, refs, max_n)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| w.as_bytes()[0] as u32).collect()
    }

    #[test]
    fn perfect_match_scores_one() {
        let cands = vec![s("a b c d e"), s("f g h i")];
        let refs = vec![vec![s("a b c d e")], vec![s("f g h i")]];
        assert_eq!(corpus_bleu(&cands, &refs, 4).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn clipping_example() {
        let b = corpus_bleu(&[s("a a a a")], &[vec![s("a b")]], 1).unwrap();
        assert_eq!(b, vec![0.25]);
    }

    #[test]
    fn short_candidate_is_penalized() {
        let b = corpus_bleu(&[s("a b")], &[vec![s("a b c d"), s("a b c")]], 1).unwrap();
        assert!(b[0] < 1.0);
        assert!((b[0] - (1.0 - 3.0 / 2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn missing_order_zeroes_higher_scores() {
        let b = corpus_bleu(&[s("a b c")], &[vec![s("a c b")]], 3).unwrap();
        assert_eq!(b[0], 1.0);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);
    }

    #[test]
    fn empty_corpus_fails() {
        let none: Vec<Vec<u32>> = vec![];
        let refs: Vec<Vec<Vec<u32>>> = vec![];
        assert!(corpus_bleu(&none, &refs, 4).is_err());
        let no_refs: Vec<Vec<Vec<u32>>> = vec![vec![]];
        assert!(corpus_bleu(&[s("a")], &no_refs, 4).is_err());
    }

    #[test]
    fn cider_identity_on_disjoint_pair() {
        let cands = vec![s("a b c d"), s("e f g h i")];
        let refs = vec![vec![s("a b c d")], vec![s("e f g h i")]];
        for v in cider_items(&cands, &refs, 4).unwrap() {
            assert!((v - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cider_zero_overlap_contributes_nothing() {
        let cands = vec![s("x y z"), s("e f g h")];
        let refs = vec![vec![s("a b c d")], vec![s("e f g h")]];
        let items = cider_items(&cands, &refs, 4).unwrap();
        assert_eq!(items[0], 0.0);
        assert!((items[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cider_needs_two_items() {
        assert!(cider(&[s("a")], &[vec![s("a")]], 4).is_err());
    }

    #[test]
    fn self_bleu_extremes() {
        let same = vec![s("a b c d"); 3];
        for v in self_bleu(&same, 4).unwrap() {
            assert_eq!(v, 1.0);
        }
        let disjoint = vec![s("a b c"), s("d e f"), s("g h i")];
        for v in self_bleu(&disjoint, 4).unwrap() {
            assert!(v < 1e-6);
        }
        assert!(self_bleu(&[s("a")], 4).is_err());
    }

    /// Quadratic-time BLEU statistics: n-grams compared position by position.
    fn naive_stats(cands: &[Vec<u32>], refs: &[Vec<Vec<u32>>], max_n: usize) -> BleuStats {
        let count = |sent: &[u32], g: &[u32]| (0..=sent.len().saturating_sub(g.len())).filter(|&i| sent.len() >= g.len() && &sent[i..i + g.len()] == g).count();
        let mut st = BleuStats::new(max_n);
        for (c, rs) in cands.iter().zip(refs) {
            st.cand_len += c.len();
            let mut best = rs[0].len();
            for r in rs {
                let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
                if d < bd || (d == bd && r.len() < best) {
                    best = r.len();
                }
            }
            st.ref_len += best;
            for n in 1..=max_n {
                if c.len() < n {
                    continue;
                }
                for i in 0..=c.len() - n {
                    let g = &c[i..i + n];
                    st.total[n - 1] += 1;
                    // credit this occurrence only if it is within the clip
                    let seen_before = (0..i).filter(|&j| &c[j..j + n] == g).count();
                    let clip = rs.iter().map(|r| count(r, g)).max().unwrap_or(0);
                    if seen_before < clip {
                        st.matched[n - 1] += 1;
                    }
                }
            }
        }
        st
    }

    fn sentence() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0u32..5, 0..9)
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<Vec<Vec<u32>>>)> {
        proptest::collection::vec((sentence(), proptest::collection::vec(sentence(), 1..4)), 1..6)
            .prop_map(|items| items.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn bleu_matches_the_naive_oracle((cands, refs) in corpus()) {
            let fast = corpus_stats(&cands, &refs, 4).unwrap();
            let slow = naive_stats(&cands, &refs, 4);
            prop_assert_eq!(&fast, &slow);
            prop_assert_eq!(fast.scores(), slow.scores());
        }

        #[test]
        fn metrics_stay_in_range((cands, refs) in corpus()) {
            for b in corpus_bleu(&cands, &refs, 4).unwrap() {
                prop_assert!((0.0..=1.0).contains(&b));
            }
            if cands.len() >= 2 {
                let c = cider(&cands, &refs, 4).unwrap();
                prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
                for b in self_bleu(&cands, 4).unwrap() {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
                }
            }
        }

        #[test]
        fn bleu_ignores_relabeling((cands, refs) in corpus(), shift in 1u32..100) {
            let relabel = |s: &Vec<u32>| s.iter().map(|t| (t * 7 + shift) % 1000).collect::<Vec<_>>();
            let c2: Vec<Vec<u32>> = cands.iter().map(relabel).collect();
            let r2: Vec<Vec<Vec<u32>>> = refs.iter().map(|rs| rs.iter().map(relabel).collect()).collect();
            prop_assert_eq!(corpus_bleu(&cands, &refs, 4).unwrap(), corpus_bleu(&c2, &r2, 4).unwrap());
        }
    }

    #[test]
    fn cider_is_invariant_to_idf_scale() {
        // scaling every IDF by k scales both vectors by k; cosine is unchanged
        let a: Vec<u32> = vec![1, 2, 3, 1];
        let b: Vec<u32> = vec![1, 2, 4];
        let one = |_: &[u32]| 1.0;
        let three = |_: &[u32]| 3.0;
        for n in 1..=2 {
            let x = cosine(&tfidf(&a, n, &one), &tfidf(&b, n, &one));
            let y = cosine(&tfidf(&a, n, &three), &tfidf(&b, n, &three));
            assert!((x - y).abs() < 1e-15);
        }
    }
}
