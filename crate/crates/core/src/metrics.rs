//! Caption fidelity and diversity metrics. All inputs are normalized,
//! space-separated caption strings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Counts of the order-`n` n-grams of one token sequence, keyed by the
/// space-joined n-gram.
pub fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}

/// Per-order n-gram multisets (orders 1..=4) of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramProfile {
    pub orders: Vec<HashMap<String, usize>>,
    pub length: usize,
}

impl NGramProfile {
    pub fn new(caption: &str) -> Self {
        let toks = words(caption);
        Self {
            orders: (1..=MAX_ORDER).map(|n| ngram_counts(&toks, n)).collect(),
            length: toks.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }
}

fn bleu_stats(candidate: &str, references: &[&str], max_n: usize) -> BleuStats {
    let cand = words(candidate);
    let refs: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
    let mut st = BleuStats {
        cand_len: cand.len(),
        ..Default::default()
    };
    // closest reference length, ties to the shorter one
    st.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(cand.len()), l))
        .unwrap_or(0);
    for n in 1..=max_n {
        let c = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&str, usize> = HashMap::new();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        for rc in &ref_counts {
            for (g, &k) in rc {
                let e = max_ref.entry(g.as_str()).or_insert(0);
                *e = (*e).max(k);
            }
        }
        st.matches[n - 1] = c
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g.as_str()).copied().unwrap_or(0)))
            .sum();
        st.totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    st
}

fn bleu_from_stats(st: &BleuStats, max_n: usize, smooth: bool) -> f64 {
    if st.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = (st.matches[n] as f64, st.totals[n] as f64);
        let p = if m > 0.0 {
            m / t
        } else if smooth && n > 0 {
            1.0 / (t + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let (c, r) = (st.cand_len as f64, st.ref_len as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

fn check_order(n: usize) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(Error::RejectedInput(format!("BLEU order {n} outside 1..=4")))
    }
}

/// Sentence-level BLEU_n in [0, 100]: clipped precisions, geometric mean,
/// brevity penalty against the closest reference length. Orders above one
/// with no clipped match use add-one smoothing, `1 / (total + 1)`.
pub fn bleu_n(candidate: &str, references: &[&str], n: usize) -> Result<f64> {
    check_order(n)?;
    if references.is_empty() {
        return Err(Error::RejectedInput("BLEU needs at least one reference".into()));
    }
    Ok(bleu_from_stats(&bleu_stats(candidate, references, n), n, true))
}

/// Unsmoothed corpus BLEU_n over (candidate, references) pairs.
pub fn corpus_bleu(pairs: &[(&str, Vec<&str>)], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        if refs.is_empty() {
            return Err(Error::RejectedInput("BLEU needs at least one reference".into()));
        }
        total.add(&bleu_stats(cand, refs, n));
    }
    Ok(bleu_from_stats(&total, n, false))
}

/// Document-frequency weights for CIDEr. One document is the reference set
/// of one clip; weight(g) = ln(N) − ln(max(1, df(g))).
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: HashMap<String, f64>,
    default: f64,
}

impl IdfTable {
    pub fn from_reference_sets<S: AsRef<str>>(sets: &[Vec<S>]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for set in sets {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for r in set {
                let toks = words(r.as_ref());
                for n in 1..=MAX_ORDER {
                    seen.extend(ngram_counts(&toks, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let log_n = (sets.len().max(1) as f64).ln();
        let weights = df
            .into_iter()
            .map(|(g, d)| (g, log_n - (d.max(1) as f64).ln()))
            .collect();
        Self {
            weights,
            default: log_n,
        }
    }

    /// Every n-gram weighted 1: CIDEr reduces to clipped n-gram cosine.
    pub fn uniform() -> Self {
        Self {
            weights: HashMap::new(),
            default: 1.0,
        }
    }

    pub fn weight(&self, ngram: &str) -> f64 {
        self.weights.get(ngram).copied().unwrap_or(self.default)
    }
}

struct TfIdf {
    // ordered so every float sum runs in the same order on every run
    vecs: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn tfidf(caption: &str, idf: &IdfTable) -> TfIdf {
    let profile = NGramProfile::new(caption);
    let mut vecs = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for counts in profile.orders {
        let v: BTreeMap<String, f64> = counts
            .into_iter()
            .map(|(g, tf)| {
                let w = tf as f64 * idf.weight(&g);
                (g, w)
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        length: profile.length,
    }
}

/// CIDEr-D: per order, mean over references of the clipped TF-IDF cosine
/// times a Gaussian length penalty; averaged over orders 1..=4 and scaled
/// by 10.
pub fn cider(candidate: &str, references: &[&str], idf: &IdfTable) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let c = tfidf(candidate, idf);
    let mut per_order = [0f64; MAX_ORDER];
    for r in references {
        let r = tfidf(r, idf);
        let delta = c.length as f64 - r.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..MAX_ORDER {
            let mut val: f64 = c.vecs[n]
                .iter()
                .map(|(g, &cv)| {
                    let rv = r.vecs[n].get(g).copied().unwrap_or(0.0);
                    cv.min(rv) * rv
                })
                .sum();
            if c.norms[n] != 0.0 && r.norms[n] != 0.0 {
                val /= c.norms[n] * r.norms[n];
            }
            per_order[n] += val * penalty;
        }
    }
    let mean: f64 = per_order.iter().sum::<f64>() / MAX_ORDER as f64;
    10.0 * mean / references.len() as f64
}

/// Mutual BLEU_n: each caption scored against the rest of the set; mean.
pub fn mbleu_n(set: &[&str], n: usize) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::RejectedInput(
            "mutual BLEU needs at least two captions".into(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..set.len() {
        let others: Vec<&str> = set
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| *s)
            .collect();
        sum += bleu_n(set[i], &others, n)?;
    }
    Ok(sum / set.len() as f64)
}

/// 100 × distinct order-`n` n-grams across the set / total words.
pub fn div_n(set: &[&str], n: usize) -> f64 {
    let mut distinct: BTreeSet<String> = BTreeSet::new();
    let mut total = 0usize;
    for s in set {
        let toks = words(s);
        total += toks.len();
        distinct.extend(ngram_counts(&toks, n).into_keys());
    }
    if total == 0 {
        0.0
    } else {
        100.0 * distinct.len() as f64 / total as f64
    }
}

pub fn vocab_size<S: AsRef<str>>(captions: &[S]) -> usize {
    captions
        .iter()
        .flat_map(|c| c.as_ref().split_whitespace())
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRatio {
    pub ngram: String,
    pub order: usize,
    pub train_count: usize,
    pub expected: f64,
    pub observed: usize,
    pub ratio: f64,
}

/// For every n-gram (orders 1..=3) seen in training, the ratio of its
/// observed count in `eval` to the expected `m · |test| / |train|`.
pub fn ngram_count_ratios<S: AsRef<str>, T: AsRef<str>>(
    train: &[S],
    eval: &[T],
    train_size: usize,
    test_size: usize,
) -> Result<Vec<CountRatio>> {
    if train_size == 0 || test_size == 0 {
        return Err(Error::RejectedInput("set sizes must be positive".into()));
    }
    let tally = |texts: Vec<&str>, n: usize| {
        let mut out: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for (g, k) in ngram_counts(&words(t), n) {
                *out.entry(g).or_insert(0) += k;
            }
        }
        out
    };
    let scale = test_size as f64 / train_size as f64;
    let mut out = Vec::new();
    for n in 1..=3 {
        let tr = tally(train.iter().map(|s| s.as_ref()).collect(), n);
        let ev = tally(eval.iter().map(|s| s.as_ref()).collect(), n);
        let mut grams: Vec<_> = tr.into_iter().collect();
        grams.sort();
        for (g, m) in grams {
            let expected = m as f64 * scale;
            let observed = ev.get(&g).copied().unwrap_or(0);
            out.push(CountRatio {
                ngram: g,
                order: n,
                train_count: m,
                expected,
                observed,
                ratio: observed as f64 / expected,
            });
        }
    }
    Ok(out)
}

/// Number of distinct words whose corpus frequency exceeds each threshold.
pub fn vocab_by_threshold<S: AsRef<str>>(
    captions: &[S],
    thresholds: &[u64],
) -> Result<Vec<(u64, usize)>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::RejectedInput("thresholds must be ascending".into()));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for c in captions {
        for w in c.as_ref().split_whitespace() {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| (t, freq.values().filter(|&&f| f > t).count()))
        .collect())
}

/// Corpus-level fidelity of one caption per clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub bleu_4: f64,
    /// Mean raw CIDEr-D (the ×10-scaled value; 0.400 is reported as 40.0).
    pub cider: f64,
    pub spider: Option<f64>,
}

fn check_keys<A, B>(generated: &BTreeMap<String, A>, references: &BTreeMap<String, B>) -> Result<()> {
    if generated.is_empty() {
        return Err(Error::RejectedInput("no generated captions".into()));
    }
    let mut missing: Vec<String> = references
        .keys()
        .filter(|k| !generated.contains_key(*k))
        .cloned()
        .collect();
    missing.extend(generated.keys().filter(|k| !references.contains_key(*k)).cloned());
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::KeyMismatch(missing))
    }
}

/// BLEU_4 (corpus), mean CIDEr-D with idf from the evaluated reference
/// sets, and SPIDEr when per-clip SPICE scores are supplied.
pub fn evaluate_fidelity(
    generated: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
    spice: Option<&BTreeMap<String, f64>>,
) -> Result<FidelityReport> {
    check_keys(generated, references)?;
    let sets: Vec<Vec<String>> = references.values().cloned().collect();
    let idf = IdfTable::from_reference_sets(&sets);
    let mut pairs = Vec::with_capacity(generated.len());
    let mut cider_sum = 0.0;
    for (id, cand) in generated {
        let refs: Vec<&str> = references[id].iter().map(String::as_str).collect();
        cider_sum += cider(cand, &refs, &idf);
        pairs.push((cand.as_str(), refs));
    }
    let cider_mean = cider_sum / generated.len() as f64;
    let spider = match spice {
        Some(s) => {
            check_keys(s, references)?;
            let spice_mean = s.values().sum::<f64>() / s.len() as f64;
            Some((cider_mean + spice_mean) / 2.0)
        }
        None => None,
    };
    Ok(FidelityReport {
        bleu_4: corpus_bleu(&pairs, 4)?,
        cider: cider_mean,
        spider,
    })
}

/// Leave-one-out human score: reference `i` of every clip is the
/// prediction, the other four are its references; averaged over `i`.
pub fn evaluate_human(references: &BTreeMap<String, Vec<String>>) -> Result<FidelityReport> {
    let per = references.values().map(Vec::len).min().unwrap_or(0);
    if per < 2 {
        return Err(Error::RejectedInput("need at least two references per clip".into()));
    }
    let mut acc = FidelityReport {
        bleu_4: 0.0,
        cider: 0.0,
        spider: None,
    };
    for i in 0..per {
        let gen: BTreeMap<String, String> = references
            .iter()
            .map(|(k, v)| (k.clone(), v[i].clone()))
            .collect();
        let rest: BTreeMap<String, Vec<String>> = references
            .iter()
            .map(|(k, v)| {
                let others = v.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone());
                (k.clone(), others.collect())
            })
            .collect();
        let r = evaluate_fidelity(&gen, &rest, None)?;
        acc.bleu_4 += r.bleu_4 / per as f64;
        acc.cider += r.cider / per as f64;
    }
    Ok(acc)
}

/// Set-level and corpus-level diversity of several captions per clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub vocab_size: usize,
    pub mbleu_4: f64,
    pub div_1: f64,
    pub div_2: f64,
}

pub fn evaluate_diversity(generated: &BTreeMap<String, Vec<String>>) -> Result<DiversityReport> {
    if generated.is_empty() {
        return Err(Error::RejectedInput("no generated captions".into()));
    }
    let all: Vec<&str> = generated.values().flatten().map(String::as_str).collect();
    let (mut mb, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for set in generated.values() {
        let set: Vec<&str> = set.iter().map(String::as_str).collect();
        mb += mbleu_n(&set, 4)?;
        d1 += div_n(&set, 1);
        d2 += div_n(&set, 2);
    }
    let k = generated.len() as f64;
    Ok(DiversityReport {
        vocab_size: vocab_size(&all),
        mbleu_4: mb / k,
        div_1: d1 / k,
        div_2: d2 / k,
    })
}

/// Fidelity and diversity of a caption-set map, all on the reporting
/// scale (×100). Fidelity is averaged over the sample slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scale_note: String,
    pub clips: usize,
    pub captions_per_clip: usize,
    pub bleu_4: f64,
    pub cider: f64,
    pub spider: Option<f64>,
    pub vocab_size: usize,
    pub mbleu_4: Option<f64>,
    pub div_1: f64,
    pub div_2: f64,
}

pub const SCALE_NOTE: &str =
    "BLEU_4, mBLEU_4, div-n are x100; CIDEr and SPIDEr are raw CIDEr-D (x10 convention) x100";

pub fn evaluate_sets(
    generated: &BTreeMap<String, Vec<String>>,
    references: &BTreeMap<String, Vec<String>>,
    spice: Option<&BTreeMap<String, f64>>,
) -> Result<MetricsReport> {
    check_keys(generated, references)?;
    let per = generated.values().map(Vec::len).min().unwrap_or(0);
    if per == 0 || generated.values().any(|v| v.len() != per) {
        return Err(Error::RejectedInput(
            "every clip needs the same nonzero number of captions".into(),
        ));
    }
    let (mut bleu, mut cid, mut spider) = (0.0, 0.0, None::<f64>);
    for i in 0..per {
        let slot: BTreeMap<String, String> = generated
            .iter()
            .map(|(k, v)| (k.clone(), v[i].clone()))
            .collect();
        let f = evaluate_fidelity(&slot, references, spice)?;
        bleu += f.bleu_4 / per as f64;
        cid += f.cider / per as f64;
        if let Some(s) = f.spider {
            spider = Some(spider.unwrap_or(0.0) + s / per as f64);
        }
    }
    let all: Vec<&str> = generated.values().flatten().map(String::as_str).collect();
    let (mbleu, d1, d2) = if per >= 2 {
        let d = evaluate_diversity(generated)?;
        (Some(d.mbleu_4), d.div_1, d.div_2)
    } else {
        let k = generated.len() as f64;
        let d1 = generated.values().map(|v| div_n(&[v[0].as_str()], 1)).sum::<f64>() / k;
        let d2 = generated.values().map(|v| div_n(&[v[0].as_str()], 2)).sum::<f64>() / k;
        (None, d1, d2)
    };
    Ok(MetricsReport {
        scale_note: SCALE_NOTE.into(),
        clips: generated.len(),
        captions_per_clip: per,
        bleu_4: bleu,
        cider: cid * 100.0,
        spider: spider.map(|s| s * 100.0),
        vocab_size: vocab_size(&all),
        mbleu_4: mbleu,
        div_1: d1,
        div_2: d2,
    })
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"));
        format!(
            "# {}\n{:<8} {:>8} {:>8} {:>8} {:>10} {:>9} {:>7} {:>7}\n{:<8} {:>8.1} {:>8.1} {:>8} {:>10} {:>9} {:>7.1} {:>7.1}\n",
            self.scale_note,
            "clips",
            "BLEU_4",
            "CIDEr",
            "SPIDEr",
            "vocab",
            "mBLEU_4",
            "div-1",
            "div-2",
            self.clips,
            self.bleu_4,
            self.cider,
            opt(self.spider),
            self.vocab_size,
            opt(self.mbleu_4),
            self.div_1,
            self.div_2,
        )
    }
}
