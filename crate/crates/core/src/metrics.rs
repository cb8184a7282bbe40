//! Trial scoring and retrieval metrics: average precision, equal-error rate
//! and area under the ROC curve.
//!
//! EER is read off the convex hull of the swept ROC points, with the hull
//! vertices and the crossing computed in integer arithmetic so that the
//! result is a reduced rational converted to `f64` once. AUC is the
//! Mann-Whitney statistic, also counted in integers.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::cosine_sim;
use crate::encoders::{acoustic_encode, ccsp_pool, gap_pool, text_encode, EncoderConfig};
use crate::error::{domain, structural, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// One `(enrolled keyword, test utterance)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    /// Enrolled keyword id; its phoneme sequence comes from the lexicon.
    pub keyword: usize,
    /// Index of the test utterance in the corpus.
    pub utterance: usize,
    pub label: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub scores: Option<Vec<f64>>,
    /// Negatives had to be drawn with replacement (mismatch pool too small).
    pub negatives_with_replacement: bool,
}

impl TrialSet {
    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.trials.iter().filter(|t| t.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.trials.len() - self.positives()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub eer: f64,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(structural!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(domain!("score {i} is not finite"));
    }
    let p = labels.iter().filter(|&&l| l).count();
    Ok((p, labels.len() - p))
}

fn check_both(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(domain!("need both labels, got {p} positives and {n} negatives"));
    }
    Ok((p, n))
}

/// Descending score order, negatives first within a tie.
fn ranked(scores: &[f64], labels: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| labels[a].cmp(&labels[b]))
            .then_with(|| a.cmp(&b))
    });
    idx
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(domain!("average precision needs at least one positive"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &i) in ranked(scores, labels).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

/// Swept ROC points as integer `(false accepts, misses)`, thresholds from
/// above the top score down past the bottom one.
fn roc_counts(scores: &[f64], labels: &[bool], p: usize) -> Vec<(i128, i128)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut fa = 0i128;
    let mut miss = p as i128;
    let mut pts = vec![(fa, miss)];
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                miss -= 1;
            } else {
                fa += 1;
            }
            k += 1;
        }
        pts.push((fa, miss));
    }
    pts
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact rational `num/den` with `den > 0`, in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: i128,
    pub den: i128,
}

impl Ratio {
    pub fn new(num: i128, den: i128) -> Self {
        let s = if den < 0 { -1 } else { 1 };
        let g = gcd(num, den).max(1);
        Self {
            num: s * num / g,
            den: s * den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Where the segment `a→b` (scaled coordinates, FA on x, miss on y) meets
/// the diagonal, as a fraction of the common scale, or `None` if it does not.
pub fn diagonal_crossing(a: (i128, i128), b: (i128, i128), scale: i128) -> Option<Ratio> {
    let da = a.1 - a.0;
    let db = b.1 - b.0;
    if da == 0 {
        return Some(Ratio::new(a.0, scale));
    }
    if db == 0 {
        return Some(Ratio::new(b.0, scale));
    }
    if (da > 0) == (db > 0) {
        return None;
    }
    // x = a.x + t (b.x − a.x), t = da / (da − db)
    let num = a.0 * (da - db) + da * (b.0 - a.0);
    Some(Ratio::new(num, (da - db) * scale))
}

/// EER as an exact rational.
pub fn eer_ratio(scores: &[f64], labels: &[bool]) -> Result<Ratio> {
    let (p, n) = check_both(scores, labels)?;
    // scale FA by P and misses by N so both rates share the denominator N·P
    let (pi, ni) = (p as i128, n as i128);
    let pts: Vec<(i128, i128)> = roc_counts(scores, labels, p)
        .into_iter()
        .map(|(fa, miss)| (fa * pi, miss * ni))
        .collect();
    let mut hull: Vec<(i128, i128)> = Vec::with_capacity(pts.len());
    for &q in &pts {
        while hull.len() >= 2 {
            let o = hull[hull.len() - 2];
            let a = hull[hull.len() - 1];
            let cross = (a.0 - o.0) * (q.1 - o.1) - (a.1 - o.1) * (q.0 - o.0);
            if cross <= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(q);
    }
    let scale = pi * ni;
    for w in hull.windows(2) {
        if let Some(r) = diagonal_crossing(w[0], w[1], scale) {
            return Ok(r);
        }
    }
    Err(structural!("ROC hull never meets the diagonal"))
}

pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    eer_ratio(scores, labels).map(Ratio::to_f64)
}

/// Twice the Mann-Whitney count: 2·wins + ties over all positive/negative pairs.
fn doubled_wins(scores: &[f64], labels: &[bool]) -> u128 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut below_neg = 0u128;
    let mut total = 0u128;
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        let (mut tp, mut tn) = (0u128, 0u128);
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
        total += tp * (2 * below_neg + tn);
        below_neg += tn;
    }
    total
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_both(scores, labels)?;
    Ok(doubled_wins(scores, labels) as f64 / (2 * p as u128 * n as u128) as f64)
}

pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    let (positives, negatives) = check_both(scores, labels)?;
    Ok(Metrics {
        ap: average_precision(scores, labels)?,
        eer: eer(scores, labels)?,
        auc: auc(scores, labels)?,
        positives,
        negatives,
    })
}

/// Utterance embeddings used at inference: CCSP over the acoustic encoder for
/// audio, average pooling over the text encoder for text.
pub fn audio_embedding<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    features: &Array2<T>,
) -> Result<Array2<T>> {
    let seq = acoustic_encode(params, cfg, features)?;
    ccsp_pool(params, cfg, &seq)
}

pub fn text_embedding<T: Scalar>(params: &ParamStore<T>, cfg: &EncoderConfig, ids: &[usize]) -> Result<Array2<T>> {
    let seq = text_encode(params, cfg, ids)?;
    gap_pool(&seq)
}

/// Scores every trial by the cosine of its utterance embeddings. Each
/// distinct keyword and utterance is embedded once.
pub fn score_trials<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    trials: &TrialSet,
    keyword_phonemes: impl Fn(usize) -> Result<Vec<usize>>,
    utterance_features: impl Fn(usize) -> Result<Array2<T>>,
) -> Result<TrialSet> {
    use std::collections::btree_map::{BTreeMap, Entry};
    let mut text_cache: BTreeMap<usize, Array2<T>> = BTreeMap::new();
    let mut audio_cache: BTreeMap<usize, Array2<T>> = BTreeMap::new();
    let mut scores = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        if let Entry::Vacant(slot) = text_cache.entry(t.keyword) {
            slot.insert(text_embedding(params, cfg, &keyword_phonemes(t.keyword)?)?);
        }
        if let Entry::Vacant(slot) = audio_cache.entry(t.utterance) {
            slot.insert(audio_embedding(params, cfg, &utterance_features(t.utterance)?)?);
        }
        let s = cosine_sim(text_cache[&t.keyword].row(0), audio_cache[&t.utterance].row(0))?;
        scores.push(s.to_f64_lossy());
    }
    Ok(TrialSet {
        scores: Some(scores),
        ..trials.clone()
    })
}
