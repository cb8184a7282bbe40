//! Synthetic keyword corpus.
//!
//! Keywords are random phoneme sequences. An utterance of a keyword emits,
//! for each phoneme, a random number of frames equal to that phoneme's
//! prototype vector plus a per-segment jitter, a per-utterance speaker offset
//! and per-frame noise.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};
use crate::metrics::{Trial, TrialSet};
use crate::seed::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_keywords: usize,
    pub eval_keywords: usize,
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub sigma_jitter: f64,
    pub sigma_speaker: f64,
    pub sigma_noise: f64,
    /// Subtract each utterance's mean frame.
    pub mean_normalize: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_keywords: 200,
            eval_keywords: 100,
            train_utterances: 4,
            eval_utterances: 2,
            vocab_size: 40,
            min_len: 3,
            max_len: 10,
            feature_dim: 40,
            dur_min: 2,
            dur_max: 5,
            sigma_jitter: 0.3,
            sigma_speaker: 0.2,
            sigma_noise: 0.1,
            mean_normalize: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.train_keywords == 0 || self.train_utterances == 0 {
            return bad("train split must be nonempty");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("vocab_size and feature_dim must be positive");
        }
        if [self.sigma_jitter, self.sigma_speaker, self.sigma_noise]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise scales must be >= 0");
        }
        Ok(())
    }

    pub fn profile_params(&self) -> ProfileParams {
        ProfileParams {
            dur_min: self.dur_min,
            dur_max: self.dur_max,
            sigma_jitter: self.sigma_jitter,
            sigma_speaker: self.sigma_speaker,
            sigma_noise: self.sigma_noise,
        }
    }
}

/// Keyword id → phoneme sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub vocab_size: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn phonemes(&self, keyword: usize) -> Result<&[usize]> {
        self.sequences
            .get(keyword)
            .map(Vec::as_slice)
            .ok_or_else(|| structural!("keyword {keyword} not in lexicon of {}", self.len()))
    }
}

fn count_sequences(vocab: usize, min_len: usize, max_len: usize) -> u128 {
    (min_len..=max_len)
        .map(|l| (vocab as u128).saturating_pow(l as u32))
        .fold(0u128, u128::saturating_add)
}

pub fn build_lexicon<R: Rng + ?Sized>(
    num_keywords: usize,
    vocab: usize,
    lengths: (usize, usize),
    rng: &mut R,
) -> Result<Lexicon> {
    let (lo, hi) = lengths;
    if lo == 0 || lo > hi || vocab == 0 {
        return Err(structural!("invalid lexicon shape: V={vocab}, lengths [{lo}, {hi}]"));
    }
    let available = count_sequences(vocab, lo, hi);
    if (num_keywords as u128) > available {
        return Err(structural!(
            "{num_keywords} keywords requested but only {available} distinct sequences exist"
        ));
    }
    let mut seen = HashSet::with_capacity(num_keywords);
    let mut sequences = Vec::with_capacity(num_keywords);
    while sequences.len() < num_keywords {
        let len = rng.random_range(lo..=hi);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        if seen.insert(seq.clone()) {
            sequences.push(seq);
        }
    }
    Ok(Lexicon {
        vocab_size: vocab,
        sequences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub dur_min: usize,
    pub dur_max: usize,
    pub sigma_jitter: f64,
    pub sigma_speaker: f64,
    pub sigma_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisProfile {
    /// `V × F` phoneme prototypes.
    pub prototypes: Array2<f64>,
    pub params: ProfileParams,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), sigma: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

impl SynthesisProfile {
    pub fn new<R: Rng + ?Sized>(vocab: usize, feature_dim: usize, params: ProfileParams, rng: &mut R) -> Self {
        Self {
            prototypes: gaussian(rng, (vocab, feature_dim), 1.0),
            params,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

pub fn synthesize_utterance<R: Rng + ?Sized>(
    profile: &SynthesisProfile,
    phonemes: &[usize],
    rng: &mut R,
) -> Result<Array2<f64>> {
    if phonemes.is_empty() {
        return Err(structural!("cannot synthesize an empty phoneme sequence"));
    }
    let p = &profile.params;
    let f = profile.feature_dim();
    if let Some(&bad) = phonemes.iter().find(|&&q| q >= profile.prototypes.nrows()) {
        return Err(structural!("phoneme {bad} has no prototype"));
    }
    let speaker = gaussian(rng, (1, f), p.sigma_speaker);
    let mut rows: Vec<Array1<f64>> = Vec::new();
    for &q in phonemes {
        let dur = rng.random_range(p.dur_min..=p.dur_max);
        let jitter = gaussian(rng, (1, f), p.sigma_jitter);
        let base = profile.prototypes.row(q).to_owned() + speaker.row(0) + jitter.row(0);
        for _ in 0..dur {
            let noise = gaussian(rng, (1, f), p.sigma_noise);
            rows.push(&base + &noise.row(0));
        }
    }
    let mut out = Array2::zeros((rows.len(), f));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    Ok(out)
}

/// Subtracts the mean frame.
pub fn mean_normalize(features: &Array2<f64>) -> Array2<f64> {
    match features.mean_axis(Axis(0)) {
        Some(mu) => features - &mu.insert_axis(Axis(0)),
        None => features.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub keyword: usize,
    /// Index among the utterances of the same keyword.
    pub take: usize,
    pub features: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    /// Split tag per keyword id.
    pub splits: Vec<Split>,
    pub profile: SynthesisProfile,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let total = cfg.train_keywords + cfg.eval_keywords;
        let mut lex_rng = substream(cfg.seed, "data/lexicon");
        let lexicon = build_lexicon(total, cfg.vocab_size, (cfg.min_len, cfg.max_len), &mut lex_rng)?;
        let mut split_rng = substream(cfg.seed, "data/split");
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut split_rng);
        let mut splits = vec![Split::Eval; total];
        for &k in &order[..cfg.train_keywords] {
            splits[k] = Split::Train;
        }
        let mut proto_rng = substream(cfg.seed, "data/prototypes");
        let profile = SynthesisProfile::new(cfg.vocab_size, cfg.feature_dim, cfg.profile_params(), &mut proto_rng);
        let mut utterances = Vec::new();
        for (k, seq) in lexicon.sequences.iter().enumerate() {
            let takes = match splits[k] {
                Split::Train => cfg.train_utterances,
                Split::Eval => cfg.eval_utterances,
            };
            for take in 0..takes {
                let mut rng = substream(cfg.seed, &format!("data/utt/{k}/{take}"));
                let mut features = synthesize_utterance(&profile, seq, &mut rng)?;
                if cfg.mean_normalize {
                    features = mean_normalize(&features);
                }
                utterances.push(Utterance {
                    keyword: k,
                    take,
                    features,
                });
            }
        }
        Ok(Self {
            config: cfg.clone(),
            lexicon,
            splits,
            profile,
            utterances,
        })
    }

    pub fn keywords(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&k| self.splits[k] == split).collect()
    }

    /// Indices of the utterances whose keyword is in `split`.
    pub fn utterance_indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.splits[self.utterances[i].keyword] == split)
            .collect()
    }
}

/// All matched pairs as positives plus `neg_ratio` negatives per positive,
/// drawn uniformly from the mismatched pairs.
pub fn generate_trials<R: Rng + ?Sized>(
    segments: &[(usize, usize)],
    enrolled: &[usize],
    neg_ratio: usize,
    rng: &mut R,
) -> Result<TrialSet> {
    for &k in enrolled {
        if !segments.iter().any(|s| s.0 == k) {
            return Err(structural!("enrolled keyword {k} has no test segment"));
        }
    }
    let mut positives = Vec::new();
    let mut mismatched = Vec::new();
    for &k in enrolled {
        for &(kw, utt) in segments {
            if kw == k {
                positives.push((k, utt));
            } else {
                mismatched.push((k, utt));
            }
        }
    }
    if positives.is_empty() {
        return Err(structural!("no positive trials can be formed"));
    }
    let want = neg_ratio * positives.len();
    let with_replacement = want > mismatched.len();
    let negatives: Vec<(usize, usize)> = if want == 0 {
        Vec::new()
    } else if mismatched.is_empty() {
        return Err(structural!("no mismatched pairs to draw {want} negatives from"));
    } else if with_replacement {
        (0..want)
            .map(|_| mismatched[rng.random_range(0..mismatched.len())])
            .collect()
    } else {
        let mut idx = sample(rng, mismatched.len(), want).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| mismatched[i]).collect()
    };
    let trials = positives
        .into_iter()
        .map(|p| (p, true))
        .chain(negatives.into_iter().map(|n| (n, false)))
        .enumerate()
        .map(|(id, ((keyword, utterance), label))| Trial {
            id,
            keyword,
            utterance,
            label,
        })
        .collect();
    Ok(TrialSet {
        trials,
        scores: None,
        negatives_with_replacement: with_replacement,
    })
}
