//! Training: P×K batch sampling, the joint forward pass over every loss
//! term, and a single AdamW update over both parameter groups. The gradient
//! reversal in front of the modality classifier gives the embedding group
//! the opposite sign of the adversarial gradient.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, total_adv_var, AdvConfig, AdvInputs, AdvTerms};
use crate::alignment::{cross_attend_var, monotonic_matching_loss_var};
use crate::autodiff::{Graph, Var};
use crate::batch::PhonemeBatch;
use crate::cls::{self, key_loss_var, ClsConfig};
use crate::dml::{
    baseline_loss_var, utterance_rp_var, AsyPParams, ClassParamVars, DmlConfig, PhonemeLossKind, UtteranceLossKind,
    ADAMS_LAMBDA,
};
use crate::encoders::{
    self, acoustic_forward, ccsp_forward, concat_sequences, gap_forward, text_forward, EncoderConfig,
};
use crate::error::{structural, Error, Result};
use crate::params::{group_of, Bound, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::seed::substream;
use crate::synth::{Corpus, Split};

/// Floating-point type used for training and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Keywords per batch (`P`).
    pub keywords_per_batch: usize,
    /// Utterances per keyword (`K`).
    pub utterances_per_keyword: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 means only at the end.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            keywords_per_batch: 16,
            utterances_per_keyword: 2,
            epochs: 30,
            base_lr: 1e-4,
            lr_halving_period: 20,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keywords_per_batch < 2 || self.utterances_per_keyword < 2 {
            return Err(Error::Config(format!(
                "train: need P >= 2 and K >= 2, got P={} K={}",
                self.keywords_per_batch, self.utterances_per_keyword
            )));
        }
        if !(self.base_lr > 0.0) || self.lr_halving_period == 0 {
            return Err(Error::Config(
                "train: base_lr must be > 0 and lr_halving_period >= 1".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("train: weight_decay and clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub phoneme: PhonemeLossKind,
    pub utterance: UtteranceLossKind,
    /// `λ_phn`.
    pub lambda_phn: f64,
    /// Monotonic matching loss on the per-pair affinities.
    pub mm_enabled: bool,
    /// Relative width of the matching target band.
    pub mm_rho: f64,
    pub dml: DmlConfig,
    pub cls: ClsConfig,
    pub adv: AdvConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            phoneme: PhonemeLossKind::AsypAdams,
            utterance: UtteranceLossKind::Rp,
            lambda_phn: 0.1,
            mm_enabled: true,
            mm_rho: 0.1,
            dml: DmlConfig::default(),
            cls: ClsConfig::default(),
            adv: AdvConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_phn >= 0.0) || !(self.adv.lambda >= 0.0) {
            return Err(Error::Config("losses: all lambda weights must be >= 0".into()));
        }
        if !(self.mm_rho > 0.0) {
            return Err(Error::Config("losses: mm_rho must be > 0".into()));
        }
        self.cls.validate()
    }

    /// Whether cross attention (and hence the phoneme-level flats) is needed.
    pub fn phoneme_branch(&self) -> bool {
        self.phoneme != PhonemeLossKind::None || self.adv.enabled_phn
    }
}

/// `base_lr · 0.5^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * 0.5f64.powi((epoch / cfg.lr_halving_period.max(1)) as i32)
}

/// Values of the embedding-side terms; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTerms {
    pub utt: f64,
    pub key: f64,
    pub mm: f64,
    pub phn: f64,
}

/// `L_utt + L_key + L_MM + λ_phn·L_phn`.
pub fn embedding_loss(terms: &EmbeddingTerms, lambda_phn: f64) -> f64 {
    terms.utt + terms.key + terms.mm + lambda_phn * terms.phn
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_utt: f64,
    pub l_key: f64,
    pub l_mm: f64,
    pub l_phn: f64,
    pub l_adv_phn: f64,
    pub l_adv_utt: f64,
    /// Embedding loss (sum of the four terms above with `λ_phn`).
    pub total: f64,
    /// `total + λ_adv·(L_adv_phn + L_adv_utt)` when adversarial learning is on.
    pub objective: f64,
    pub grad_norm_emb: f64,
    pub grad_norm_modality: f64,
    /// Modality-classifier batch accuracy; `None` without adversarial terms.
    pub modality_accuracy: Option<f64>,
}

impl StepMetrics {
    pub fn terms(&self) -> EmbeddingTerms {
        EmbeddingTerms {
            utt: self.l_utt,
            key: self.l_key,
            mm: self.l_mm,
            phn: self.l_phn,
        }
    }

    /// Field-wise mean (epoch and step taken from the last record).
    pub fn mean(records: &[StepMetrics]) -> Option<StepMetrics> {
        let last = records.last()?;
        let n = records.len() as f64;
        let avg = |f: fn(&StepMetrics) -> f64| records.iter().map(f).sum::<f64>() / n;
        let accs: Vec<f64> = records.iter().filter_map(|r| r.modality_accuracy).collect();
        Some(StepMetrics {
            epoch: last.epoch,
            step: last.step,
            lr: last.lr,
            l_utt: avg(|r| r.l_utt),
            l_key: avg(|r| r.l_key),
            l_mm: avg(|r| r.l_mm),
            l_phn: avg(|r| r.l_phn),
            l_adv_phn: avg(|r| r.l_adv_phn),
            l_adv_utt: avg(|r| r.l_adv_utt),
            total: avg(|r| r.total),
            objective: avg(|r| r.objective),
            grad_norm_emb: avg(|r| r.grad_norm_emb),
            grad_norm_modality: avg(|r| r.grad_norm_modality),
            modality_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        })
    }
}

/// Adam moments, one entry per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub opt: AdamState<T>,
    pub epoch: usize,
    pub step: usize,
}

/// Fresh parameters for every module, each drawn from its own substream.
pub fn init_state<T: Scalar>(
    enc: &EncoderConfig,
    losses: &LossConfig,
    classes: usize,
    seed: u64,
) -> Result<TrainState<T>> {
    enc.validate()?;
    losses.validate()?;
    let mut params = ParamStore::new();
    encoders::init_params(enc, &mut substream(seed, "init/encoders"), &mut params);
    cls::init_params(
        &losses.cls,
        classes,
        enc.embed_dim,
        &mut substream(seed, "init/head"),
        &mut params,
    );
    adversarial::init_params(
        &losses.adv,
        enc.embed_dim,
        &mut substream(seed, "init/modality"),
        &mut params,
    );
    if losses.phoneme.is_adaptive() {
        let d = &losses.dml;
        AsyPParams::init_store(&mut params, enc.vocab_size, d.alpha, d.beta, d.lambda);
    }
    params.check_partition()?;
    Ok(TrainState {
        params,
        opt: AdamState::default(),
        epoch: 0,
        step: 0,
    })
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub l_utt: Option<Var>,
    pub l_key: Option<Var>,
    pub l_mm: Option<Var>,
    pub l_phn: Option<Var>,
    pub adv: AdvTerms,
    pub utt_audio: Var,
    pub utt_text: Var,
    /// Embedding loss.
    pub emb: Var,
    /// What the optimizer minimizes.
    pub objective: Var,
}

/// Builds every loss term for `batch`. With `through_grl` the adversarial
/// inputs pass through the reversal layer (training); without it the
/// adversarial loss is plain (for probing its direction).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    batch: &PhonemeBatch<T>,
    enc: &EncoderConfig,
    losses: &LossConfig,
    through_grl: bool,
) -> Result<Forward> {
    if batch.is_empty() {
        return Err(structural!("empty batch"));
    }
    let refs: Vec<&Array2<T>> = batch.audio_features.iter().collect();
    let (feats, len_a) = concat_sequences(&refs)?;
    let feats = g.constant(feats);
    let seq_a = acoustic_forward(g, p, enc, feats, &len_a)?;
    let seq_t = text_forward(g, p, enc, &batch.phoneme_ids)?;
    let len_t: Vec<usize> = batch.phoneme_ids.iter().map(Vec::len).collect();
    let utt_audio = ccsp_forward(g, p, enc, seq_a, &len_a)?.pooled;
    let utt_text = gap_forward(g, seq_t, &len_t)?;

    let mut flat_audio = utt_audio;
    let mut l_mm = None;
    let mut l_phn = None;
    if losses.phoneme_branch() {
        let mut aggs = Vec::with_capacity(batch.len());
        let mut mms = Vec::with_capacity(batch.len());
        let (mut sa, mut st) = (0, 0);
        for (&la, &lt) in len_a.iter().zip(&len_t) {
            let a = g.slice_rows(seq_a, sa, la);
            let t = g.slice_rows(seq_t, st, lt);
            let (aff, agg) = cross_attend_var(g, t, a);
            aggs.push(agg);
            if losses.mm_enabled {
                mms.push(monotonic_matching_loss_var(g, aff, true, losses.mm_rho)?);
            }
            sa += la;
            st += lt;
        }
        flat_audio = g.concat_rows(&aggs);
        if !mms.is_empty() {
            let stacked = g.concat_rows(&mms);
            l_mm = Some(g.mean(stacked));
        }
        if losses.phoneme != PhonemeLossKind::None {
            let labels: Vec<usize> = batch.phoneme_ids.iter().flatten().copied().collect();
            let cp = if losses.phoneme.is_adaptive() {
                ClassParamVars::learnable(g, p)
            } else {
                let d = &losses.dml;
                ClassParamVars::constant(g, &AsyPParams::fixed(enc.vocab_size, d.alpha, d.beta, d.lambda))?
            };
            l_phn = Some(baseline_loss_var(
                g,
                losses.phoneme,
                flat_audio,
                seq_t,
                &labels,
                cp,
                &losses.dml,
            )?);
        }
    }
    let l_utt = match losses.utterance {
        UtteranceLossKind::Rp => Some(utterance_rp_var(
            g,
            utt_audio,
            utt_text,
            &batch.keyword_ids,
            &losses.dml,
        )?),
        UtteranceLossKind::None => None,
    };
    let l_key = key_loss_var(g, p, utt_audio, &batch.keyword_ids, &losses.cls)?;

    let inputs = AdvInputs {
        flat_audio,
        flat_text: if losses.phoneme_branch() { seq_t } else { utt_text },
        utt_audio,
        utt_text,
    };
    let adv = total_adv_var(g, p, inputs, &losses.adv, through_grl)?;

    let mut emb = g.scalar_constant(T::zero());
    for (term, w) in [(l_utt, 1.0), (l_key, 1.0), (l_mm, 1.0), (l_phn, losses.lambda_phn)] {
        if let Some(v) = term {
            let v = g.scale(v, T::c(w));
            emb = g.add(emb, v);
        }
    }
    let objective = if losses.adv.active() {
        let a = g.scale(adv.total, T::c(losses.adv.lambda));
        g.add(emb, a)
    } else {
        emb
    };
    Ok(Forward {
        l_utt,
        l_key,
        l_mm,
        l_phn,
        adv,
        utt_audio,
        utt_text,
        emb,
        objective,
    })
}

fn value_of<T: Scalar>(g: &Graph<T>, v: Option<Var>, term: &str) -> Result<f64> {
    let x = v.map(|v| g.scalar(v).to_f64_lossy()).unwrap_or(0.0);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

/// Per-parameter gradients of the last backward pass, in name order.
/// Parameters the objective does not reach get `None`.
pub fn collect_grads<T: Scalar>(g: &Graph<T>, p: &Bound, params: &ParamStore<T>) -> Vec<(String, Option<Array2<T>>)> {
    params
        .names()
        .map(|name| {
            let grad = p.try_var(name).and_then(|v| g.grad(v)).cloned();
            (name.clone(), grad)
        })
        .collect()
}

fn group_norm<T: Scalar>(grads: &[(String, Option<Array2<T>>)], group: ParamGroup) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| group_of(n).ok() == Some(group))
        .filter_map(|(_, g)| g.as_ref())
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One joint optimization step on `batch`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &PhonemeBatch<T>,
    enc: &EncoderConfig,
    losses: &LossConfig,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    batch.validate(enc.vocab_size, enc.feature_dim)?;
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let f = forward(&mut g, &p, batch, enc, losses, true)?;

    let l_utt = value_of(&g, f.l_utt, "L_utt")?;
    let l_key = value_of(&g, f.l_key, "L_key")?;
    let l_mm = value_of(&g, f.l_mm, "L_MM")?;
    let l_phn = value_of(&g, f.l_phn, "L_phn")?;
    let l_adv_phn = value_of(&g, f.adv.phn, "L_adv_phn")?;
    let l_adv_utt = value_of(&g, f.adv.utt, "L_adv_utt")?;
    let objective = value_of(&g, Some(f.objective), "objective")?;

    g.backward(f.objective);
    let grads = collect_grads(&g, &p, &state.params);
    let norm_emb = group_norm(&grads, ParamGroup::Embedding);
    let norm_mod = group_norm(&grads, ParamGroup::Modality);
    let global = (norm_emb * norm_emb + norm_mod * norm_mod).sqrt();
    if !global.is_finite() {
        return Err(Error::NonFinite {
            term: "gradient".into(),
        });
    }
    let clip = if cfg.clip_norm > 0.0 && global > cfg.clip_norm {
        cfg.clip_norm / global
    } else {
        1.0
    };
    let lr = lr_at(state.epoch, cfg);
    adamw_update(state, grads, lr, clip, cfg);

    let metrics = StepMetrics {
        epoch: state.epoch,
        step: state.step,
        lr,
        l_utt,
        l_key,
        l_mm,
        l_phn,
        l_adv_phn,
        l_adv_utt,
        total: embedding_loss(
            &EmbeddingTerms {
                utt: l_utt,
                key: l_key,
                mm: l_mm,
                phn: l_phn,
            },
            losses.lambda_phn,
        ),
        objective,
        grad_norm_emb: norm_emb,
        grad_norm_modality: norm_mod,
        modality_accuracy: (f.adv.seen > 0).then(|| f.adv.correct as f64 / f.adv.seen as f64),
    };
    state.step += 1;
    Ok(metrics)
}

/// Decoupled-weight-decay Adam on every parameter that received a gradient,
/// then the `λ ∈ [−1, 1]` clamp on adaptive boundaries.
fn adamw_update<T: Scalar>(
    state: &mut TrainState<T>,
    grads: Vec<(String, Option<Array2<T>>)>,
    lr: f64,
    clip: f64,
    cfg: &TrainConfig,
) {
    state.opt.t += 1;
    let t = state.opt.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = T::c(1.0 - b1.powi(t));
    let bc2 = T::c(1.0 - b2.powi(t));
    let (b1, b2, eps) = (T::c(b1), T::c(b2), T::c(cfg.adam_eps));
    let (lr, wd, clip) = (T::c(lr), T::c(cfg.weight_decay), T::c(clip));
    for (name, grad) in grads {
        let Some(grad) = grad else { continue };
        let theta = state.params.get_mut(&name).expect("bound parameter exists");
        if state.opt.m.get(&name).is_none() {
            state.opt.m.insert(name.clone(), Array2::zeros(theta.dim()));
            state.opt.v.insert(name.clone(), Array2::zeros(theta.dim()));
        }
        let m = state.opt.m.get_mut(&name).expect("moment");
        let v = state.opt.v.get_mut(&name).expect("moment");
        ndarray::Zip::from(&mut *theta)
            .and(&mut *m)
            .and(&mut *v)
            .and(&grad)
            .for_each(|w, m, v, &gr| {
                let gr = gr * clip;
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
            });
    }
    if let Some(lam) = state.params.get_mut(ADAMS_LAMBDA) {
        lam.mapv_inplace(|x| x.max(-T::one()).min(T::one()));
    }
}

/// Training keywords with dense class ids and their utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet<T> {
    /// Corpus keyword id of each class.
    pub keywords: Vec<usize>,
    pub phonemes: Vec<Vec<usize>>,
    pub utterances: Vec<Vec<Array2<T>>>,
}

impl<T: Scalar> TrainSet<T> {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let keywords = corpus.keywords(Split::Train);
        let mut utterances = vec![Vec::new(); keywords.len()];
        let class_of: std::collections::HashMap<usize, usize> =
            keywords.iter().enumerate().map(|(c, &k)| (k, c)).collect();
        for u in &corpus.utterances {
            if let Some(&c) = class_of.get(&u.keyword) {
                utterances[c].push(u.features.mapv(T::c));
            }
        }
        let phonemes = keywords
            .iter()
            .map(|&k| corpus.lexicon.phonemes(k).map(<[usize]>::to_vec))
            .collect::<Result<_>>()?;
        Ok(Self {
            keywords,
            phonemes,
            utterances,
        })
    }

    pub fn classes(&self) -> usize {
        self.keywords.len()
    }

    /// Batch from explicit `(class, utterance index)` picks.
    pub fn batch(&self, picks: &[(usize, usize)]) -> PhonemeBatch<T> {
        PhonemeBatch {
            audio_features: picks.iter().map(|&(c, u)| self.utterances[c][u].clone()).collect(),
            phoneme_ids: picks.iter().map(|&(c, _)| self.phonemes[c].clone()).collect(),
            keyword_ids: picks.iter().map(|&(c, _)| c).collect(),
        }
    }

    fn check(&self, p: usize, k: usize) -> Result<()> {
        if self.classes() < p {
            return Err(structural!(
                "batch needs {p} keywords but the corpus has {} ({} short)",
                self.classes(),
                p - self.classes()
            ));
        }
        if let Some(c) = (0..self.classes()).find(|&c| self.utterances[c].len() < k) {
            return Err(structural!(
                "keyword class {c} has {} utterances, batch needs {k}",
                self.utterances[c].len()
            ));
        }
        Ok(())
    }

    fn picks_for<R: Rng + ?Sized>(&self, classes: &[usize], k: usize, rng: &mut R) -> Vec<(usize, usize)> {
        classes
            .iter()
            .flat_map(|&c| {
                sample(rng, self.utterances[c].len(), k)
                    .into_iter()
                    .map(move |u| (c, u))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// `P` distinct keywords with `K` distinct utterances each.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    set: &TrainSet<T>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<PhonemeBatch<T>> {
    set.check(p, k)?;
    let classes = sample(rng, set.classes(), p).into_vec();
    Ok(set.batch(&set.picks_for(&classes, k, rng)))
}

/// Batches of one epoch: every keyword used at most once, the remainder
/// after the last full batch dropped.
pub fn epoch_batches<T: Scalar, R: Rng + ?Sized>(
    set: &TrainSet<T>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<PhonemeBatch<T>>> {
    set.check(p, k)?;
    let mut order: Vec<usize> = (0..set.classes()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(p)
        .map(|chunk| set.batch(&set.picks_for(chunk, k, rng)))
        .collect())
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` with the epoch mean metrics.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    set: &TrainSet<T>,
    enc: &EncoderConfig,
    losses: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &StepMetrics) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    state.params.check_partition()?;
    if !losses.adv.enabled_phn && !losses.adv.enabled_utt {
        log::warn!("modality adversarial learning disabled at both levels");
    }
    let mut rng = substream(cfg.seed, "batching");
    while state.epoch < cfg.epochs {
        let batches = epoch_batches(set, cfg.keywords_per_batch, cfg.utterances_per_keyword, &mut rng)?;
        let mut records = Vec::with_capacity(batches.len());
        for b in &batches {
            records.push(train_step(state, b, enc, losses, cfg)?);
        }
        let mean = StepMetrics::mean(&records).ok_or_else(|| structural!("epoch produced no batches"))?;
        on_epoch(state, &mean)?;
        state.epoch += 1;
    }
    Ok(())
}
