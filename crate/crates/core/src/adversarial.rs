//! Modality adversarial learning: a two-layer modality classifier shared by
//! the phoneme and utterance levels, the gradient-reversal layer in front of
//! it, and the adversarial cross-entropies.
//!
//! Both level losses divide the sum over the two modalities by the row count
//! of one modality, so uniform predictions give `2 ln 2` per level.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batch::FlatEmbeddings;
use crate::error::{structural, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::scalar::Scalar;

pub const FC1_WEIGHT: &str = "modality/fc1/weight";
pub const FC1_BIAS: &str = "modality/fc1/bias";
pub const FC2_WEIGHT: &str = "modality/fc2/weight";
pub const FC2_BIAS: &str = "modality/fc2/bias";

pub const AUDIO: usize = 0;
pub const TEXT: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub enabled_phn: bool,
    pub enabled_utt: bool,
    /// `λ_adv`, multiplies the adversarial loss.
    pub lambda: f64,
    pub hidden: usize,
    pub activation: Activation,
    /// Gradient multiplier applied (negated) by the reversal layer.
    pub grl_scale: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            enabled_phn: true,
            enabled_utt: true,
            lambda: 0.1,
            hidden: 256,
            activation: Activation::Relu,
            grl_scale: 1.0,
        }
    }
}

impl AdvConfig {
    /// Whether the adversarial objective contributes anything at all.
    pub fn active(&self) -> bool {
        (self.enabled_phn || self.enabled_utt) && self.lambda > 0.0
    }
}

/// Plain-array copy of the modality classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityClassifierParams<T> {
    pub fc1_weight: Array2<T>,
    pub fc1_bias: Array2<T>,
    pub fc2_weight: Array2<T>,
    pub fc2_bias: Array2<T>,
    pub activation: Activation,
}

impl<T: Scalar> ModalityClassifierParams<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1_weight: Array2::zeros((dim, hidden)),
            fc1_bias: Array2::zeros((1, hidden)),
            fc2_weight: Array2::zeros((hidden, 2)),
            fc2_bias: Array2::zeros((1, 2)),
            activation: Activation::Relu,
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            fc1_weight: fan_in_uniform(rng, dim, (dim, hidden)),
            fc1_bias: fan_in_uniform(rng, dim, (1, hidden)),
            fc2_weight: fan_in_uniform(rng, hidden, (hidden, 2)),
            fc2_bias: fan_in_uniform(rng, hidden, (1, 2)),
            activation,
        }
    }

    pub fn from_store(store: &ParamStore<T>, activation: Activation) -> Result<Self> {
        Ok(Self {
            fc1_weight: store.require(FC1_WEIGHT)?.clone(),
            fc1_bias: store.require(FC1_BIAS)?.clone(),
            fc2_weight: store.require(FC2_WEIGHT)?.clone(),
            fc2_bias: store.require(FC2_BIAS)?.clone(),
            activation,
        })
    }

    pub fn write_to(&self, store: &mut ParamStore<T>) {
        store.insert(FC1_WEIGHT, self.fc1_weight.clone());
        store.insert(FC1_BIAS, self.fc1_bias.clone());
        store.insert(FC2_WEIGHT, self.fc2_weight.clone());
        store.insert(FC2_BIAS, self.fc2_bias.clone());
    }

    fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut store = ParamStore::new();
        self.write_to(&mut store);
        store.bind(g, false)
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &AdvConfig, dim: usize, rng: &mut R, store: &mut ParamStore<T>) {
    ModalityClassifierParams::random(dim, cfg.hidden, cfg.activation, rng).write_to(store);
}

/// Forward pass of the gradient-reversal layer on plain arrays.
pub fn grl<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.clone()
}

/// Modality logits, `N × 2`.
pub fn modality_logits<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, activation: Activation) -> Var {
    let h = g.matmul(x, p.var(FC1_WEIGHT));
    let h = g.add(h, p.var(FC1_BIAS));
    let h = match activation {
        Activation::Relu => g.relu(h),
        Activation::Tanh => g.tanh(h),
    };
    let o = g.matmul(h, p.var(FC2_WEIGHT));
    g.add(o, p.var(FC2_BIAS))
}

/// `−(1/N)·Σ_m Σ_i log p(m | e_{m,i})` for one level.
pub fn adv_level_var<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    audio: Var,
    text: Var,
    activation: Activation,
) -> Result<Var> {
    adv_level_parts(g, p, audio, text, activation).map(|(l, _)| l)
}

/// Level loss together with the `2N × 2` logits (audio rows first).
pub fn adv_level_parts<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    audio: Var,
    text: Var,
    activation: Activation,
) -> Result<(Var, Var)> {
    let n = g.rows(audio);
    if n == 0 {
        return Err(structural!("adversarial loss over zero rows"));
    }
    if g.rows(text) != n {
        return Err(structural!("{} audio rows vs {} text rows", n, g.rows(text)));
    }
    let x = g.concat_rows(&[audio, text]);
    let logits = modality_logits(g, p, x, activation);
    let logp = g.row_log_softmax(logits);
    let mut onehot = Array2::zeros((2 * n, 2));
    for i in 0..n {
        onehot[[i, AUDIO]] = T::one();
        onehot[[n + i, TEXT]] = T::one();
    }
    let y = g.constant(onehot);
    let picked = g.mul(logp, y);
    let s = g.sum(picked);
    Ok((g.scale(s, -T::one() / T::from_usize_lossy(n)), logits))
}

/// Adversarial terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdvTerms {
    pub phn: Option<Var>,
    pub utt: Option<Var>,
    pub total: Var,
    /// Both levels disabled.
    pub inactive: bool,
    /// Correctly classified rows and rows seen, over the enabled levels.
    pub correct: usize,
    pub seen: usize,
}

/// Embedding inputs to the adversarial losses, one pair per level.
#[derive(Clone, Copy, Debug)]
pub struct AdvInputs {
    pub flat_audio: Var,
    pub flat_text: Var,
    pub utt_audio: Var,
    pub utt_text: Var,
}

/// Sum of the enabled level losses. With `through_grl` every embedding is
/// routed through the reversal layer first.
pub fn total_adv_var<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    inputs: AdvInputs,
    cfg: &AdvConfig,
    through_grl: bool,
) -> Result<AdvTerms> {
    let route = |g: &mut Graph<T>, v: Var| {
        if through_grl {
            g.reverse_grad(v, T::c(cfg.grl_scale))
        } else {
            v
        }
    };
    let (mut correct, mut seen) = (0, 0);
    let mut level = |g: &mut Graph<T>, audio: Var, text: Var| -> Result<Var> {
        let a = route(g, audio);
        let t = route(g, text);
        let n = g.rows(a);
        let (l, logits) = adv_level_parts(g, p, a, t, cfg.activation)?;
        let v = g.value(logits);
        correct += modality_hits(v.slice(ndarray::s![..n, ..]), v.slice(ndarray::s![n.., ..]));
        seen += 2 * n;
        Ok(l)
    };
    let phn = if cfg.enabled_phn {
        Some(level(g, inputs.flat_audio, inputs.flat_text)?)
    } else {
        None
    };
    let utt = if cfg.enabled_utt {
        Some(level(g, inputs.utt_audio, inputs.utt_text)?)
    } else {
        None
    };
    let total = match (phn, utt) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => g.scalar_constant(T::zero()),
    };
    Ok(AdvTerms {
        phn,
        utt,
        total,
        inactive: phn.is_none() && utt.is_none(),
        correct,
        seen,
    })
}

/// Rows whose argmax logit is the true modality.
pub fn modality_hits<T: Scalar>(audio_logits: ArrayView2<T>, text_logits: ArrayView2<T>) -> usize {
    audio_logits.rows().into_iter().filter(|r| r[AUDIO] > r[TEXT]).count()
        + text_logits.rows().into_iter().filter(|r| r[TEXT] > r[AUDIO]).count()
}

pub fn modality_accuracy<T: Scalar>(audio_logits: ArrayView2<T>, text_logits: ArrayView2<T>) -> f64 {
    let n = audio_logits.nrows() + text_logits.nrows();
    if n == 0 {
        return 0.0;
    }
    modality_hits(audio_logits, text_logits) as f64 / n as f64
}

/// Softmax probabilities `(p_audio, p_text)` for one embedding.
pub fn classify_modality<T: Scalar>(params: &ModalityClassifierParams<T>, emb: ArrayView1<T>) -> Result<[T; 2]> {
    if emb.len() != params.fc1_weight.nrows() {
        return Err(structural!(
            "embedding dim {} vs classifier input {}",
            emb.len(),
            params.fc1_weight.nrows()
        ));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(emb.to_owned().insert_axis(ndarray::Axis(0)));
    let logits = modality_logits(&mut g, &p, x, params.activation);
    let probs = g.row_softmax(logits);
    let v = g.value(probs);
    Ok([v[[0, AUDIO]], v[[0, TEXT]]])
}

fn level_loss<T: Scalar>(params: &ModalityClassifierParams<T>, audio: &Array2<T>, text: &Array2<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let a = g.constant(audio.clone());
    let t = g.constant(text.clone());
    let l = adv_level_var(&mut g, &p, a, t, params.activation)?;
    Ok(g.scalar(l))
}

pub fn adv_loss_phn<T: Scalar>(
    params: &ModalityClassifierParams<T>,
    flat_audio: &FlatEmbeddings<T>,
    flat_text: &FlatEmbeddings<T>,
) -> Result<T> {
    level_loss(params, &flat_audio.matrix, &flat_text.matrix)
}

pub fn adv_loss_utt<T: Scalar>(
    params: &ModalityClassifierParams<T>,
    utt_audio: &Array2<T>,
    utt_text: &Array2<T>,
) -> Result<T> {
    level_loss(params, utt_audio, utt_text)
}

/// Total adversarial loss value and whether both levels were disabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvLossValue<T> {
    pub value: T,
    pub inactive: bool,
}

pub fn total_adv_loss<T: Scalar>(
    params: &ModalityClassifierParams<T>,
    flats: (&FlatEmbeddings<T>, &FlatEmbeddings<T>),
    utts: (&Array2<T>, &Array2<T>),
    cfg: &AdvConfig,
) -> Result<AdvLossValue<T>> {
    let mut value = T::zero();
    if cfg.enabled_phn {
        value += adv_loss_phn(params, flats.0, flats.1)?;
    }
    if cfg.enabled_utt {
        value += adv_loss_utt(params, utts.0, utts.1)?;
    }
    let inactive = !cfg.enabled_phn && !cfg.enabled_utt;
    if inactive {
        log::warn!("both adversarial levels disabled; adversarial loss is 0");
    }
    Ok(AdvLossValue { value, inactive })
}
