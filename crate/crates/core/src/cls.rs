//! Keyword classification heads on the acoustic utterance embedding.
//!
//! Both heads work on cosines between L2-normalized embeddings and
//! L2-normalized class weights. AAM-Softmax adds an angular margin to the
//! target class before a softmax cross-entropy; SphereFace2 trains one binary
//! logistic classifier per class on rescaled cosines.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dml::keyword_triplet_var;
use crate::error::{domain, structural, Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::scalar::Scalar;

pub const HEAD_WEIGHT: &str = "head/weight";
pub const HEAD_BIAS: &str = "head/bias";

/// Keyword-classification loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    None,
    Triplet,
    Aam,
    Sphereface2,
}

impl ClsLossKind {
    pub const ALL: [ClsLossKind; 4] = [Self::None, Self::Triplet, Self::Aam, Self::Sphereface2];

    pub fn key(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Triplet => "triplet",
            Self::Aam => "aam",
            Self::Sphereface2 => "sphereface2",
        }
    }

    /// Whether the loss owns a class-weight matrix.
    pub fn has_head(self) -> bool {
        matches!(self, Self::Aam | Self::Sphereface2)
    }
}

impl fmt::Display for ClsLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ClsLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| structural!("unknown classification loss `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub kind: ClsLossKind,
    /// Logit scale `s`.
    pub scale: f64,
    /// Angular (AAM) or additive cosine (SphereFace2) margin `m`.
    pub margin: f64,
    /// SphereFace2 rescaling exponent and non-target weight.
    pub t_balance: f64,
    /// SphereFace2 overall weighting `r`.
    pub r: f64,
    pub bias_init: f64,
    /// Margin of the keyword triplet variant.
    pub triplet_margin: f64,
    /// Floor on `1 − cos²` inside the AAM angle addition.
    pub sin_eps: f64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            kind: ClsLossKind::Sphereface2,
            scale: 30.0,
            margin: 0.2,
            t_balance: 3.0,
            r: 1.0,
            bias_init: 0.0,
            triplet_margin: 0.2,
            sin_eps: 1e-12,
        }
    }
}

impl ClsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "classifier scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "classifier margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !(self.t_balance > 0.0) || !(self.r > 0.0) {
            return Err(Error::Config("t_balance and r must be > 0".into()));
        }
        Ok(())
    }
}

/// Plain-array view of a head for evaluation outside training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    /// `C × d`, rows normalized on use.
    pub weight: Array2<T>,
    /// `1 × C`; only read by SphereFace2.
    pub bias: Array2<T>,
    pub scale: f64,
    pub margin: f64,
    pub t_balance: f64,
    pub r: f64,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(weight: Array2<T>, cfg: &ClsConfig) -> Self {
        let c = weight.nrows();
        Self {
            weight,
            bias: Array2::from_elem((1, c), T::c(cfg.bias_init)),
            scale: cfg.scale,
            margin: cfg.margin,
            t_balance: cfg.t_balance,
            r: cfg.r,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    fn config(&self) -> ClsConfig {
        ClsConfig {
            scale: self.scale,
            margin: self.margin,
            t_balance: self.t_balance,
            r: self.r,
            ..ClsConfig::default()
        }
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &ClsConfig,
    classes: usize,
    dim: usize,
    rng: &mut R,
    store: &mut ParamStore<T>,
) {
    if !cfg.kind.has_head() {
        return;
    }
    store.insert(HEAD_WEIGHT, fan_in_uniform(rng, dim, (classes, dim)));
    if cfg.kind == ClsLossKind::Sphereface2 {
        store.insert(HEAD_BIAS, Array2::from_elem((1, classes), T::c(cfg.bias_init)));
    }
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Array2<T>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(domain!("label {l} at row {i} out of range for {classes} classes"));
        }
        y[[i, l]] = T::one();
    }
    Ok(y)
}

fn cosines<T: Scalar>(g: &mut Graph<T>, weight: Var, emb: Var) -> Result<Var> {
    if g.cols(weight) != g.cols(emb) {
        return Err(structural!(
            "embedding dim {} vs head dim {}",
            g.cols(emb),
            g.cols(weight)
        ));
    }
    let en = g.normalize_rows(emb)?;
    let wn = g.normalize_rows(weight)?;
    Ok(g.matmul_t(en, wn))
}

/// Cross-entropy over `s·cos(θ_c + m·[c = y])`.
pub fn aam_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    weight: Var,
    emb: Var,
    labels: &[usize],
    cfg: &ClsConfig,
) -> Result<Var> {
    if labels.len() != g.rows(emb) || labels.is_empty() {
        return Err(structural!("{} labels for {} embeddings", labels.len(), g.rows(emb)));
    }
    let y = one_hot::<T>(labels, g.rows(weight))?;
    let cos = cosines(g, weight, emb)?;
    let yv = g.constant(y);
    let picked = g.mul(cos, yv);
    let target = g.sum_rows(picked);
    // cos(θ + m) = cos θ cos m − sin θ sin m
    let t2 = g.square(target);
    let one_minus = g.neg(t2);
    let one_minus = g.offset(one_minus, T::one());
    let one_minus = g.max_const(one_minus, T::c(cfg.sin_eps));
    let sin = g.sqrt(one_minus);
    let a = g.scale(target, T::c(cfg.margin.cos()));
    let b = g.scale(sin, T::c(cfg.margin.sin()));
    let shifted = g.sub(a, b);
    let delta = g.sub(shifted, target);
    let delta = g.mul(delta, yv);
    let logits = g.add(cos, delta);
    let logits = g.scale(logits, T::c(cfg.scale));
    let logp = g.row_log_softmax(logits);
    let ll = g.mul(logp, yv);
    let ll = g.sum_rows(ll);
    let m = g.mean(ll);
    Ok(g.neg(m))
}

/// Mean over samples of the per-class binary logistic terms.
pub fn sphereface2_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    weight: Var,
    bias: Var,
    emb: Var,
    labels: &[usize],
    cfg: &ClsConfig,
) -> Result<Var> {
    if labels.len() != g.rows(emb) || labels.is_empty() {
        return Err(structural!("{} labels for {} embeddings", labels.len(), g.rows(emb)));
    }
    let classes = g.rows(weight);
    let y = one_hot::<T>(labels, classes)?;
    let not_y = y.mapv(|v| T::one() - v);
    let cos = cosines(g, weight, emb)?;
    // g(z) = 2((z+1)/2)^t − 1
    let z = g.offset(cos, T::one());
    let z = g.scale(z, T::c(0.5));
    let z = g.powf(z, T::c(cfg.t_balance));
    let z = g.scale(z, T::c(2.0));
    let z = g.offset(z, -T::one());
    let z = g.scale(z, T::c(cfg.scale));
    let z = g.add(z, bias);

    let sm = T::c(cfg.scale * cfg.margin);
    let tz = g.offset(z, -sm);
    let tz = g.neg(tz);
    let tz = g.softplus(tz);
    let yv = g.constant(y);
    let pos = g.mul(tz, yv);
    let mut per = g.scale(pos, T::c(1.0 / cfg.r));
    if classes > 1 {
        let nz = g.offset(z, sm);
        let nz = g.softplus(nz);
        let nv = g.constant(not_y);
        let neg = g.mul(nz, nv);
        let w = cfg.t_balance / (cfg.r * (classes - 1) as f64);
        let neg = g.scale(neg, T::c(w));
        per = g.add(per, neg);
    }
    let per = g.sum_rows(per);
    Ok(g.mean(per))
}

/// Keyword classification loss for the configured kind on bound parameters.
pub fn key_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    emb: Var,
    keyword_ids: &[usize],
    cfg: &ClsConfig,
) -> Result<Option<Var>> {
    match cfg.kind {
        ClsLossKind::None => Ok(None),
        ClsLossKind::Triplet => keyword_triplet_var(g, emb, keyword_ids, cfg.triplet_margin).map(Some),
        ClsLossKind::Aam => aam_loss_var(g, p.var(HEAD_WEIGHT), emb, keyword_ids, cfg).map(Some),
        ClsLossKind::Sphereface2 => {
            sphereface2_loss_var(g, p.var(HEAD_WEIGHT), p.var(HEAD_BIAS), emb, keyword_ids, cfg).map(Some)
        }
    }
}

pub fn aam_softmax_loss<T: Scalar>(head: &ClassifierHead<T>, emb: &Array2<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let w = g.constant(head.weight.clone());
    let e = g.constant(emb.clone());
    let l = aam_loss_var(&mut g, w, e, labels, &head.config())?;
    Ok(g.scalar(l))
}

pub fn sphereface2_loss<T: Scalar>(head: &ClassifierHead<T>, emb: &Array2<T>, labels: &[usize]) -> Result<T> {
    if head.bias.dim() != (1, head.classes()) {
        return Err(structural!(
            "bias shape {:?} for {} classes",
            head.bias.dim(),
            head.classes()
        ));
    }
    let mut g = Graph::new();
    let w = g.constant(head.weight.clone());
    let b = g.constant(head.bias.clone());
    let e = g.constant(emb.clone());
    let l = sphereface2_loss_var(&mut g, w, b, e, labels, &head.config())?;
    Ok(g.scalar(l))
}
