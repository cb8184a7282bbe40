//! Deep metric learning objectives.
//!
//! Phoneme level: the asymmetric-proxy loss (an Extended-LogSumExp pull of
//! text anchors toward same-phoneme audio rows plus a Mean-Softplus push of
//! audio anchors away from other-phoneme text rows), optionally with
//! learnable per-phoneme `α, β, λ`, and the comparison set Proxy-MS,
//! Proxy-BD, InfoNCE (`clat`) and triplet.
//!
//! Utterance level: the relational-proxy family, which distills the
//! distance-wise, angle-wise and prototype structure of the text embeddings
//! into the acoustic embeddings. The text side is always gradient-blocked.
//! The exact closed forms of the relational losses are reconstructions from
//! their one-line descriptions: Huber on mean-normalized pair distances,
//! Huber on triplet angle cosines, and prototype cross-entropy on cosines.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::batch::FlatEmbeddings;
use crate::error::{domain, structural, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::{inv_softplus, Scalar};

/// Mixing weights of the three relational-proxy variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpLossWeights {
    pub w_dist: f64,
    pub w_angle: f64,
    pub w_proto: f64,
}

impl Default for RpLossWeights {
    fn default() -> Self {
        Self {
            w_dist: 1.0,
            w_angle: 1.0,
            w_proto: 1.0,
        }
    }
}

/// Static hyperparameters of the metric losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmlConfig {
    /// Initial (or fixed) positive scale `α`.
    pub alpha: f64,
    /// Initial (or fixed) negative scale `β`.
    pub beta: f64,
    /// Initial (or fixed) boundary `λ`.
    pub lambda: f64,
    pub infonce_tau: f64,
    pub triplet_margin: f64,
    pub huber_delta: f64,
    pub proto_tau: f64,
    pub rp: RpLossWeights,
    /// Floor on squared distances / norms inside the relational losses.
    pub rp_eps: f64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1.5,
            lambda: 0.01,
            infonce_tau: 0.07,
            triplet_margin: 0.2,
            huber_delta: 1.0,
            proto_tau: 0.1,
            rp: RpLossWeights::default(),
            rp_eps: 1e-12,
        }
    }
}

/// Phoneme-level loss selector. String keys are the registry names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhonemeLossKind {
    None,
    Asyp,
    AsypAdams,
    ProxyMs,
    ProxyBd,
    Clat,
    Triplet,
}

impl PhonemeLossKind {
    pub const ALL: [PhonemeLossKind; 7] = [
        Self::None,
        Self::Asyp,
        Self::AsypAdams,
        Self::ProxyMs,
        Self::ProxyBd,
        Self::Clat,
        Self::Triplet,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Asyp => "asyp",
            Self::AsypAdams => "asyp_adams",
            Self::ProxyMs => "proxy_ms",
            Self::ProxyBd => "proxy_bd",
            Self::Clat => "clat",
            Self::Triplet => "triplet",
        }
    }

    pub fn is_adaptive(self) -> bool {
        self == Self::AsypAdams
    }
}

impl fmt::Display for PhonemeLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PhonemeLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| structural!("unknown phoneme-level loss `{s}`"))
    }
}

/// Utterance-level loss selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceLossKind {
    None,
    Rp,
}

impl FromStr for UtteranceLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rp" => Ok(Self::Rp),
            _ => Err(structural!("unknown utterance-level loss `{s}`")),
        }
    }
}

/// `(1/α)·ln(1 + Σ_j exp(α·(λ − s_j)))`; zero for no similarities.
pub fn else_term<T: Scalar>(sims: &[T], alpha: T, lam: T) -> Result<T> {
    if !(alpha > T::zero()) {
        return Err(domain!("ELSE scale must be positive, got {alpha}"));
    }
    if sims.is_empty() {
        return Ok(T::zero());
    }
    let z: Vec<T> = sims.iter().map(|&s| alpha * (lam - s)).collect();
    let m = z.iter().fold(T::zero(), |m, &v| m.max(v));
    let sum = (-m).exp() + z.iter().map(|&v| (v - m).exp()).sum::<T>();
    Ok((m + sum.ln()) / alpha)
}

/// `mean_k ln(1 + exp(β·(s_k − λ)))`; zero for no similarities.
pub fn msp_term<T: Scalar>(sims: &[T], beta: T, lam: T) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(domain!("MSP scale must be positive, got {beta}"));
    }
    if sims.is_empty() {
        return Ok(T::zero());
    }
    let total: T = sims.iter().map(|&s| (beta * (s - lam)).softplus()).sum();
    Ok(total / T::from_usize_lossy(sims.len()))
}

/// Per-phoneme-class `α, β, λ` (length `V` each).
#[derive(Clone, Debug, PartialEq)]
pub struct AsyPParams<T> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
    pub lambda: Vec<T>,
    /// `true` when the values come from learnable (softplus-reparameterized)
    /// parameters.
    pub learnable: bool,
}

pub const ADAMS_ALPHA: &str = "adams/alpha";
pub const ADAMS_BETA: &str = "adams/beta";
pub const ADAMS_LAMBDA: &str = "adams/lambda";

/// Floor added after the softplus so the scales stay positive even when the
/// softplus underflows.
pub const SCALE_FLOOR: f64 = 1e-6;

fn positive_scale<T: Scalar>(raw: T) -> T {
    raw.softplus() + T::c(SCALE_FLOOR)
}

impl<T: Scalar> AsyPParams<T> {
    /// Shared scalars for every class.
    pub fn fixed(vocab: usize, alpha: f64, beta: f64, lambda: f64) -> Self {
        Self {
            alpha: vec![T::c(alpha); vocab],
            beta: vec![T::c(beta); vocab],
            lambda: vec![T::c(lambda); vocab],
            learnable: false,
        }
    }

    /// Adds raw learnable parameters whose reparameterization starts at the
    /// given values.
    pub fn init_store(store: &mut ParamStore<T>, vocab: usize, alpha: f64, beta: f64, lambda: f64) {
        let raw = |v: f64| inv_softplus(T::c(v - SCALE_FLOOR));
        store.insert(ADAMS_ALPHA, Array2::from_elem((vocab, 1), raw(alpha)));
        store.insert(ADAMS_BETA, Array2::from_elem((vocab, 1), raw(beta)));
        store.insert(ADAMS_LAMBDA, Array2::from_elem((vocab, 1), T::c(lambda)));
    }

    /// Recovers the effective per-class values from raw stored parameters.
    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let col =
            |name: &str, f: fn(T) -> T| -> Result<Vec<T>> { Ok(store.require(name)?.iter().map(|&x| f(x)).collect()) };
        Ok(Self {
            alpha: col(ADAMS_ALPHA, positive_scale)?,
            beta: col(ADAMS_BETA, positive_scale)?,
            lambda: col(ADAMS_LAMBDA, |x| x)?,
            learnable: true,
        })
    }

    pub fn vocab(&self) -> usize {
        self.alpha.len()
    }

    fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha.iter().chain(&self.beta).find(|&&v| !(v > T::zero())) {
            return Err(domain!("scale parameters must be positive, got {a}"));
        }
        Ok(())
    }
}

/// Per-class parameter columns (`V × 1`) placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ClassParamVars {
    pub alpha: Var,
    pub beta: Var,
    pub lambda: Var,
}

impl ClassParamVars {
    pub fn constant<T: Scalar>(g: &mut Graph<T>, p: &AsyPParams<T>) -> Result<Self> {
        p.validate()?;
        let col = |v: &[T]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column");
        Ok(Self {
            alpha: g.constant(col(&p.alpha)),
            beta: g.constant(col(&p.beta)),
            lambda: g.constant(col(&p.lambda)),
        })
    }

    /// Learnable form: `α = softplus(raw_α) + floor`, likewise `β`, and
    /// `λ = raw_λ`.
    pub fn learnable<T: Scalar>(g: &mut Graph<T>, p: &Bound) -> Self {
        let alpha = g.softplus(p.var(ADAMS_ALPHA));
        let alpha = g.offset(alpha, T::c(SCALE_FLOOR));
        let beta = g.softplus(p.var(ADAMS_BETA));
        let beta = g.offset(beta, T::c(SCALE_FLOOR));
        Self {
            alpha,
            beta,
            lambda: p.var(ADAMS_LAMBDA),
        }
    }

    fn per_anchor<T: Scalar>(&self, g: &mut Graph<T>, labels: &[usize]) -> (Var, Var, Var) {
        (
            g.gather_rows(self.alpha, labels),
            g.gather_rows(self.beta, labels),
            g.gather_rows(self.lambda, labels),
        )
    }
}

/// Positive (same label) and negative (different label) masks, `n × n`.
pub fn label_masks<T: Scalar>(labels: &[usize]) -> (Array2<T>, Array2<T>) {
    let n = labels.len();
    let pos = Array2::from_shape_fn(
        (n, n),
        |(i, j)| {
            if labels[i] == labels[j] {
                T::one()
            } else {
                T::zero()
            }
        },
    );
    let neg = pos.mapv(|v| T::one() - v);
    (pos, neg)
}

fn row_counts<T: Scalar>(mask: &Array2<T>) -> Array2<T> {
    mask.sum_axis(ndarray::Axis(1))
        .insert_axis(ndarray::Axis(1))
        .mapv(|c| c.max(T::one()))
}

/// Masked row-wise `(1/s_i)·ln(1 + Σ_j mask_ij·exp(z_ij))` with a detached
/// max shift for stability; `scale` is an `n×1` column.
pub fn else_rows_var<T: Scalar>(g: &mut Graph<T>, z: Var, mask: &Array2<T>, scale: Var) -> Var {
    let shift = {
        let zv = g.value(z);
        let mut m = Array2::zeros((zv.nrows(), 1));
        for i in 0..zv.nrows() {
            let mut best = T::zero();
            for j in 0..zv.ncols() {
                if mask[[i, j]] > T::zero() {
                    best = best.max(zv[[i, j]]);
                }
            }
            m[[i, 0]] = best;
        }
        m
    };
    let neg_shift = g.constant(shift.mapv(|v| (-v).exp()));
    let shift = g.constant(shift);
    let mk = g.constant(mask.clone());
    let zs = g.sub(z, shift);
    let e = g.exp(zs);
    let e = g.mul(e, mk);
    let s = g.sum_rows(e);
    let s = g.add(s, neg_shift);
    let l = g.ln(s);
    let l = g.add(l, shift);
    g.div(l, scale)
}

/// Masked row-wise mean of `softplus(z)`.
pub fn msp_rows_var<T: Scalar>(g: &mut Graph<T>, z: Var, mask: &Array2<T>) -> Var {
    let counts = g.constant(row_counts(mask));
    let mk = g.constant(mask.clone());
    let sp = g.softplus(z);
    let sp = g.mul(sp, mk);
    let s = g.sum_rows(sp);
    g.div(s, counts)
}

fn check_flat_pair<T: Scalar>(g: &Graph<T>, audio: Var, text: Var, labels: &[usize]) -> Result<()> {
    if g.shape(audio) != g.shape(text) {
        return Err(structural!(
            "audio {:?} and text {:?} flats differ in shape",
            g.shape(audio),
            g.shape(text)
        ));
    }
    if g.rows(audio) != labels.len() {
        return Err(structural!("{} rows but {} labels", g.rows(audio), labels.len()));
    }
    if labels.is_empty() {
        return Err(structural!("empty phoneme batch"));
    }
    Ok(())
}

/// Cosine matrices of a flat pair: `S_ta[i,j] = S(t_i, a_j)` and its transpose
/// `S_at[i,k] = S(a_i, t_k)`.
fn cross_sims<T: Scalar>(g: &mut Graph<T>, audio: Var, text: Var) -> Result<(Var, Var)> {
    let an = g.normalize_rows(audio)?;
    let tn = g.normalize_rows(text)?;
    let s_ta = g.matmul_t(tn, an);
    let s_at = g.transpose(s_ta);
    Ok((s_ta, s_at))
}

/// Asymmetric-proxy phoneme loss on positionally aligned flats: text anchors
/// pull same-phoneme audio rows (ELSE), audio anchors push other-phoneme text
/// rows (MSP). Per-class parameters are selected by the anchor's label.
pub fn asyp_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    audio: Var,
    text: Var,
    labels: &[usize],
    params: ClassParamVars,
) -> Result<Var> {
    check_flat_pair(g, audio, text, labels)?;
    let (pos, neg) = label_masks::<T>(labels);
    let (s_ta, s_at) = cross_sims(g, audio, text)?;
    let (alpha, beta, lam) = params.per_anchor(g, labels);

    let margin = g.sub(lam, s_ta);
    let z_pos = g.mul(margin, alpha);
    let pull = else_rows_var(g, z_pos, &pos, alpha);

    let viol = g.sub(s_at, lam);
    let z_neg = g.mul(viol, beta);
    let push = msp_rows_var(g, z_neg, &neg);

    let rows = g.add(pull, push);
    Ok(g.mean(rows))
}

/// Comparison-set phoneme losses sharing the flat-pair interface.
pub fn baseline_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    kind: PhonemeLossKind,
    audio: Var,
    text: Var,
    labels: &[usize],
    params: ClassParamVars,
    cfg: &DmlConfig,
) -> Result<Var> {
    check_flat_pair(g, audio, text, labels)?;
    let (pos, neg) = label_masks::<T>(labels);
    let (s_ta, s_at) = cross_sims(g, audio, text)?;
    match kind {
        PhonemeLossKind::ProxyMs | PhonemeLossKind::ProxyBd => {
            let (alpha, beta, lam) = params.per_anchor(g, labels);
            let margin = g.sub(lam, s_ta);
            let z_pos = g.mul(margin, alpha);
            let viol = g.sub(s_at, lam);
            let z_neg = g.mul(viol, beta);
            let (pull, push) = if kind == PhonemeLossKind::ProxyMs {
                (
                    else_rows_var(g, z_pos, &pos, alpha),
                    else_rows_var(g, z_neg, &neg, beta),
                )
            } else {
                (msp_rows_var(g, z_pos, &pos), msp_rows_var(g, z_neg, &neg))
            };
            let rows = g.add(pull, push);
            Ok(g.mean(rows))
        }
        PhonemeLossKind::Clat => {
            let logits = g.scale(s_ta, T::c(1.0 / cfg.infonce_tau));
            let logp = g.row_log_softmax(logits);
            let pm = g.constant(pos.clone());
            let picked = g.mul(logp, pm);
            let s = g.sum_rows(picked);
            let counts = g.constant(row_counts(&pos));
            let per = g.div(s, counts);
            let m = g.mean(per);
            Ok(g.neg(m))
        }
        PhonemeLossKind::Triplet => triplet_from_sims(g, s_ta, &pos, &neg, cfg.triplet_margin),
        PhonemeLossKind::Asyp | PhonemeLossKind::AsypAdams => asyp_loss_var(g, audio, text, labels, params),
        PhonemeLossKind::None => Err(structural!("`none` is not a phoneme loss")),
    }
}

/// Mean over valid `(anchor i, positive j, negative k)` of
/// `max(0, m + S_ik − S_ij)`; zero when no triplet exists.
pub fn triplet_from_sims<T: Scalar>(
    g: &mut Graph<T>,
    sims: Var,
    pos: &Array2<T>,
    neg: &Array2<T>,
    margin: f64,
) -> Result<Var> {
    let n = g.rows(sims);
    let mut terms = Vec::new();
    let mut count = 0usize;
    for i in 0..n {
        let p_idx: Vec<usize> = (0..pos.ncols()).filter(|&j| pos[[i, j]] > T::zero()).collect();
        let n_idx: Vec<usize> = (0..neg.ncols()).filter(|&k| neg[[i, k]] > T::zero()).collect();
        if p_idx.is_empty() || n_idx.is_empty() {
            continue;
        }
        let row = g.row(sims, i);
        let col = g.transpose(row);
        let sp = g.gather_rows(col, &p_idx);
        let sn = g.gather_rows(col, &n_idx);
        let sn = g.transpose(sn);
        let d = g.sub(sn, sp);
        let d = g.offset(d, T::c(margin));
        let h = g.relu(d);
        terms.push(g.sum(h));
        count += p_idx.len() * n_idx.len();
    }
    if terms.is_empty() {
        return Ok(g.scalar_constant(T::zero()));
    }
    let stacked = g.concat_rows(&terms);
    let total = g.sum(stacked);
    Ok(g.scale(total, T::one() / T::from_usize_lossy(count)))
}

/// Keyword triplet over one embedding set (anchor and candidates from the
/// same set, self excluded from the positives).
pub fn keyword_triplet_var<T: Scalar>(g: &mut Graph<T>, emb: Var, keyword_ids: &[usize], margin: f64) -> Result<Var> {
    let en = g.normalize_rows(emb)?;
    let sims = g.matmul_t(en, en);
    let (mut pos, neg) = label_masks::<T>(keyword_ids);
    for i in 0..keyword_ids.len() {
        pos[[i, i]] = T::zero();
    }
    triplet_from_sims(g, sims, &pos, &neg, margin)
}

fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            a.push(i);
            b.push(j);
        }
    }
    (a, b)
}

fn normalized_distances<T: Scalar>(g: &mut Graph<T>, e: Var, eps: f64) -> Var {
    let (ia, ib) = pair_indices(g.rows(e));
    let ea = g.gather_rows(e, &ia);
    let eb = g.gather_rows(e, &ib);
    let diff = g.sub(ea, eb);
    let sq = g.square(diff);
    let d2 = g.sum_rows(sq);
    let d2 = g.max_const(d2, T::c(eps));
    let d = g.sqrt(d2);
    let mu = g.mean(d);
    g.div(d, mu)
}

/// Distance-wise relational loss.
pub fn rp_distance_var<T: Scalar>(g: &mut Graph<T>, ae: Var, te: Var, cfg: &DmlConfig) -> Result<Var> {
    let n = g.rows(ae);
    if n < 2 {
        return Err(domain!("distance-wise relational loss needs N >= 2, got {n}"));
    }
    if g.shape(ae) != g.shape(te) {
        return Err(structural!("AE {:?} vs TE {:?}", g.shape(ae), g.shape(te)));
    }
    let te = g.detach(te);
    let da = normalized_distances(g, ae, cfg.rp_eps);
    let dt = normalized_distances(g, te, cfg.rp_eps);
    let diff = g.sub(da, dt);
    let h = g.huber(diff, T::c(cfg.huber_delta));
    Ok(g.mean(h))
}

/// Cosines of the angles at each anchor between every ordered pair of other
/// points: `(N−1)×(N−1)` per anchor, diagonal excluded by the caller's mask.
fn anchor_angle_cosines<T: Scalar>(g: &mut Graph<T>, e: Var, anchor: usize, eps: f64) -> Var {
    let n = g.rows(e);
    let others: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
    let pts = g.gather_rows(e, &others);
    let a = g.row(e, anchor);
    let d = g.sub(pts, a);
    let sq = g.square(d);
    let n2 = g.sum_rows(sq);
    let n2 = g.max_const(n2, T::c(eps));
    let nrm = g.sqrt(n2);
    let dn = g.div(d, nrm);
    g.matmul_t(dn, dn)
}

/// Angle-wise relational loss over all ordered triplets of distinct points.
pub fn rp_angle_var<T: Scalar>(g: &mut Graph<T>, ae: Var, te: Var, cfg: &DmlConfig) -> Result<Var> {
    let n = g.rows(ae);
    if n < 3 {
        return Err(domain!("angle-wise relational loss needs N >= 3, got {n}"));
    }
    if g.shape(ae) != g.shape(te) {
        return Err(structural!("AE {:?} vs TE {:?}", g.shape(ae), g.shape(te)));
    }
    let te = g.detach(te);
    let off_diag = g.constant(Array2::from_shape_fn((n - 1, n - 1), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            T::one()
        }
    }));
    let mut sums = Vec::with_capacity(n);
    for anchor in 0..n {
        let ca = anchor_angle_cosines(g, ae, anchor, cfg.rp_eps);
        let ct = anchor_angle_cosines(g, te, anchor, cfg.rp_eps);
        let diff = g.sub(ca, ct);
        let h = g.huber(diff, T::c(cfg.huber_delta));
        let h = g.mul(h, off_diag);
        sums.push(g.sum(h));
    }
    let stacked = g.concat_rows(&sums);
    let total = g.sum(stacked);
    Ok(g.scale(total, T::one() / T::from_usize_lossy(n * (n - 1) * (n - 2))))
}

/// Keyword ids remapped to `0..K` in order of first appearance.
pub fn dense_classes(keyword_ids: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let dense = keyword_ids
        .iter()
        .map(|k| match seen.iter().position(|s| s == k) {
            Some(p) => p,
            None => {
                seen.push(*k);
                seen.len() - 1
            }
        })
        .collect();
    (dense, seen.len())
}

/// Prototype relational loss: cross-entropy of each AE against text
/// prototypes (per-keyword TE means) at temperature `τ`.
pub fn rp_proto_var<T: Scalar>(
    g: &mut Graph<T>,
    ae: Var,
    te: Var,
    keyword_ids: &[usize],
    cfg: &DmlConfig,
) -> Result<Var> {
    let n = g.rows(ae);
    if n == 0 || keyword_ids.is_empty() {
        return Err(structural!("prototype loss over an empty batch"));
    }
    if keyword_ids.len() != n || g.shape(ae) != g.shape(te) {
        return Err(structural!(
            "{} keyword ids for AE {:?} and TE {:?}",
            keyword_ids.len(),
            g.shape(ae),
            g.shape(te)
        ));
    }
    let (dense, k) = dense_classes(keyword_ids);
    let mut avg = Array2::<T>::zeros((k, n));
    let mut onehot = Array2::<T>::zeros((n, k));
    let mut counts = vec![0usize; k];
    for &d in &dense {
        counts[d] += 1;
    }
    for (i, &d) in dense.iter().enumerate() {
        avg[[d, i]] = T::one() / T::from_usize_lossy(counts[d]);
        onehot[[i, d]] = T::one();
    }
    let te = g.detach(te);
    let avg = g.constant(avg);
    let protos = g.matmul(avg, te);
    let pn = g.normalize_rows(protos)?;
    let an = g.normalize_rows(ae)?;
    let cos = g.matmul_t(an, pn);
    let logits = g.scale(cos, T::c(1.0 / cfg.proto_tau));
    let logp = g.row_log_softmax(logits);
    let oh = g.constant(onehot);
    let picked = g.mul(logp, oh);
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one() / T::from_usize_lossy(n)))
}

/// Weighted sum of the three relational losses; zero-weight terms are not
/// evaluated.
pub fn utterance_rp_var<T: Scalar>(
    g: &mut Graph<T>,
    ae: Var,
    te: Var,
    keyword_ids: &[usize],
    cfg: &DmlConfig,
) -> Result<Var> {
    let w = cfg.rp;
    let mut total = g.scalar_constant(T::zero());
    if w.w_dist != 0.0 {
        let l = rp_distance_var(g, ae, te, cfg)?;
        let l = g.scale(l, T::c(w.w_dist));
        total = g.add(total, l);
    }
    if w.w_angle != 0.0 {
        let l = rp_angle_var(g, ae, te, cfg)?;
        let l = g.scale(l, T::c(w.w_angle));
        total = g.add(total, l);
    }
    if w.w_proto != 0.0 {
        let l = rp_proto_var(g, ae, te, keyword_ids, cfg)?;
        let l = g.scale(l, T::c(w.w_proto));
        total = g.add(total, l);
    }
    Ok(total)
}

fn flat_pair<T: Scalar>(g: &mut Graph<T>, audio: &FlatEmbeddings<T>, text: &FlatEmbeddings<T>) -> Result<(Var, Var)> {
    if audio.labels != text.labels {
        return Err(structural!("audio and text flats carry different labels"));
    }
    Ok((g.constant(audio.matrix.clone()), g.constant(text.matrix.clone())))
}

pub fn asyp_phoneme_loss<T: Scalar>(
    audio: &FlatEmbeddings<T>,
    text: &FlatEmbeddings<T>,
    params: &AsyPParams<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let (a, t) = flat_pair(&mut g, audio, text)?;
    let cp = ClassParamVars::constant(&mut g, params)?;
    let l = asyp_loss_var(&mut g, a, t, &audio.labels, cp)?;
    Ok(g.scalar(l))
}

pub fn baseline_phoneme_loss<T: Scalar>(
    kind: PhonemeLossKind,
    audio: &FlatEmbeddings<T>,
    text: &FlatEmbeddings<T>,
    params: &AsyPParams<T>,
    cfg: &DmlConfig,
) -> Result<T> {
    let mut g = Graph::new();
    let (a, t) = flat_pair(&mut g, audio, text)?;
    let cp = ClassParamVars::constant(&mut g, params)?;
    let l = baseline_loss_var(&mut g, kind, a, t, &audio.labels, cp, cfg)?;
    Ok(g.scalar(l))
}

fn eval_pair<T: Scalar>(
    ae: ArrayView2<T>,
    te: ArrayView2<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(ae.to_owned());
    let t = g.constant(te.to_owned());
    let l = f(&mut g, a, t)?;
    Ok(g.scalar(l))
}

pub fn rp_distance_loss<T: Scalar>(ae: ArrayView2<T>, te: ArrayView2<T>, cfg: &DmlConfig) -> Result<T> {
    eval_pair(ae, te, |g, a, t| rp_distance_var(g, a, t, cfg))
}

pub fn rp_angle_loss<T: Scalar>(ae: ArrayView2<T>, te: ArrayView2<T>, cfg: &DmlConfig) -> Result<T> {
    eval_pair(ae, te, |g, a, t| rp_angle_var(g, a, t, cfg))
}

pub fn rp_proto_loss<T: Scalar>(
    ae: ArrayView2<T>,
    te: ArrayView2<T>,
    keyword_ids: &[usize],
    cfg: &DmlConfig,
) -> Result<T> {
    eval_pair(ae, te, |g, a, t| rp_proto_var(g, a, t, keyword_ids, cfg))
}

pub fn utterance_rp_loss<T: Scalar>(
    ae: ArrayView2<T>,
    te: ArrayView2<T>,
    keyword_ids: &[usize],
    cfg: &DmlConfig,
) -> Result<T> {
    eval_pair(ae, te, |g, a, t| utterance_rp_var(g, a, t, keyword_ids, cfg))
}
