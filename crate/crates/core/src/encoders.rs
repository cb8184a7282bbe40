//! Acoustic and text encoders with their utterance pooling heads.
//!
//! Both encoders are length preserving and emit `d`-dimensional frames.
//! Batched forward passes work on row-concatenated sequences plus a length
//! list, so every projection is a single matrix product over all frames.
//!
//! * acoustic: residual stack of same-padded 1-D convolutions, then a
//!   per-frame projection to `d`;
//! * text: trainable phoneme lookup, a bidirectional tanh recurrence, then a
//!   per-frame projection to `d`;
//! * CCSP: per-channel attention over frames conditioned on the frame and the
//!   sequence-wide mean/std, giving a weighted mean and std that are
//!   concatenated and projected back to `d`;
//! * GAP: plain mean over frames.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{domain, structural, Result};
use crate::params::{fan_in_uniform, zeros, Bound, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Acoustic feature dimension `F`.
    pub feature_dim: usize,
    /// Phoneme inventory size `V`.
    pub vocab_size: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Width of the phoneme lookup table.
    pub lookup_dim: usize,
    /// Units per direction of the recurrent layer.
    pub rnn_units: usize,
    pub ccsp_hidden: usize,
    /// Variance floor inside the standard deviations.
    pub std_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 40,
            vocab_size: 40,
            embed_dim: 256,
            conv_layers: 3,
            conv_channels: 64,
            conv_kernel: 3,
            lookup_dim: 256,
            rnn_units: 64,
            ccsp_hidden: 64,
            std_eps: 1e-10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel.is_multiple_of(2) {
            return Err(structural!("conv kernel {} must be odd", self.conv_kernel));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("conv_layers", self.conv_layers),
            ("conv_channels", self.conv_channels),
            ("lookup_dim", self.lookup_dim),
            ("rnn_units", self.rnn_units),
            ("ccsp_hidden", self.ccsp_hidden),
        ] {
            if v == 0 {
                return Err(structural!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Adds freshly initialized encoder and pooling parameters to `store`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R, store: &mut ParamStore<T>) {
    let (k, ch, d) = (cfg.conv_kernel, cfg.conv_channels, cfg.embed_dim);
    for layer in 0..cfg.conv_layers {
        let fan_in = k * if layer == 0 { cfg.feature_dim } else { ch };
        store.insert(
            format!("acoustic/conv{layer}/kernel"),
            fan_in_uniform(rng, fan_in, (fan_in, ch)),
        );
        store.insert(format!("acoustic/conv{layer}/bias"), zeros((1, ch)));
    }
    store.insert("acoustic/proj/weight", fan_in_uniform(rng, ch, (ch, d)));
    store.insert("acoustic/proj/bias", zeros((1, d)));

    let (e, h) = (cfg.lookup_dim, cfg.rnn_units);
    store.insert("text/lookup", fan_in_uniform(rng, cfg.vocab_size, (cfg.vocab_size, e)));
    for dir in ["fwd", "bwd"] {
        store.insert(format!("text/{dir}/input"), fan_in_uniform(rng, e, (e, h)));
        store.insert(format!("text/{dir}/recurrent"), fan_in_uniform(rng, h, (h, h)));
        store.insert(format!("text/{dir}/bias"), zeros((1, h)));
    }
    store.insert("text/proj/weight", fan_in_uniform(rng, 2 * h, (2 * h, d)));
    store.insert("text/proj/bias", zeros((1, d)));

    let a = cfg.ccsp_hidden;
    store.insert("ccsp/frame", fan_in_uniform(rng, 3 * d, (d, a)));
    store.insert("ccsp/context", fan_in_uniform(rng, 3 * d, (2 * d, a)));
    store.insert("ccsp/hidden_bias", zeros((1, a)));
    store.insert("ccsp/logits", fan_in_uniform(rng, a, (a, d)));
    store.insert("ccsp/logits_bias", zeros((1, d)));
    store.insert("ccsp/proj/weight", fan_in_uniform(rng, 2 * d, (2 * d, d)));
    store.insert("ccsp/proj/bias", zeros((1, d)));
}

fn check_lengths(lengths: &[usize], rows: usize) -> Result<()> {
    if lengths.contains(&0) {
        return Err(structural!("empty sequence in batch"));
    }
    let total: usize = lengths.iter().sum();
    if total != rows {
        return Err(structural!("lengths sum to {total} but input has {rows} rows"));
    }
    Ok(())
}

fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut at = 0;
    lengths
        .iter()
        .map(|&l| {
            let s = at;
            at += l;
            s
        })
        .collect()
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, weight: &str, bias: &str) -> Var {
    let w = p.var(weight);
    let b = p.var(bias);
    let xw = g.matmul(x, w);
    g.add(xw, b)
}

/// Same-padded 1-D convolution over concatenated sequences; padding never
/// crosses a sequence boundary.
fn conv1d<T: Scalar>(g: &mut Graph<T>, x: Var, lengths: &[usize], kernel: usize, weight: Var, bias: Var) -> Var {
    let half = (kernel / 2) as isize;
    let mut cols = Vec::with_capacity(kernel);
    for off in -half..=half {
        let mut idx = Vec::with_capacity(g.rows(x));
        for (start, &len) in offsets(lengths).iter().zip(lengths) {
            for pos in 0..len as isize {
                let src = pos + off;
                idx.push((src >= 0 && src < len as isize).then(|| start + src as usize));
            }
        }
        cols.push(g.gather_rows_opt(x, idx));
    }
    let im2col = g.concat_cols(&cols);
    let y = g.matmul(im2col, weight);
    g.add(y, bias)
}

/// Acoustic encoder over row-concatenated feature sequences (`ΣT_a × F`).
pub fn acoustic_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    features: Var,
    lengths: &[usize],
) -> Result<Var> {
    check_lengths(lengths, g.rows(features))?;
    if g.cols(features) != cfg.feature_dim {
        return Err(structural!(
            "feature dim {} != configured {}",
            g.cols(features),
            cfg.feature_dim
        ));
    }
    let mut h = features;
    for layer in 0..cfg.conv_layers {
        let w = p.var(&format!("acoustic/conv{layer}/kernel"));
        let b = p.var(&format!("acoustic/conv{layer}/bias"));
        let c = conv1d(g, h, lengths, cfg.conv_kernel, w, b);
        let act = g.relu(c);
        h = if layer == 0 { act } else { g.add(h, act) };
    }
    Ok(linear(g, p, h, "acoustic/proj/weight", "acoustic/proj/bias"))
}

/// One direction of the tanh recurrence, stepping all sequences in lockstep.
/// Returns per-frame hidden states in concatenated sequence order.
fn recurrence<T: Scalar>(g: &mut Graph<T>, xw: Var, recurrent: Var, lengths: &[usize], reverse: bool) -> Var {
    let starts = offsets(lengths);
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut steps = Vec::with_capacity(max_len);
    // source row of each emitted state, in emission order
    let mut emitted_rows = Vec::with_capacity(g.rows(xw));
    let mut prev: Option<(Var, Vec<usize>)> = None;
    for t in 0..max_len {
        let active: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] > t).collect();
        let rows: Vec<usize> = active
            .iter()
            .map(|&i| {
                let pos = if reverse { lengths[i] - 1 - t } else { t };
                starts[i] + pos
            })
            .collect();
        let inp = g.gather_rows(xw, &rows);
        let pre = match &prev {
            None => inp,
            Some((h_prev, prev_active)) => {
                let map: Vec<usize> = active
                    .iter()
                    .map(|i| prev_active.iter().position(|p| p == i).expect("active set shrinks"))
                    .collect();
                let hp = g.gather_rows(*h_prev, &map);
                let hu = g.matmul(hp, recurrent);
                g.add(inp, hu)
            }
        };
        let h = g.tanh(pre);
        steps.push(h);
        emitted_rows.extend_from_slice(&rows);
        prev = Some((h, active));
    }
    let stacked = g.concat_rows(&steps);
    let mut order = vec![0; emitted_rows.len()];
    for (k, &row) in emitted_rows.iter().enumerate() {
        order[row] = k;
    }
    g.gather_rows(stacked, &order)
}

/// Text encoder over a batch of phoneme id sequences; output rows are the
/// concatenation of all sequences (`ΣT_t × d`).
pub fn text_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, ids: &[Vec<usize>]) -> Result<Var> {
    let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
    if lengths.contains(&0) {
        return Err(structural!("empty phoneme sequence"));
    }
    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    if let Some((pos, &bad)) = flat.iter().enumerate().find(|(_, &i)| i >= cfg.vocab_size) {
        return Err(domain!(
            "phoneme id {bad} at flat position {pos} is outside vocabulary of {}",
            cfg.vocab_size
        ));
    }
    let x = g.gather_rows(p.var("text/lookup"), &flat);
    let mut dirs = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let xw = linear(g, p, x, &format!("text/{dir}/input"), &format!("text/{dir}/bias"));
        let u = p.var(&format!("text/{dir}/recurrent"));
        dirs.push(recurrence(g, xw, u, &lengths, reverse));
    }
    let h = g.concat_cols(&dirs);
    Ok(linear(g, p, h, "text/proj/weight", "text/proj/bias"))
}

/// Column mean and ε-floored column standard deviation of `x`, each `1×d`.
pub fn mean_std<T: Scalar>(g: &mut Graph<T>, x: Var, eps: f64) -> (Var, Var) {
    let mu = g.mean_cols(x);
    let sq = g.square(x);
    let m2 = g.mean_cols(sq);
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2);
    let var = g.max_const(var, T::c(eps));
    (mu, g.sqrt(var))
}

/// Attention-weighted per-channel statistics of `x` (`T×d`) given attention
/// logits of the same shape: weights are a softmax over frames per channel.
/// Returns `(weights, mean, std)`.
pub fn attentive_stats<T: Scalar>(g: &mut Graph<T>, x: Var, logits: Var, eps: f64) -> (Var, Var, Var) {
    let w = g.col_softmax(logits);
    let wx = g.mul(w, x);
    let mu = g.sum_cols(wx);
    let sq = g.square(x);
    let wsq = g.mul(w, sq);
    let m2 = g.sum_cols(wsq);
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2);
    let var = g.max_const(var, T::c(eps));
    let sigma = g.sqrt(var);
    (w, mu, sigma)
}

/// Output of [`ccsp_forward`].
pub struct CcspOutput {
    /// Pooled embeddings, one row per sequence (`N × d`).
    pub pooled: Var,
    /// Per-sequence attention weights (`T_i × d`).
    pub weights: Vec<Var>,
    /// Per-sequence weighted statistics `(mean, std)` before projection.
    pub stats: Vec<(Var, Var)>,
}

/// Channel- and context-dependent statistics pooling.
pub fn ccsp_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    seq: Var,
    lengths: &[usize],
) -> Result<CcspOutput> {
    check_lengths(lengths, g.rows(seq))?;
    let starts = offsets(lengths);
    let mut segs = Vec::with_capacity(lengths.len());
    let mut contexts = Vec::with_capacity(lengths.len());
    for (&s, &l) in starts.iter().zip(lengths) {
        let x = g.slice_rows(seq, s, l);
        let (mu, sd) = mean_std(g, x, cfg.std_eps);
        contexts.push(g.concat_cols(&[mu, sd]));
        segs.push(x);
    }
    let ctx = g.concat_rows(&contexts);
    let ctx_h = g.matmul(ctx, p.var("ccsp/context"));
    let frame_of: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
        .collect();
    let ctx_frames = g.gather_rows(ctx_h, &frame_of);
    let frame_h = g.matmul(seq, p.var("ccsp/frame"));
    let hid = g.add(frame_h, ctx_frames);
    let hid = g.add(hid, p.var("ccsp/hidden_bias"));
    let hid = g.tanh(hid);
    let logits = linear(g, p, hid, "ccsp/logits", "ccsp/logits_bias");

    let mut weights = Vec::with_capacity(lengths.len());
    let mut stats = Vec::with_capacity(lengths.len());
    let mut pooled_rows = Vec::with_capacity(lengths.len());
    for ((&s, &l), &x) in starts.iter().zip(lengths).zip(&segs) {
        let lg = g.slice_rows(logits, s, l);
        let (w, mu, sigma) = attentive_stats(g, x, lg, cfg.std_eps);
        pooled_rows.push(g.concat_cols(&[mu, sigma]));
        weights.push(w);
        stats.push((mu, sigma));
    }
    let cat = g.concat_rows(&pooled_rows);
    let pooled = linear(g, p, cat, "ccsp/proj/weight", "ccsp/proj/bias");
    Ok(CcspOutput { pooled, weights, stats })
}

/// Global average pooling over each sequence (`N × d`).
pub fn gap_forward<T: Scalar>(g: &mut Graph<T>, seq: Var, lengths: &[usize]) -> Result<Var> {
    check_lengths(lengths, g.rows(seq))?;
    let mut avg = Array2::zeros((lengths.len(), g.rows(seq)));
    for (i, (&s, &l)) in offsets(lengths).iter().zip(lengths).enumerate() {
        let w = T::one() / T::from_usize_lossy(l);
        for r in s..s + l {
            avg[[i, r]] = w;
        }
    }
    let a = g.constant(avg);
    Ok(g.matmul(a, seq))
}

/// Stacks sequences row-wise, returning the matrix and the lengths.
pub fn concat_sequences<T: Scalar>(seqs: &[&Array2<T>]) -> Result<(Array2<T>, Vec<usize>)> {
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let lengths = seqs.iter().map(|s| s.nrows()).collect();
    let m = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| structural!("{e}"))?;
    Ok((m, lengths))
}

/// Encodes one feature sequence (`T_a × F → T_a × d`).
pub fn acoustic_encode<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    features: &Array2<T>,
) -> Result<Array2<T>> {
    if features.nrows() == 0 {
        return Err(structural!("empty feature sequence"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let out = acoustic_forward(&mut g, &p, cfg, x, &[features.nrows()])?;
    Ok(g.value(out).clone())
}

/// Encodes one phoneme sequence (`T_t → T_t × d`).
pub fn text_encode<T: Scalar>(params: &ParamStore<T>, cfg: &EncoderConfig, ids: &[usize]) -> Result<Array2<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = text_forward(&mut g, &p, cfg, &[ids.to_vec()])?;
    Ok(g.value(out).clone())
}

/// CCSP-pools one `T×d` sequence to a `d`-vector (returned as `1×d`).
pub fn ccsp_pool<T: Scalar>(params: &ParamStore<T>, cfg: &EncoderConfig, seq: &Array2<T>) -> Result<Array2<T>> {
    if seq.nrows() == 0 {
        return Err(structural!("CCSP over an empty sequence"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(seq.clone());
    let out = ccsp_forward(&mut g, &p, cfg, x, &[seq.nrows()])?;
    Ok(g.value(out.pooled).clone())
}

/// Mean over time of one `T×d` sequence (returned as `1×d`).
pub fn gap_pool<T: Scalar>(seq: &Array2<T>) -> Result<Array2<T>> {
    if seq.nrows() == 0 {
        return Err(structural!("average pooling over an empty sequence"));
    }
    Ok(seq
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty")
        .insert_axis(ndarray::Axis(0)))
}
