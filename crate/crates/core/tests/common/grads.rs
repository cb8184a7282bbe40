use adml::adversarial::{self, Activation, ModalityClassifierParams};
use adml::alignment::{cross_attend_var, monotonic_matching_loss_var};
use adml::autodiff::{Graph, Var};
use adml::cls::{aam_loss_var, sphereface2_loss_var, ClsConfig, HEAD_BIAS, HEAD_WEIGHT};
use adml::dml::{self, AsyPParams, ClassParamVars, DmlConfig, PhonemeLossKind, ADAMS_ALPHA, ADAMS_BETA, ADAMS_LAMBDA};
use adml::encoders::{self, ccsp_forward, gap_forward, EncoderConfig};
use adml::params::{Bound, ParamStore};
use adml::Result;
use ndarray::Array2;
use rand::Rng;

use super::{grad_check, rand_labels, rand_mat, rng};

pub const INSTANCES: u64 = 5;

fn empty() -> ParamStore<f64> {
    ParamStore::new()
}

fn fixed_params(g: &mut Graph<f64>, vocab: usize) -> ClassParamVars {
    // larger scales than the defaults so both terms carry visible curvature
    ClassParamVars::constant(g, &AsyPParams::fixed(vocab, 0.7, 1.5, 0.1)).unwrap()
}

fn phoneme_case(seed: u64) -> (Vec<Array2<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let n = r.random_range(4..=8);
    let d = r.random_range(3..=5);
    let labels = rand_labels(&mut r, n, 3);
    (vec![rand_mat(&mut r, n, d), rand_mat(&mut r, n, d)], labels)
}

fn phoneme_check(kind: PhonemeLossKind, seed: u64) -> f64 {
    let (x, labels) = phoneme_case(seed);
    let cfg = DmlConfig::default();
    grad_check(&x, &empty(), |g, v, _| {
        let cp = fixed_params(g, 3);
        dml::baseline_loss_var(g, kind, v[0], v[1], &labels, cp, &cfg)
    })
}

fn adams_check(seed: u64) -> f64 {
    let (x, labels) = phoneme_case(seed);
    let mut r = rng(seed ^ 0xada);
    let mut store = empty();
    store.insert(ADAMS_ALPHA, rand_mat(&mut r, 3, 1));
    store.insert(ADAMS_BETA, rand_mat(&mut r, 3, 1));
    store.insert(ADAMS_LAMBDA, rand_mat(&mut r, 3, 1).mapv(|v| 0.5 * v));
    grad_check(&x, &store, |g, v, p| {
        let cp = ClassParamVars::learnable(g, p);
        dml::asyp_loss_var(g, v[0], v[1], &labels, cp)
    })
}

fn masked_rows_check(seed: u64, else_form: bool) -> f64 {
    let mut r = rng(seed);
    let (n, m) = (r.random_range(2..=5), r.random_range(2..=6));
    let mask = Array2::from_shape_simple_fn((n, m), || if r.random_bool(0.6) { 1.0 } else { 0.0 });
    let z = rand_mat(&mut r, n, m).mapv(|v| 3.0 * v);
    let scale = rand_mat(&mut r, n, 1).mapv(|v| 0.5 + v.abs());
    grad_check(&[z, scale], &empty(), |g, v, _| {
        let rows = if else_form {
            dml::else_rows_var(g, v[0], &mask, v[1])
        } else {
            let s = g.mul(v[0], v[1]);
            dml::msp_rows_var(g, s, &mask)
        };
        Ok(g.sum(rows))
    })
}

/// The TE side is a stop-gradient teacher, so only AE is differentiated.
fn utterance_check(seed: u64, which: usize) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(4..=7);
    let d = r.random_range(3..=5);
    let ids = rand_labels(&mut r, n, 3);
    let ae = rand_mat(&mut r, n, d);
    let te = rand_mat(&mut r, n, d);
    let cfg = DmlConfig::default();
    grad_check(&[ae], &empty(), |g, v, _| {
        let t = g.constant(te.clone());
        match which {
            0 => dml::rp_distance_var(g, v[0], t, &cfg),
            1 => dml::rp_angle_var(g, v[0], t, &cfg),
            _ => dml::rp_proto_var(g, v[0], t, &ids, &cfg),
        }
    })
}

fn head_check(seed: u64, sf2: bool) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(3..=7);
    let (d, c) = (r.random_range(3..=5), r.random_range(2..=4));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let mut store = empty();
    store.insert(HEAD_WEIGHT, rand_mat(&mut r, c, d));
    store.insert(HEAD_BIAS, rand_mat(&mut r, 1, c));
    let cfg = ClsConfig {
        scale: 4.0,
        margin: 0.2,
        ..ClsConfig::default()
    };
    let emb = rand_mat(&mut r, n, d);
    grad_check(&[emb], &store, |g, v, p| {
        if sf2 {
            sphereface2_loss_var(g, p.var(HEAD_WEIGHT), p.var(HEAD_BIAS), v[0], &labels, &cfg)
        } else {
            aam_loss_var(g, p.var(HEAD_WEIGHT), v[0], &labels, &cfg)
        }
    })
}

fn mm_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (tt, ta, d) = (r.random_range(2..=4), r.random_range(3..=7), r.random_range(2..=4));
    let x = vec![rand_mat(&mut r, tt, d), rand_mat(&mut r, ta, d)];
    grad_check(&x, &empty(), |g, v, _| {
        let (aff, _) = cross_attend_var(g, v[0], v[1]);
        monotonic_matching_loss_var(g, aff, true, 0.1)
    })
}

fn adv_check(seed: u64, rows: usize) -> f64 {
    let mut r = rng(seed);
    let d = 4;
    let mut store = empty();
    ModalityClassifierParams::<f64>::random(d, 6, Activation::Relu, &mut r).write_to(&mut store);
    let x = vec![rand_mat(&mut r, rows, d), rand_mat(&mut r, rows, d)];
    grad_check(&x, &store, |g, v, p| {
        adversarial::adv_level_var(g, p, v[0], v[1], Activation::Relu)
    })
}

fn pooling_enc() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        conv_channels: 4,
        conv_layers: 1,
        lookup_dim: 4,
        rnn_units: 4,
        ccsp_hidden: 4,
        feature_dim: 3,
        vocab_size: 5,
        ..EncoderConfig::default()
    }
}

fn pooling_check(seed: u64, ccsp: bool) -> f64 {
    let mut r = rng(seed);
    let enc = pooling_enc();
    let mut all = empty();
    encoders::init_params(&enc, &mut r, &mut all);
    let mut store = empty();
    for (n, a) in all.iter().filter(|(n, _)| n.starts_with("ccsp/")) {
        // nonzero biases so their gradients are exercised too
        store.insert(n.clone(), a.mapv(|v| v + 0.1));
    }
    let lengths = [2usize, 3];
    let seq = rand_mat(&mut r, 5, 8);
    let weights = rand_mat(&mut r, 2, 8);
    let f = |g: &mut Graph<f64>, v: &[Var], p: &Bound| -> Result<Var> {
        let pooled = if ccsp {
            ccsp_forward(g, p, &enc, v[0], &lengths)?.pooled
        } else {
            gap_forward(g, v[0], &lengths)?
        };
        let w = g.constant(weights.clone());
        let y = g.mul(pooled, w);
        let y = g.tanh(y);
        Ok(g.sum(y))
    };
    let none = empty();
    grad_check(&[seq], if ccsp { &store } else { &none }, f)
}

/// Every differentiable loss and pooling op, `INSTANCES` random cases each:
/// name and worst relative error.
pub fn suite() -> Vec<(&'static str, f64)> {
    type Check = fn(u64) -> f64;
    let checks: [(&str, Check); 18] = [
        ("else", |s| masked_rows_check(s, true)),
        ("msp", |s| masked_rows_check(s, false)),
        ("asyp", |s| phoneme_check(PhonemeLossKind::Asyp, s)),
        ("asyp_adams", adams_check),
        ("rp_distance", |s| utterance_check(s, 0)),
        ("rp_angle", |s| utterance_check(s, 1)),
        ("rp_proto", |s| utterance_check(s, 2)),
        ("proxy_ms", |s| phoneme_check(PhonemeLossKind::ProxyMs, s)),
        ("proxy_bd", |s| phoneme_check(PhonemeLossKind::ProxyBd, s)),
        ("clat", |s| phoneme_check(PhonemeLossKind::Clat, s)),
        ("triplet", |s| phoneme_check(PhonemeLossKind::Triplet, s)),
        ("aam", |s| head_check(s, false)),
        ("sphereface2", |s| head_check(s, true)),
        ("monotonic_matching", mm_check),
        ("adv_phn", |s| adv_check(s, 9)),
        ("adv_utt", |s| adv_check(s, 3)),
        ("ccsp", |s| pooling_check(s, true)),
        ("gap", |s| pooling_check(s, false)),
    ];
    checks
        .iter()
        .map(|&(name, f)| (name, (0..INSTANCES).map(|s| f(100 + s)).fold(0.0, f64::max)))
        .collect()
}
