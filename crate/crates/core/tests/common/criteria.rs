use std::time::Instant;

use adml::adversarial::{self, AdvConfig, ModalityClassifierParams};
use adml::alignment::{cross_attend, monotonic_matching_loss, monotonic_target};
use adml::autodiff::Graph;
use adml::batch::FlatEmbeddings;
use adml::config::RunConfig;
use adml::dml::{self, AsyPParams, DmlConfig, PhonemeLossKind};
use adml::encoders::EncoderConfig;
use adml::experiment::{self, LadderCell, LadderSpec, ProbeConfig};
use adml::metrics;
use adml::params::{group_of, ParamGroup, ParamStore};
use adml::seed::substream;
use adml::synth::{Corpus, SynthConfig};
use adml::trainer::{
    collect_grads, embedding_loss, forward, init_state, sample_batch, train_step, EmbeddingTerms, LossConfig,
    TrainConfig, TrainSet,
};
use ndarray::{Array2, Axis};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{ap_oracle, auc_oracle, eer_oracle, grads, rand_labels, rand_mat, rand_trials, rng, Frac};

pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub secs: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} {} ({:.1}s) {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.secs,
            self.detail
        )
    }
}

fn timed(id: u32, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome {
        id,
        name,
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

/// Collects named checks; the detail lists the failing ones, or a summary.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.count += 1;
        if !ok {
            self.failed.push(name.into());
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.check(format!("{name}: got {got:e}, want {want:e}"), ok);
    }

    fn finish(self, ok_detail: String) -> (bool, String) {
        if self.failed.is_empty() {
            (true, ok_detail)
        } else {
            (
                false,
                format!(
                    "{}/{} failed: {}",
                    self.failed.len(),
                    self.count,
                    self.failed.join("; ")
                ),
            )
        }
    }
}

// ---------------------------------------------------------------------------
// 1: analytic anchors

pub const ANALYTIC_TOL: f64 = 1e-9;

pub fn analytic() -> Outcome {
    timed(1, "analytic anchors", || {
        let mut c = Checks::default();
        let ln2 = 2f64.ln();
        for &(alpha, lam) in &[(0.01, 0.01), (1.0, 0.0), (7.5, -0.3)] {
            let v = dml::else_term(&[lam], alpha, lam).unwrap();
            c.close(&format!("else α={alpha}"), v, ln2 / alpha, ANALYTIC_TOL);
        }
        for &(beta, lam) in &[(1.5, 0.01), (0.3, 0.7)] {
            let v = dml::msp_term(&[lam, lam], beta, lam).unwrap();
            c.close(&format!("msp β={beta}"), v, ln2, ANALYTIC_TOL);
        }

        let mut r = rng(11);
        let zero = ModalityClassifierParams::<f64>::zeros(6, 5);
        let flat = |m: Array2<f64>| FlatEmbeddings {
            labels: vec![0; m.nrows()],
            matrix: m,
        };
        let (fa, ft) = (flat(rand_mat(&mut r, 9, 6)), flat(rand_mat(&mut r, 9, 6)));
        let (ua, ut) = (rand_mat(&mut r, 3, 6), rand_mat(&mut r, 3, 6));
        c.close(
            "adv phn",
            adversarial::adv_loss_phn(&zero, &fa, &ft).unwrap(),
            2.0 * ln2,
            ANALYTIC_TOL,
        );
        c.close(
            "adv utt",
            adversarial::adv_loss_utt(&zero, &ua, &ut).unwrap(),
            2.0 * ln2,
            ANALYTIC_TOL,
        );
        let total = adversarial::total_adv_loss(&zero, (&fa, &ft), (&ua, &ut), &AdvConfig::default()).unwrap();
        c.close("adv total", total.value, 4.0 * ln2, ANALYTIC_TOL);

        let terms = EmbeddingTerms {
            utt: 1.0,
            key: 1.0,
            mm: 1.0,
            phn: 1.0,
        };
        c.close("embedding loss", embedding_loss(&terms, 0.1), 3.1, ANALYTIC_TOL);

        let cfg = DmlConfig::default();
        let e = rand_mat(&mut r, 6, 5);
        let ids = [0, 0, 1, 1, 2, 2];
        c.close(
            "rp distance",
            dml::rp_distance_loss(e.view(), e.view(), &cfg).unwrap(),
            0.0,
            ANALYTIC_TOL,
        );
        c.close(
            "rp angle",
            dml::rp_angle_loss(e.view(), e.view(), &cfg).unwrap(),
            0.0,
            ANALYTIC_TOL,
        );
        let other = rand_mat(&mut r, 6, 5);
        c.close(
            "rp proto single class",
            dml::rp_proto_loss(e.view(), other.view(), &[4; 6], &cfg).unwrap(),
            0.0,
            ANALYTIC_TOL,
        );
        let mut rp_only = cfg.clone();
        rp_only.rp.w_proto = 0.0;
        c.close(
            "rp weighted sum",
            dml::utterance_rp_loss(e.view(), e.view(), &ids, &rp_only).unwrap(),
            0.0,
            ANALYTIC_TOL,
        );
        let n = c.count;
        c.finish(format!("{n} anchors within {ANALYTIC_TOL:e}"))
    })
}

// ---------------------------------------------------------------------------
// 2: gradient suite

pub const GRAD_TOL: f64 = 1e-4;

pub fn gradients() -> Outcome {
    timed(2, "gradient suite", || {
        let results = grads::suite();
        let mut c = Checks::default();
        for &(name, err) in &results {
            c.check(format!("{name} rel err {err:e}"), err < GRAD_TOL);
        }
        let (worst, err) = results
            .iter()
            .fold(("", 0.0), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
        c.finish(format!(
            "{} ops x {} instances, worst {worst} {err:.1e} < {GRAD_TOL:e}",
            results.len(),
            grads::INSTANCES
        ))
    })
}

// ---------------------------------------------------------------------------
// 3 and 4 share a small model

pub fn small_enc() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 16,
        conv_channels: 8,
        conv_layers: 2,
        lookup_dim: 8,
        rnn_units: 8,
        ccsp_hidden: 8,
        feature_dim: 6,
        vocab_size: 6,
        ..EncoderConfig::default()
    }
}

pub fn small_corpus(seed: u64) -> Corpus {
    Corpus::generate(&SynthConfig {
        seed,
        train_keywords: 8,
        eval_keywords: 2,
        train_utterances: 3,
        vocab_size: 6,
        feature_dim: 6,
        max_len: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn small_losses() -> LossConfig {
    let mut l = LossConfig::default();
    l.adv.hidden = 8;
    l
}

pub fn grl() -> Outcome {
    timed(3, "gradient reversal", || {
        let mut c = Checks::default();
        let mut r = rng(21);
        for case in 0..20 {
            let (rows, cols) = (r.random_range(1..6), r.random_range(1..6));
            let x = rand_mat(&mut r, rows, cols).mapv(|v| v * 1e3);
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let y = g.reverse_grad(v, 1.0);
            c.check(format!("forward identity {case}"), *g.value(y) == x);
            c.check(format!("array identity {case}"), adversarial::grl(&x) == x);
        }

        // d/dx sum(tanh(GRL(x)·W)) must be the negated plain derivative
        for case in 0..5u64 {
            let mut r = rng(300 + case);
            let x = rand_mat(&mut r, 3, 4);
            let w = rand_mat(&mut r, 4, 2);
            let f = |x: &Array2<f64>| x.dot(&w).mapv(f64::tanh).sum();
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let rv = g.reverse_grad(xv, 1.0);
            let wv = g.constant(w.clone());
            let h = g.matmul(rv, wv);
            let h = g.tanh(h);
            let l = g.sum(h);
            g.backward(l);
            let analytic = g.grad(xv).unwrap().clone();
            let mut numeric = Array2::zeros(x.dim());
            for idx in ndarray::indices(x.dim()) {
                let (mut up, mut down) = (x.clone(), x.clone());
                up[idx] += 1e-6;
                down[idx] -= 1e-6;
                numeric[idx] = (f(&up) - f(&down)) / 2e-6;
            }
            let err = (&analytic + &numeric).mapv(f64::abs).sum() / numeric.mapv(f64::abs).sum();
            c.check(format!("sign flip {case}: rel err {err:e}"), err < 1e-6);
        }

        let enc = small_enc();
        let mut losses = small_losses();
        losses.adv.enabled_phn = false;
        losses.adv.enabled_utt = false;
        let set = TrainSet::<f64>::from_corpus(&small_corpus(0)).unwrap();
        let mut state = init_state::<f64>(&enc, &losses, set.classes(), 3).unwrap();
        let before = state.params.clone();
        let cfg = TrainConfig {
            keywords_per_batch: 4,
            ..TrainConfig::default()
        };
        let mut brng = substream(5, "grl/batches");
        for step in 0..3 {
            let b = sample_batch(&set, 4, 2, &mut brng).unwrap();
            let m = train_step(&mut state, &b, &enc, &losses, &cfg).unwrap();
            c.check(
                format!("step {step}: modality grad norm {}", m.grad_norm_modality),
                m.grad_norm_modality == 0.0,
            );
        }
        let mut n_mod = 0;
        for (name, v) in state.params.iter() {
            if group_of(name).unwrap() == ParamGroup::Modality {
                n_mod += 1;
                c.check(format!("{name} moved without MAL"), v == before.get(name).unwrap());
            }
        }
        c.check("modality parameters exist", n_mod > 0);
        c.check("embedding parameters moved", state.params != before);
        let n = c.count;
        c.finish(format!("{n} checks; theta_M bit-identical after 3 steps with MAL off"))
    })
}

// ---------------------------------------------------------------------------
// 4: minimax roles

pub const MINIMAX_STEP: f64 = 1e-4;

fn adv_value(
    params: &ParamStore<f64>,
    batch: &adml::batch::PhonemeBatch<f64>,
    enc: &EncoderConfig,
    losses: &LossConfig,
) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = forward(&mut g, &p, batch, enc, losses, false).unwrap();
    g.scalar(f.adv.total)
}

fn stepped(params: &ParamStore<f64>, grads: &[(String, Option<Array2<f64>>)], group: ParamGroup) -> ParamStore<f64> {
    let mut out = params.clone();
    for (name, grad) in grads {
        if group_of(name).unwrap() != group {
            continue;
        }
        if let Some(gr) = grad {
            let w = out.get_mut(name).unwrap();
            w.scaled_add(-MINIMAX_STEP, gr);
        }
    }
    out
}

/// Change of the plain adversarial loss after one descent step of the
/// objective's adversarial part on each group: `(Δ via θ_M, Δ via θ_emb)`.
pub fn minimax_deltas(seed: u64) -> (f64, f64, f64) {
    let enc = small_enc();
    let losses = small_losses();
    let set = TrainSet::<f64>::from_corpus(&small_corpus(seed)).unwrap();
    let state = init_state::<f64>(&enc, &losses, set.classes(), seed).unwrap();
    // every training utterance of every keyword: the full batch
    let batch = sample_batch(&set, set.classes(), 3, &mut substream(seed, "minimax")).unwrap();

    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let f = forward(&mut g, &p, &batch, &enc, &losses, true).unwrap();
    let adv = g.scale(f.adv.total, losses.adv.lambda);
    g.backward(adv);
    let grads = collect_grads(&g, &p, &state.params);

    let base = adv_value(&state.params, &batch, &enc, &losses);
    let via_m = adv_value(
        &stepped(&state.params, &grads, ParamGroup::Modality),
        &batch,
        &enc,
        &losses,
    ) - base;
    let via_emb = adv_value(
        &stepped(&state.params, &grads, ParamGroup::Embedding),
        &batch,
        &enc,
        &losses,
    ) - base;
    (base, via_m, via_emb)
}

pub const MINIMAX_SEEDS: u64 = 5;

pub fn minimax() -> Outcome {
    timed(4, "minimax direction", || {
        let mut c = Checks::default();
        let mut lines = Vec::new();
        for seed in 0..MINIMAX_SEEDS {
            let (base, dm, de) = minimax_deltas(seed);
            c.check(format!("seed {seed}: theta_M step raised L_adv by {dm:e}"), dm <= 0.0);
            c.check(
                format!("seed {seed}: theta_emb step lowered L_adv by {:e}", -de),
                de >= 0.0,
            );
            c.check(format!("seed {seed}: both steps moved L_adv"), dm != 0.0 && de != 0.0);
            lines.push(format!("L={base:.4} dM={dm:.2e} dEmb={de:+.2e}"));
        }
        c.finish(format!(
            "{} seeds, step {MINIMAX_STEP:e}: {}",
            MINIMAX_SEEDS,
            lines.join(", ")
        ))
    })
}

// ---------------------------------------------------------------------------
// 5: oracles

pub const METRIC_SETS: u64 = 200;
pub const MAX_TRIALS: usize = 1000;
pub const LOSS_BATCHES: u64 = 50;
pub const LOSS_TOL: f64 = 1e-9;

pub fn metric_mismatches(sets: u64) -> Vec<String> {
    let mut bad = Vec::new();
    for s in 0..sets {
        let mut r = rng(5000 + s);
        let (scores, labels) = rand_trials(&mut r, MAX_TRIALS);
        let ap = metrics::average_precision(&scores, &labels).unwrap();
        if ap != ap_oracle(&scores, &labels) {
            bad.push(format!("set {s} AP {ap} vs {}", ap_oracle(&scores, &labels)));
        }
        let auc = metrics::auc(&scores, &labels).unwrap();
        if auc != auc_oracle(&scores, &labels) {
            bad.push(format!("set {s} AUC {auc} vs {}", auc_oracle(&scores, &labels)));
        }
        let er = metrics::eer_ratio(&scores, &labels).unwrap();
        let eo = eer_oracle(&scores, &labels);
        if !Frac(er.num, er.den).eq(eo) || metrics::eer(&scores, &labels).unwrap() != eo.0 as f64 / eo.1 as f64 {
            bad.push(format!("set {s} EER {}/{} vs {}/{}", er.num, er.den, eo.0, eo.1));
        }
    }
    bad
}

fn cosine(u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>) -> f64 {
    u.dot(&v) / (u.dot(&u).sqrt() * v.dot(&v).sqrt())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-anchor loop evaluation of a phoneme loss.
pub fn phoneme_loss_oracle(
    kind: PhonemeLossKind,
    audio: &Array2<f64>,
    text: &Array2<f64>,
    labels: &[usize],
    p: &AsyPParams<f64>,
    cfg: &DmlConfig,
) -> f64 {
    let n = labels.len();
    // s_ta[i][j] = cos(text_i, audio_j)
    let s_ta: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| cosine(text.row(i), audio.row(j))).collect())
        .collect();
    let s_at = |i: usize, k: usize| s_ta[k][i];
    let pos = |i: usize| (0..n).filter(move |&j| labels[j] == labels[i]);
    let neg = |i: usize| (0..n).filter(move |&j| labels[j] != labels[i]);
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let lse = |xs: Vec<f64>, scale: f64| (1.0 + xs.iter().map(|x| x.exp()).sum::<f64>()).ln() / scale;

    let mut total = 0.0;
    for i in 0..n {
        let c = labels[i];
        let (a, b, l) = (p.alpha[c], p.beta[c], p.lambda[c]);
        let pull_z: Vec<f64> = pos(i).map(|j| a * (l - s_ta[i][j])).collect();
        let push_z: Vec<f64> = neg(i).map(|k| b * (s_at(i, k) - l)).collect();
        total += match kind {
            PhonemeLossKind::Asyp | PhonemeLossKind::AsypAdams => {
                lse(pull_z, a) + mean(push_z.into_iter().map(softplus).collect())
            }
            PhonemeLossKind::ProxyMs => lse(pull_z, a) + lse(push_z, b),
            PhonemeLossKind::ProxyBd => {
                mean(pull_z.into_iter().map(softplus).collect()) + mean(push_z.into_iter().map(softplus).collect())
            }
            PhonemeLossKind::Clat => {
                let logits: Vec<f64> = s_ta[i].iter().map(|s| s / cfg.infonce_tau).collect();
                let norm = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
                -mean(pos(i).map(|j| logits[j] - norm).collect())
            }
            PhonemeLossKind::Triplet | PhonemeLossKind::None => 0.0,
        };
    }
    if kind == PhonemeLossKind::Triplet {
        let mut hinge = Vec::new();
        for i in 0..n {
            for j in pos(i) {
                for k in neg(i) {
                    hinge.push((cfg.triplet_margin + s_ta[i][k] - s_ta[i][j]).max(0.0));
                }
            }
        }
        return mean(hinge);
    }
    total / n as f64
}

pub const PHONEME_KINDS: [PhonemeLossKind; 6] = [
    PhonemeLossKind::Asyp,
    PhonemeLossKind::AsypAdams,
    PhonemeLossKind::ProxyMs,
    PhonemeLossKind::ProxyBd,
    PhonemeLossKind::Clat,
    PhonemeLossKind::Triplet,
];

/// Worst `|lib − oracle| / max(1, |oracle|)` per kind.
pub fn loss_oracle_errors(batches: u64) -> Vec<(PhonemeLossKind, f64)> {
    PHONEME_KINDS
        .iter()
        .map(|&kind| {
            let mut worst = 0.0f64;
            for s in 0..batches {
                let mut r = rng(7000 + s);
                let vocab = r.random_range(2..=6);
                let n = r.random_range(2..=24);
                let d = r.random_range(2..=8);
                let labels = rand_labels(&mut r, n, vocab);
                let audio = rand_mat(&mut r, n, d);
                let text = rand_mat(&mut r, n, d);
                let params = if kind == PhonemeLossKind::AsypAdams {
                    AsyPParams {
                        alpha: (0..vocab).map(|_| r.random_range(0.01..3.0)).collect(),
                        beta: (0..vocab).map(|_| r.random_range(0.1..3.0)).collect(),
                        lambda: (0..vocab).map(|_| r.random_range(-1.0..1.0)).collect(),
                        learnable: true,
                    }
                } else {
                    AsyPParams::fixed(vocab, 0.01, 1.5, 0.01)
                };
                let cfg = DmlConfig::default();
                let fa = FlatEmbeddings {
                    matrix: audio.clone(),
                    labels: labels.clone(),
                };
                let ft = FlatEmbeddings {
                    matrix: text.clone(),
                    labels: labels.clone(),
                };
                let got = match kind {
                    PhonemeLossKind::Asyp | PhonemeLossKind::AsypAdams => dml::asyp_phoneme_loss(&fa, &ft, &params),
                    _ => dml::baseline_phoneme_loss(kind, &fa, &ft, &params, &cfg),
                }
                .unwrap();
                let want = phoneme_loss_oracle(kind, &audio, &text, &labels, &params, &cfg);
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
            (kind, worst)
        })
        .collect()
}

pub fn oracles() -> Outcome {
    timed(5, "oracle equivalence", || {
        let mut c = Checks::default();
        for m in metric_mismatches(METRIC_SETS) {
            c.check(m, false);
        }
        let errs = loss_oracle_errors(LOSS_BATCHES);
        let mut worst = 0.0f64;
        for &(kind, err) in &errs {
            worst = worst.max(err);
            c.check(format!("{} err {err:e}", kind.key()), err <= LOSS_TOL);
        }
        c.finish(format!(
            "AP/EER/AUC exact on {METRIC_SETS} sets; {} phoneme losses x {LOSS_BATCHES} batches, worst {worst:.1e}",
            errs.len()
        ))
    })
}

// ---------------------------------------------------------------------------
// 6: alignment

pub const SHAPES: u64 = 1000;

pub fn alignment() -> Outcome {
    timed(6, "alignment invariants", || {
        let mut c = Checks::default();
        let mut worst_row = 0.0f64;
        let mut worst_perm = 0.0f64;
        for s in 0..SHAPES {
            let mut r = rng(9000 + s);
            let (tt, ta, d) = (r.random_range(1..=12), r.random_range(1..=40), r.random_range(1..=16));
            let amp = r.random_range(0.1..8.0);
            let text = rand_mat(&mut r, tt, d).mapv(|v| v * amp);
            let audio = rand_mat(&mut r, ta, d).mapv(|v| v * amp);
            let res = cross_attend(&text, &audio).unwrap();
            for row in res.affinity.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
            }
            let rho = r.random_range(0.02..0.5);
            let nm = monotonic_matching_loss(&res.affinity, false, rho).unwrap();
            c.check(format!("shape {s}: non-match loss {nm}"), nm == 0.0);
            let target = monotonic_target::<f64>(tt, ta, rho);
            let at_target = monotonic_matching_loss(&target, true, rho).unwrap();
            c.check(format!("shape {s}: loss at target {at_target}"), at_target == 0.0);

            if s % 10 == 0 {
                let mut pt: Vec<usize> = (0..tt).collect();
                let mut pa: Vec<usize> = (0..ta).collect();
                use rand::seq::SliceRandom;
                pt.shuffle(&mut r);
                pa.shuffle(&mut r);
                let permuted = cross_attend(&text.select(Axis(0), &pt), &audio.select(Axis(0), &pa)).unwrap();
                let want_aff = res.affinity.select(Axis(0), &pt).select(Axis(1), &pa);
                let want_agg = res.aggregated.select(Axis(0), &pt);
                let e1 = (&permuted.affinity - &want_aff)
                    .mapv(f64::abs)
                    .fold(0.0, |a: f64, &b| a.max(b));
                let e2 = (&permuted.aggregated - &want_agg)
                    .mapv(f64::abs)
                    .fold(0.0, |a: f64, &b| a.max(b));
                worst_perm = worst_perm.max(e1).max(e2 / amp);
            }
        }
        c.check(format!("row sum off by {worst_row:e}"), worst_row <= 1e-6);
        c.check(format!("permutation mismatch {worst_perm:e}"), worst_perm <= 1e-12);
        c.finish(format!(
            "{SHAPES} shapes: max |row sum - 1| {worst_row:.1e}, L_MM zero cases exact, permutation err {worst_perm:.1e}"
        ))
    })
}

// ---------------------------------------------------------------------------
// 7 and 8: ladder

pub const LADDER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const ALPHA: f64 = 0.05;
pub const PROBE_MARGIN: f64 = 0.10;

/// One-sided paired t-test of `mean(d) > 0`: the statistic and whether it
/// clears the critical value.
pub fn paired_t(d: &[f64]) -> (f64, bool) {
    let n = d.len() as f64;
    let (m, sd) = experiment::mean_std(d);
    let crit = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().inverse_cdf(1.0 - ALPHA);
    if sd == 0.0 {
        return (if m > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }, m > 0.0);
    }
    let t = m / (sd / n.sqrt());
    (t, t > crit)
}

pub struct Ladder {
    pub base: RunConfig,
    pub corpus: Corpus,
    pub spec: LadderSpec,
    pub cells: Vec<LadderCell>,
    pub secs: f64,
}

pub fn run_ladder(base: RunConfig, seeds: Vec<u64>, mut log: impl FnMut(&LadderCell)) -> Ladder {
    let t = Instant::now();
    let corpus = Corpus::generate(&base.data).unwrap();
    let spec = LadderSpec::standard(seeds);
    let (cells, err) = experiment::run_ladder(&base, &spec, &corpus, Some(&ProbeConfig::default()), |c| {
        log(c);
        Ok(())
    });
    if let Some(e) = err {
        panic!("ladder failed: {e}");
    }
    Ladder {
        base,
        corpus,
        spec,
        cells,
        secs: t.elapsed().as_secs_f64(),
    }
}

impl Ladder {
    fn column(&self, rung: usize, f: impl Fn(&LadderCell) -> f64) -> Vec<f64> {
        let name = &self.spec.rungs[rung].name;
        self.spec
            .seeds
            .iter()
            .map(|&s| f(self.cells.iter().find(|c| &c.rung == name && c.seed == s).unwrap()))
            .collect()
    }

    fn ap(&self, rung: usize) -> Vec<f64> {
        self.column(rung, |c| c.result.metrics.ap)
    }

    pub fn table(&self) -> String {
        experiment::format_table(&experiment::summarize(&self.spec, &self.cells))
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mean(xs: &[f64]) -> f64 {
    experiment::mean_std(xs).0
}

pub fn ladder_claims(l: &Ladder) -> [Outcome; 3] {
    let secs = l.secs;
    let out = |name, pass, detail| Outcome {
        id: 7,
        name,
        pass,
        detail,
        secs,
    };

    let (ap1, ap2) = (l.ap(0), l.ap(1));
    let (t, ok) = paired_t(&diff(&ap2, &ap1));
    let a = out(
        "7a phoneme loss improves AP",
        ok,
        format!(
            "mean AP rung1 {:.4} rung2 {:.4}, paired t {t:.2}",
            mean(&ap1),
            mean(&ap2)
        ),
    );

    let ap5 = l.ap(4);
    let mut ok5 = true;
    let mut parts = Vec::new();
    for r in 0..4 {
        let apr = l.ap(r);
        let (t, ok) = paired_t(&diff(&ap5, &apr));
        ok5 &= ok && mean(&ap5) > mean(&apr);
        parts.push(format!("vs rung{} {:.4} t {t:.2}", r + 1, mean(&apr)));
    }
    let b = out(
        "7b full model has the best AP",
        ok5,
        format!("rung5 {:.4}; {}", mean(&ap5), parts.join(", ")),
    );

    let p2 = l.column(1, |c| c.result.probe_accuracy.unwrap());
    let p4 = l.column(3, |c| c.result.probe_accuracy.unwrap());
    let d: Vec<f64> = p2
        .iter()
        .zip(&p4)
        .map(|(x, y)| (x - 0.5).abs() - (y - 0.5).abs() - PROBE_MARGIN)
        .collect();
    let (t, ok) = paired_t(&d);
    let c = out(
        "7c adversarial training hides modality",
        ok,
        format!(
            "probe acc rung2 {:.3} rung4 {:.3}, margin {PROBE_MARGIN}, paired t {t:.2}",
            mean(&p2),
            mean(&p4)
        ),
    );
    [a, b, c]
}

/// Retrains one ladder cell from scratch and compares metrics bit for bit.
pub fn reproducibility(l: &Ladder, rung: usize, seed: u64) -> Outcome {
    timed(8, "reproducibility", || {
        let r = &l.spec.rungs[rung];
        let cell = l.cells.iter().find(|c| c.rung == r.name && c.seed == seed).unwrap();
        let mut cfg = r.apply(&l.base);
        cfg.train.seed = seed;
        let again = experiment::run(&cfg, &l.corpus, None).unwrap();
        let (m0, m1) = (&cell.result.metrics, &again.metrics);
        let same = m0.ap.to_bits() == m1.ap.to_bits()
            && m0.eer.to_bits() == m1.eer.to_bits()
            && m0.auc.to_bits() == m1.auc.to_bits();
        (
            same,
            format!(
                "{} seed {seed}: AP {} / {}, EER {} / {}, AUC {} / {}",
                r.name, m0.ap, m1.ap, m0.eer, m1.eer, m0.auc, m1.auc
            ),
        )
    })
}
