//! End-to-end runs: train on the synthetic corpus, score held-out trials,
//! probe the modality gap of the learned embeddings, and the ablation ladder.

use std::collections::btree_map::{BTreeMap, Entry};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, Activation, ModalityClassifierParams};
use crate::autodiff::Graph;
use crate::cls::ClsLossKind;
use crate::config::RunConfig;
use crate::dml::{PhonemeLossKind, UtteranceLossKind};
use crate::error::{structural, Error, Result};
use crate::metrics::{audio_embedding, compute_metrics, score_trials, text_embedding, Metrics, TrialSet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed::substream;
use crate::synth::{generate_trials, Corpus, Split};
use crate::trainer::{fit, init_state, Precision, StepMetrics, TrainSet, TrainState};

/// Trains from scratch on the train split of `corpus`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    corpus: &Corpus,
    on_epoch: impl FnMut(&TrainState<T>, &StepMetrics) -> Result<()>,
) -> Result<TrainState<T>> {
    let set = TrainSet::<T>::from_corpus(corpus)?;
    let mut state = init_state::<T>(&cfg.model, &cfg.losses, set.classes(), cfg.train.seed)?;
    fit(&mut state, &set, &cfg.model, &cfg.losses, &cfg.train, on_epoch)?;
    Ok(state)
}

/// Trials over the eval split: every eval keyword enrolled against every
/// eval utterance.
pub fn eval_trials(cfg: &RunConfig, corpus: &Corpus) -> Result<TrialSet> {
    let enrolled = corpus.keywords(Split::Eval);
    if enrolled.is_empty() {
        return Err(structural!("corpus has no eval split"));
    }
    let segments: Vec<(usize, usize)> = corpus
        .utterance_indices(Split::Eval)
        .into_iter()
        .map(|i| (corpus.utterances[i].keyword, i))
        .collect();
    let mut rng = substream(cfg.eval.seed, "eval/trials");
    generate_trials(&segments, &enrolled, cfg.eval.neg_ratio, &mut rng)
}

pub fn score<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &RunConfig,
    corpus: &Corpus,
    trials: &TrialSet,
) -> Result<TrialSet> {
    score_trials(
        params,
        &cfg.model,
        trials,
        |k| corpus.lexicon.phonemes(k).map(<[usize]>::to_vec),
        |u| {
            corpus
                .utterances
                .get(u)
                .map(|u| u.features.mapv(T::c))
                .ok_or_else(|| structural!("utterance {u} not in corpus"))
        },
    )
}

pub fn evaluate<T: Scalar>(params: &ParamStore<T>, cfg: &RunConfig, corpus: &Corpus) -> Result<(TrialSet, Metrics)> {
    let trials = eval_trials(cfg, corpus)?;
    let scored = score(params, cfg, corpus, &trials)?;
    let m = compute_metrics(scored.scores.as_deref().unwrap_or_default(), &scored.labels())?;
    Ok((scored, m))
}

/// Audio and text utterance embeddings of `split`, one row pair per
/// utterance (the text row is that utterance's keyword).
pub fn split_embeddings<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &RunConfig,
    corpus: &Corpus,
    split: Split,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut audio = Vec::new();
    let mut text = Vec::new();
    let mut text_cache = BTreeMap::new();
    for i in corpus.utterance_indices(split) {
        let u = &corpus.utterances[i];
        audio.push(audio_embedding(params, &cfg.model, &u.features.mapv(T::c))?.mapv(|x| x.to_f64_lossy()));
        if let Entry::Vacant(slot) = text_cache.entry(u.keyword) {
            let e = text_embedding(params, &cfg.model, corpus.lexicon.phonemes(u.keyword)?)?;
            slot.insert(e.mapv(|x| x.to_f64_lossy()));
        }
        text.push(text_cache[&u.keyword].clone());
    }
    let stack = |rows: Vec<Array2<f64>>| -> Result<Array2<f64>> {
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| structural!("{e}"))
    };
    Ok((stack(audio)?, stack(text)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Accuracy of a fresh modality classifier trained (full batch, Adam) on
/// frozen train-split embeddings and tested on the eval split.
pub fn modality_probe(
    train: (&Array2<f64>, &Array2<f64>),
    test: (&Array2<f64>, &Array2<f64>),
    cfg: &ProbeConfig,
) -> Result<f64> {
    let dim = train.0.ncols();
    let mut rng = substream(cfg.seed, "probe/init");
    let init = ModalityClassifierParams::<f64>::random(dim, cfg.hidden, Activation::Relu, &mut rng);
    let mut store = ParamStore::new();
    init.write_to(&mut store);
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (name, w) in store.iter() {
        m.insert(name.clone(), Array2::zeros(w.dim()));
        v.insert(name.clone(), Array2::zeros(w.dim()));
    }
    for t in 1..=cfg.steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let a = g.constant(train.0.clone());
        let x = g.constant(train.1.clone());
        let loss = adversarial::adv_level_var(&mut g, &p, a, x, Activation::Relu)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite { term: "probe".into() });
        }
        g.backward(loss);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let grad = g.grad(p.var(&name)).expect("probe parameter reached").clone();
            let (b1, b2) = (0.9f64, 0.999f64);
            let mm = m.get_mut(&name).expect("moment");
            let vv = v.get_mut(&name).expect("moment");
            let w = store.get_mut(&name).expect("param");
            ndarray::Zip::from(w).and(mm).and(vv).and(&grad).for_each(
                |w: &mut f64, m: &mut f64, v: &mut f64, &gr: &f64| {
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    let mh = *m / (1.0 - b1.powi(t as i32));
                    let vh = *v / (1.0 - b2.powi(t as i32));
                    *w -= cfg.lr * mh / (vh.sqrt() + 1e-8);
                },
            );
        }
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let a = g.constant(test.0.clone());
    let x = g.constant(test.1.clone());
    let la = adversarial::modality_logits(&mut g, &p, a, Activation::Relu);
    let lt = adversarial::modality_logits(&mut g, &p, x, Activation::Relu);
    Ok(adversarial::modality_accuracy(g.value(la).view(), g.value(lt).view()))
}

/// Outcome of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub metrics: Metrics,
    pub probe_accuracy: Option<f64>,
    pub final_epoch: Option<StepMetrics>,
}

fn run_typed<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, probe: Option<&ProbeConfig>) -> Result<RunResult> {
    let mut last = None;
    let state = train::<T>(cfg, corpus, |_, m| {
        last = Some(*m);
        Ok(())
    })?;
    let (_, metrics) = evaluate(&state.params, cfg, corpus)?;
    let probe_accuracy = match probe {
        Some(pc) => {
            let tr = split_embeddings(&state.params, cfg, corpus, Split::Train)?;
            let te = split_embeddings(&state.params, cfg, corpus, Split::Eval)?;
            Some(modality_probe((&tr.0, &tr.1), (&te.0, &te.1), pc)?)
        }
        None => None,
    };
    Ok(RunResult {
        metrics,
        probe_accuracy,
        final_epoch: last,
    })
}

/// Trains and evaluates at the configured precision.
pub fn run(cfg: &RunConfig, corpus: &Corpus, probe: Option<&ProbeConfig>) -> Result<RunResult> {
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, corpus, probe),
        Precision::F64 => run_typed::<f64>(cfg, corpus, probe),
    }
}

/// One ladder rung: a name and the loss selection it trains with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub name: String,
    pub phoneme: PhonemeLossKind,
    pub utterance: UtteranceLossKind,
    pub classifier: ClsLossKind,
    pub adv_phn: bool,
    pub adv_utt: bool,
}

impl Rung {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.losses.phoneme = self.phoneme;
        cfg.losses.utterance = self.utterance;
        cfg.losses.cls.kind = self.classifier;
        cfg.losses.adv.enabled_phn = self.adv_phn;
        cfg.losses.adv.enabled_utt = self.adv_utt;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    pub seeds: Vec<u64>,
    pub rungs: Vec<Rung>,
}

impl LadderSpec {
    /// Utterance-level RP only; then phoneme AsyP with AdaMS; then
    /// phoneme-level MAL; then utterance-level MAL; then SphereFace2.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let rung = |name: &str, phoneme, classifier, adv_phn, adv_utt| Rung {
            name: name.into(),
            phoneme,
            utterance: UtteranceLossKind::Rp,
            classifier,
            adv_phn,
            adv_utt,
        };
        use ClsLossKind::{None as NoHead, Sphereface2};
        use PhonemeLossKind::{AsypAdams, None as NoPhn};
        Self {
            seeds,
            rungs: vec![
                rung("utt-rp", NoPhn, NoHead, false, false),
                rung("+phn-asyp-adams", AsypAdams, NoHead, false, false),
                rung("+phn-mal", AsypAdams, NoHead, true, false),
                rung("+utt-mal", AsypAdams, NoHead, true, true),
                rung("+sphereface2", AsypAdams, Sphereface2, true, true),
            ],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderCell {
    pub rung: String,
    pub seed: u64,
    pub result: RunResult,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub rung: String,
    pub runs: usize,
    pub ap: (f64, f64),
    pub eer: (f64, f64),
    pub auc: (f64, f64),
    pub probe: Option<(f64, f64)>,
}

pub fn summarize(spec: &LadderSpec, cells: &[LadderCell]) -> Vec<LadderRow> {
    spec.rungs
        .iter()
        .map(|r| {
            let mine: Vec<&LadderCell> = cells.iter().filter(|c| c.rung == r.name).collect();
            let col = |f: fn(&Metrics) -> f64| mean_std(&mine.iter().map(|c| f(&c.result.metrics)).collect::<Vec<_>>());
            let probes: Vec<f64> = mine.iter().filter_map(|c| c.result.probe_accuracy).collect();
            LadderRow {
                rung: r.name.clone(),
                runs: mine.len(),
                ap: col(|m| m.ap),
                eer: col(|m| m.eer),
                auc: col(|m| m.auc),
                probe: (!probes.is_empty()).then(|| mean_std(&probes)),
            }
        })
        .collect()
}

pub fn format_table(rows: &[LadderRow]) -> String {
    let mut out = String::from("rung                 runs  AP               EER              AUC              probe\n");
    let pm = |(m, s): (f64, f64)| format!("{:.4} ± {:.4}", m, s);
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>4}  {:<16} {:<16} {:<16} {}\n",
            r.rung,
            r.runs,
            pm(r.ap),
            pm(r.eer),
            pm(r.auc),
            r.probe.map(pm).unwrap_or_else(|| "-".into())
        ));
    }
    out
}

/// Trains every rung for every seed on one shared corpus. `on_cell` sees
/// each finished cell (for incremental persistence); the first failure
/// stops the ladder and is returned alongside the cells finished so far.
pub fn run_ladder(
    base: &RunConfig,
    spec: &LadderSpec,
    corpus: &Corpus,
    probe: Option<&ProbeConfig>,
    mut on_cell: impl FnMut(&LadderCell) -> Result<()>,
) -> (Vec<LadderCell>, Option<Error>) {
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for rung in &spec.rungs {
            let mut cfg = rung.apply(base);
            cfg.train.seed = seed;
            let pc = probe.map(|p| ProbeConfig { seed, ..*p });
            match run(&cfg, corpus, pc.as_ref()) {
                Ok(result) => {
                    let cell = LadderCell {
                        rung: rung.name.clone(),
                        seed,
                        result,
                    };
                    if let Err(e) = on_cell(&cell) {
                        return (cells, Some(e));
                    }
                    cells.push(cell);
                }
                Err(e) => return (cells, Some(e)),
            }
        }
    }
    (cells, None)
}
