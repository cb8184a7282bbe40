//! On-disk formats: shape-tagged little-endian arrays, parameter archives,
//! the corpus manifest, score files, reports and the metrics log.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{data_hash, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{Metrics, Trial, TrialSet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{Corpus, Lexicon, Split, SynthConfig, SynthesisProfile, Utterance};
use crate::trainer::StepMetrics;

const ARRAY_MAGIC: &[u8; 8] = b"ADMLARR1";
const CKPT_MAGIC: &[u8; 8] = b"ADMLCKP1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_matrix<W: Write, T: Scalar>(w: &mut W, a: &Array2<T>) -> Result<()> {
    for &x in a.iter() {
        w.write_all(&x.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read, T: Scalar>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<T>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let vals = buf
        .chunks_exact(8)
        .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Array2::from_shape_vec((rows, cols), vals).map_err(|e| format_err(e.to_string()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes one `rows × cols` array: magic, two `u64` dims, then `f64` values.
pub fn write_array<T: Scalar>(path: &Path, a: &Array2<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ARRAY_MAGIC)?;
    w.write_all(&(a.nrows() as u64).to_le_bytes())?;
    w.write_all(&(a.ncols() as u64).to_le_bytes())?;
    write_matrix(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn read_array<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(format_err(format!("{}: not an array file", path.display())));
    }
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    read_matrix(&mut r, rows, cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub training_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub entries: Vec<CheckpointEntry>,
}

/// Parameter archive: magic, manifest length and JSON manifest, then every
/// array's values in manifest order.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    cfg: &RunConfig,
    epoch: usize,
    step: usize,
) -> Result<()> {
    let manifest = CheckpointManifest {
        config_hash: cfg.hash(),
        training_hash: cfg.training_hash(),
        seed: cfg.train.seed,
        epoch,
        step,
        entries: params
            .iter()
            .map(|(n, a)| CheckpointEntry {
                name: n.clone(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| format_err(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, a) in params.iter() {
        write_matrix(&mut w, a)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, ParamStore<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(format_err(format!("{}: not a checkpoint", path.display())));
    }
    let len = read_u64(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;
    let mut params = ParamStore::new();
    for e in &manifest.entries {
        params.insert(e.name.clone(), read_matrix(&mut r, e.rows, e.cols)?);
    }
    params.check_partition()?;
    Ok((manifest, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordRecord {
    pub id: usize,
    pub phonemes: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub keyword: usize,
    pub take: usize,
    pub frames: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub data_hash: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub keywords: Vec<KeywordRecord>,
    pub utterances: Vec<UtteranceRecord>,
    pub prototypes_file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusManifest> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let mut utterances = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let file = format!("features/kw{:05}_{:02}.f64", u.keyword, u.take);
        write_array(&dir.join(&file), &u.features)?;
        utterances.push(UtteranceRecord {
            keyword: u.keyword,
            take: u.take,
            frames: u.features.nrows(),
            file,
        });
    }
    write_array(&dir.join("prototypes.f64"), &corpus.profile.prototypes)?;
    let manifest = CorpusManifest {
        data_hash: data_hash(&corpus.config),
        seed: corpus.config.seed,
        config: corpus.config.clone(),
        keywords: corpus
            .lexicon
            .sequences
            .iter()
            .zip(&corpus.splits)
            .enumerate()
            .map(|(id, (p, &split))| KeywordRecord {
                id,
                phonemes: p.clone(),
                split,
            })
            .collect(),
        utterances,
        prototypes_file: "prototypes.f64".into(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn read_corpus_manifest(dir: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("corpus manifest: {e}")))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let m = read_corpus_manifest(dir)?;
    for (i, k) in m.keywords.iter().enumerate() {
        if k.id != i {
            return Err(format_err(format!("keyword record {i} carries id {}", k.id)));
        }
    }
    let mut utterances = Vec::with_capacity(m.utterances.len());
    for u in &m.utterances {
        let features: Array2<f64> = read_array(&dir.join(&u.file))?;
        if features.nrows() != u.frames {
            return Err(format_err(format!(
                "{}: {} frames, manifest says {}",
                u.file,
                features.nrows(),
                u.frames
            )));
        }
        utterances.push(Utterance {
            keyword: u.keyword,
            take: u.take,
            features,
        });
    }
    Ok(Corpus {
        lexicon: Lexicon {
            vocab_size: m.config.vocab_size,
            sequences: m.keywords.iter().map(|k| k.phonemes.clone()).collect(),
        },
        splits: m.keywords.iter().map(|k| k.split).collect(),
        profile: SynthesisProfile {
            prototypes: read_array(&dir.join(&m.prototypes_file))?,
            params: m.config.profile_params(),
        },
        config: m.config,
        utterances,
    })
}

/// Tab-separated `trial_id, keyword, label, score`, one trial per line.
pub fn write_scores(path: &Path, trials: &TrialSet) -> Result<()> {
    let scores = trials
        .scores
        .as_ref()
        .ok_or_else(|| format_err("trial set has no scores"))?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "trial_id\tkeyword\tutterance\tlabel\tscore")?;
    for (t, s) in trials.trials.iter().zip(scores) {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{:?}",
            t.id,
            t.keyword,
            t.utterance,
            u8::from(t.label),
            s
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<TrialSet> {
    let r = BufReader::new(File::open(path)?);
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for (ln, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || format_err(format!("{}:{}: malformed score line", path.display(), ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        trials.push(Trial {
            id: num(f[0])?,
            keyword: num(f[1])?,
            utterance: num(f[2])?,
            label: match f[3] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            },
        });
        scores.push(f[4].parse::<f64>().map_err(|_| bad())?);
    }
    Ok(TrialSet {
        trials,
        scores: Some(scores),
        negatives_with_replacement: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics: Metrics,
    pub trials: usize,
    pub neg_ratio: usize,
    pub negatives_with_replacement: bool,
    pub config_hash: String,
    pub checkpoint: String,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Appends one JSON line per epoch record.
pub struct MetricsLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            w: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| format_err(e.to_string()))?;
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format_err(e.to_string())))
        .collect()
}
