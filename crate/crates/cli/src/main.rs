use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adml::config::RunConfig;
use adml::experiment::{self, LadderCell, LadderSpec, ProbeConfig};
use adml::io::{self, MetricsLog, Report};
use adml::synth::Corpus;
use adml::trainer::Precision;
use adml::{Error, Result, Scalar};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser)]
#[command(
    name = "adml",
    version,
    about = "Text-enrolled keyword spotting with adversarial metric learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a corpus and write it to disk.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split of a corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score eval-split trials with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config stored beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every rung of a ladder for every seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// TOML with `seeds` and `[[rungs]]`; defaults to the standard
        /// five-rung ladder over seeds 1..=5.
        #[arg(long)]
        ladder: Option<PathBuf>,
        /// Existing corpus; generated into `<out>/corpus` when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Runs a single seed instead of the ladder's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the modality probe.
        #[arg(long)]
        no_probe: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn resolve(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::resolve(path, std::env::vars())
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn open_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let manifest = io::read_corpus_manifest(dir)?;
    let expected = cfg.data_hash();
    if manifest.data_hash != expected {
        return Err(Error::Config(format!(
            "corpus {} does not match the config: corpus data hash {}, config data hash {}",
            dir.display(),
            manifest.data_hash,
            expected
        )));
    }
    io::load_corpus(dir)
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let corpus = Corpus::generate(&cfg.data)?;
    prepare_out(out, &cfg)?;
    let m = io::save_corpus(out, &corpus)?;
    log::info!(
        "wrote {} keywords, {} utterances to {} (data hash {})",
        m.keywords.len(),
        m.utterances.len(),
        out.display(),
        m.data_hash
    );
    Ok(())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, out: &Path) -> Result<()> {
    let mut log = MetricsLog::create(&out.join("metrics.jsonl"))?;
    let every = cfg.train.checkpoint_every;
    let state = experiment::train::<T>(cfg, corpus, |state, m| {
        log.append(m)?;
        log::info!(
            "epoch {} lr {:.2e} total {:.4} utt {:.4} phn {:.4} adv {:.4}/{:.4}",
            m.epoch,
            m.lr,
            m.total,
            m.l_utt,
            m.l_phn,
            m.l_adv_phn,
            m.l_adv_utt
        );
        if every > 0 && (state.epoch + 1) % every == 0 && state.epoch + 1 < cfg.train.epochs {
            let p = out.join(format!("checkpoint-epoch{:04}.bin", state.epoch + 1));
            io::save_checkpoint(&p, &state.params, cfg, state.epoch + 1, state.step)?;
        }
        Ok(())
    })?;
    io::save_checkpoint(&out.join(CHECKPOINT_FILE), &state.params, cfg, state.epoch, state.step)?;
    log::info!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn train(config: Option<&Path>, corpus_dir: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let corpus = open_corpus(corpus_dir, &cfg)?;
    prepare_out(out, &cfg)?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &corpus, out),
        Precision::F64 => train_typed::<f64>(&cfg, &corpus, out),
    }
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, corpus: &Corpus, checkpoint: &Path, out: &Path) -> Result<()> {
    let (manifest, params) = io::load_checkpoint::<T>(checkpoint)?;
    if manifest.training_hash != cfg.training_hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different config: checkpoint {}, config {}",
            checkpoint.display(),
            manifest.training_hash,
            cfg.training_hash()
        )));
    }
    let (trials, metrics) = experiment::evaluate(&params, cfg, corpus)?;
    if trials.negatives_with_replacement {
        log::warn!("too few negatives per keyword; negatives drawn with replacement");
    }
    io::write_scores(&out.join("scores.tsv"), &trials)?;
    let report = Report {
        metrics,
        trials: trials.trials.len(),
        neg_ratio: cfg.eval.neg_ratio,
        negatives_with_replacement: trials.negatives_with_replacement,
        config_hash: cfg.hash(),
        checkpoint: checkpoint.display().to_string(),
    };
    io::write_json(&out.join("report.json"), &report)?;
    println!(
        "AP {:.4}  EER {:.4}  AUC {:.4}  ({} positives, {} negatives)",
        metrics.ap, metrics.eer, metrics.auc, metrics.positives, metrics.negatives
    );
    Ok(())
}

fn eval(checkpoint: &Path, corpus_dir: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    let mut cfg = resolve(Some(config.unwrap_or(&beside)))?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let corpus = open_corpus(corpus_dir, &cfg)?;
    prepare_out(out, &cfg)?;
    match cfg.train.precision {
        Precision::F32 => eval_typed::<f32>(&cfg, &corpus, checkpoint, out),
        Precision::F64 => eval_typed::<f64>(&cfg, &corpus, checkpoint, out),
    }
}

fn ablate(
    config: Option<&Path>,
    ladder: Option<&Path>,
    corpus_dir: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    probe: bool,
) -> Result<()> {
    let cfg = resolve(config)?;
    let mut spec = match ladder {
        Some(p) => LadderSpec::from_toml_str(&fs::read_to_string(p)?)?,
        None => LadderSpec::standard((1..=5).collect()),
    };
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    prepare_out(out, &cfg)?;
    fs::write(out.join("ladder.toml"), toml_of(&spec)?)?;
    let corpus = match corpus_dir {
        Some(d) => open_corpus(d, &cfg)?,
        None => {
            let c = Corpus::generate(&cfg.data)?;
            let dir = out.join("corpus");
            fs::create_dir_all(&dir)?;
            io::save_corpus(&dir, &c)?;
            c
        }
    };
    let cells_path = out.join("cells.jsonl");
    let mut cells_text = String::new();
    let probe_cfg = probe.then(ProbeConfig::default);
    let (cells, err) = experiment::run_ladder(&cfg, &spec, &corpus, probe_cfg.as_ref(), |cell: &LadderCell| {
        log::info!(
            "{} seed {}: AP {:.4} EER {:.4} AUC {:.4}",
            cell.rung,
            cell.seed,
            cell.result.metrics.ap,
            cell.result.metrics.eer,
            cell.result.metrics.auc
        );
        cells_text.push_str(&serde_json_line(cell)?);
        fs::write(&cells_path, &cells_text)?;
        Ok(())
    });
    let rows = experiment::summarize(&spec, &cells);
    let table = experiment::format_table(&rows);
    fs::write(out.join("table.txt"), &table)?;
    io::write_json(&out.join("summary.json"), &rows)?;
    print!("{table}");
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn toml_of(spec: &LadderSpec) -> Result<String> {
    toml::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))
}

fn serde_json_line(cell: &LadderCell) -> Result<String> {
    serde_json::to_string(cell)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData { config, out, seed } => gen_data(config.as_deref(), out, *seed),
        Cmd::Train {
            config,
            corpus,
            out,
            seed,
        } => train(config.as_deref(), corpus, out, *seed),
        Cmd::Eval {
            checkpoint,
            corpus,
            out,
            config,
            seed,
        } => eval(checkpoint, corpus, out, config.as_deref(), *seed),
        Cmd::Ablate {
            config,
            ladder,
            corpus,
            out,
            seed,
            no_probe,
        } => ablate(
            config.as_deref(),
            ladder.as_deref(),
            corpus.as_deref(),
            out,
            *seed,
            !no_probe,
        ),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
