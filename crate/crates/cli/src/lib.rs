//! The `xmodal-kws` command line: corpus synthesis, embeddings, pairs, training, evaluation and
//! gradient checks.
//!
//! Exit codes: 0 on success, 1 for invalid input values (and usage errors), 2 for unreadable or
//! malformed files.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use xmodal_kws::data::{
    build_episodes_with, partition_utterances, read_corpus_manifest, read_pairs, synth_toy_corpus,
    write_pairs, EpisodeOptions, MelStore, PairExample, UtteranceRecord, DEFAULT_HARD_THRESHOLD,
};
use xmodal_kws::embeddings::{
    read_embedding_header, synth_pseudo_embedding, write_embedding, write_manifest,
    EmbeddingLayerTag, EmbeddingStore, ManifestEntry,
};
use xmodal_kws::gradsuite::gradient_suite;
use xmodal_kws::metrics::{build_report, roc_points, write_roc_csv, ScoredPair};
use xmodal_kws::model::{load_checkpoint, save_checkpoint};
use xmodal_kws::numerics::GradCheckOptions;
use xmodal_kws::train::{score_pairs, train_model_with, TrainConfig};
use xmodal_kws::{Error, Result};

/// Worker-thread cap for feature extraction.
pub const THREADS_ENV: &str = "XMODAL_KWS_THREADS";

// Offsets added to --seed per stage.
const SEED_CORPUS: u64 = 0;
const SEED_EMBEDDINGS: u64 = 1;
const SEED_PAIRS: u64 = 2;
const SEED_TRAIN: u64 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "xmodal-kws",
    version,
    about = "Open-vocabulary keyword spotting from TTS embeddings"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON training config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every stage derives its own from it
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Embedding layer, E1..E7
    #[arg(long, global = true)]
    tag: Option<EmbeddingLayerTag>,
    /// Single-threaded execution
    #[arg(long, global = true)]
    deterministic: bool,
    /// Largest edit distance of a hard negative
    #[arg(long, global = true, default_value_t = DEFAULT_HARD_THRESHOLD)]
    hard_threshold: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic tone corpus and its manifest
    SynthCorpus {
        #[arg(long, default_value_t = 8)]
        keywords: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
    },
    /// Write pseudo embeddings for every keyword of a corpus manifest
    SynthEmbeddings {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Split a corpus and write episode pair files
    Pairs {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated keywords held out of training entirely
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        #[arg(long, default_value_t = 0.15)]
        val_frac: f64,
        #[arg(long, default_value_t = 0.15)]
        test_frac: f64,
        /// Episode passes over the training utterances
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        /// Episode passes over the validation, test and held-out utterances
        #[arg(long, default_value_t = 1)]
        eval_rounds: usize,
    },
    /// Train a model; writes model.ckpt, loss.csv and config.json
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Score a pair file; writes report.json, report.csv and roc.csv
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Finite-difference check of every layer and the full scorer
    Gradcheck,
    /// Print the header of an embedding file
    InspectEmbedding { file: PathBuf },
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io_or_format() {
                2
            } else {
                1
            }
        }
    }
}

fn threads(g: &Global) -> usize {
    if g.deterministic {
        return 1;
    }
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(n) if n > 0 => n.min(available),
        _ => available,
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    let dir = g
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this subcommand".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    Ok(dir)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            let source = std::io::Error::new(std::io::ErrorKind::NotFound, "no such file");
            return Err(io_error(p, source));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn keywords_of(records: &[UtteranceRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.keyword())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn file_stem(i: usize, keyword: &str) -> String {
    let slug: String = keyword
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{i:03}_{slug}")
}

fn run(cli: Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::SynthCorpus {
            keywords,
            utterances,
        } => {
            let dir = out_dir(g)?;
            let corpus = synth_toy_corpus(
                *keywords,
                *utterances,
                g.seed.wrapping_add(SEED_CORPUS),
                dir,
            )?;
            println!(
                "wrote {} utterances of {} keywords to {}",
                corpus.records.len(),
                corpus.keywords.len(),
                dir.join("manifest.tsv").display()
            );
        }
        Command::SynthEmbeddings { manifest } => {
            require_files(&[manifest])?;
            let tag = g.tag.unwrap_or(EmbeddingLayerTag::E3);
            let records = read_corpus_manifest(manifest)?;
            let dir = out_dir(g)?;
            let mut entries = Vec::new();
            for (i, kw) in keywords_of(&records).iter().enumerate() {
                let seq = synth_pseudo_embedding(kw, tag, g.seed.wrapping_add(SEED_EMBEDDINGS))?;
                let rel = PathBuf::from(format!("{}.{tag}.emb", file_stem(i, kw)));
                write_embedding(&seq, dir.join(&rel))?;
                entries.push(ManifestEntry {
                    keyword: kw.clone(),
                    tag,
                    path: rel,
                });
            }
            write_manifest(&entries, dir.join("embeddings.tsv"))?;
            println!(
                "wrote {} {tag} embeddings to {}",
                entries.len(),
                dir.join("embeddings.tsv").display()
            );
        }
        Command::Pairs {
            manifest,
            holdout,
            val_frac,
            test_frac,
            rounds,
            eval_rounds,
        } => {
            require_files(&[manifest])?;
            let records = read_corpus_manifest(manifest)?;
            let dir = out_dir(g)?;
            let seed = g.seed.wrapping_add(SEED_PAIRS);
            let holdout: Vec<String> = holdout
                .iter()
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect();
            let part = partition_utterances(&records, &holdout, *val_frac, *test_frac, seed)?;
            let base = EpisodeOptions {
                hard_threshold: g.hard_threshold,
                rounds: *eval_rounds,
                ..EpisodeOptions::default()
            };
            let train_opts = EpisodeOptions {
                rounds: *rounds,
                ..base.clone()
            };
            let mut outputs = vec![
                ("train_pairs.tsv", &part.train, train_opts, 0u64),
                ("val_pairs.tsv", &part.val, base.clone(), 1),
                ("test_pairs.tsv", &part.test, base.clone(), 2),
            ];
            // held-out anchors draw negatives from the held-out and in-vocabulary test audio
            let oov_pool: Vec<UtteranceRecord> =
                part.oov.iter().chain(&part.test).cloned().collect();
            if !holdout.is_empty() {
                let set: BTreeSet<String> = holdout.iter().cloned().collect();
                let opts = EpisodeOptions {
                    anchors: Some(set.clone()),
                    oov_keywords: set,
                    ..base.clone()
                };
                outputs.push(("oov_pairs.tsv", &oov_pool, opts, 3));
            }
            for (name, recs, opts, k) in outputs {
                let set = build_episodes_with(recs, seed.wrapping_add(100 + k), &opts)?;
                for (kw, why) in &set.skipped {
                    eprintln!("{name}: skipped {kw:?} ({why})");
                }
                let pairs = set.pairs();
                write_pairs(&pairs, dir.join(name))?;
                println!(
                    "{name}: {} episodes, {} pairs",
                    set.episodes.len(),
                    pairs.len()
                );
            }
        }
        Command::Train {
            train,
            val,
            manifest,
            embeddings,
        } => {
            let mut inputs: Vec<&Path> = vec![train, val, manifest, embeddings];
            if let Some(c) = &g.config {
                inputs.push(c);
            }
            require_files(&inputs)?;
            let mut config = match &g.config {
                Some(p) => TrainConfig::read(p)?,
                None => TrainConfig::default(),
            };
            if let Some(tag) = g.tag {
                config.embedding_tag = tag;
            }
            config.rng_seed = g.seed.wrapping_add(SEED_TRAIN);
            config.validate()?;
            let dir = out_dir(g)?;
            let train_pairs = read_pairs(train)?;
            let val_pairs = read_pairs(val)?;
            let records = read_corpus_manifest(manifest)?;
            let mels = MelStore::compute(&records, threads(g))?;
            let store = EmbeddingStore::from_manifest(embeddings, config.embedding_tag)?;
            let outcome =
                train_model_with(&config, &train_pairs, &val_pairs, &mels, &store, &mut |r| {
                    eprintln!(
                        "epoch {:>3}  train {:.4}  val {:.4}  val_auc {:.4}",
                        r.epoch, r.train_loss, r.val_loss, r.val_auc
                    );
                })?;
            save_checkpoint(&outcome.model, dir.join("model.ckpt"))?;
            outcome.log.write(dir.join("loss.csv"))?;
            write_text(&dir.join("config.json"), &config.to_json())?;
            println!(
                "best epoch {} (val AUC {:.4}) saved to {}",
                outcome.best_epoch,
                outcome.best_val_auc,
                dir.join("model.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint,
            pairs,
            manifest,
            embeddings,
        } => {
            require_files(&[checkpoint, pairs, manifest, embeddings])?;
            let model = load_checkpoint(checkpoint)?;
            let tag = model.config().embedding_tag;
            if let Some(t) = g.tag {
                if t != tag {
                    return Err(Error::Validation {
                        field: format!("--tag ({})", checkpoint.display()),
                        expected: tag.to_string(),
                        actual: t.to_string(),
                    });
                }
            }
            let dir = out_dir(g)?;
            let pair_list: Vec<PairExample> = read_pairs(pairs)?;
            let records = read_corpus_manifest(manifest)?;
            let needed: BTreeSet<&str> = pair_list.iter().map(|p| p.audio_id.as_str()).collect();
            let records: Vec<UtteranceRecord> = records
                .into_iter()
                .filter(|r| needed.contains(r.id.as_str()))
                .collect();
            let mels = MelStore::compute(&records, threads(g))?;
            let store = EmbeddingStore::from_manifest(embeddings, tag)?;
            let scores = score_pairs(&model, &pair_list, &mels, &store, 32)?;
            let scored = pair_list
                .iter()
                .zip(&scores)
                .map(|(p, s)| ScoredPair::from_pair(p, *s))
                .collect::<Result<Vec<_>>>()?;
            let report = build_report(&scored)?;
            report.write_json(dir.join("report.json"))?;
            report.write_csv(dir.join("report.csv"))?;
            write_roc_csv(&roc_points(&scored)?, dir.join("roc.csv"))?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck => {
            let tolerance = GradCheckOptions::default().tolerance;
            let mut worst: f64 = 0.0;
            for entry in gradient_suite(g.seed)? {
                let e = entry.report.max_rel_error();
                worst = worst.max(e);
                println!("{:<16} max relative error {e:.3e}", entry.name);
            }
            let ok = worst <= tolerance;
            println!(
                "overall max relative error {worst:.3e} ({})",
                if ok { "pass" } else { "FAIL" }
            );
            return Ok(if ok { 0 } else { 1 });
        }
        Command::InspectEmbedding { file } => {
            let h = read_embedding_header(file)?;
            println!("keyword  {}", h.keyword);
            println!("tag      {} ({})", h.tag, h.tag.description());
            println!("version  {}", h.version);
            println!("rows     {}", h.rows);
            println!("cols     {}", h.cols);
        }
    }
    Ok(0)
}
