use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::derive_seed;

pub const CORPUS_HEADER: &str = "id\twav_path\ttranscript";

/// Whitespace-token count of a transcript.
pub fn word_length(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub wav_path: PathBuf,
    pub transcript: String,
    pub word_length: usize,
}

impl UtteranceRecord {
    pub fn new(
        id: impl Into<String>,
        wav_path: impl Into<PathBuf>,
        transcript: impl Into<String>,
    ) -> Result<Self> {
        let (id, transcript) = (id.into(), transcript.into());
        let word_length = word_length(&transcript);
        if !(1..=4).contains(&word_length) {
            return Err(Error::validation(
                format!("word_length of {id}"),
                "1 to 4",
                word_length,
            ));
        }
        Ok(UtteranceRecord {
            id,
            wav_path: wav_path.into(),
            transcript,
            word_length,
        })
    }

    /// The lowercased transcript, used as the keyword identity.
    pub fn keyword(&self) -> String {
        self.transcript.to_lowercase()
    }
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "{what} {value:?} contains a tab or newline"
        )));
    }
    Ok(())
}

/// Writes the TSV manifest with paths as given (normally relative to the manifest).
pub fn write_corpus_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("{CORPUS_HEADER}\n");
    for r in records {
        check_field(&r.id, "id")?;
        check_field(&r.transcript, "transcript")?;
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            r.id,
            r.wav_path.display(),
            r.transcript
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a corpus manifest. Relative wav paths are resolved against the manifest's directory.
pub fn read_corpus_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CORPUS_HEADER => {}
        _ => {
            return Err(Error::format(
                "header",
                format!(
                    "{}: expected `{}`",
                    path.display(),
                    CORPUS_HEADER.replace('\t', "<TAB>")
                ),
            ))
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                "columns",
                format!(
                    "{} line {}: expected 3, found {}",
                    path.display(),
                    i + 1,
                    cols.len()
                ),
            ));
        }
        if !seen.insert(cols[0].to_string()) {
            return Err(Error::format(
                "id",
                format!(
                    "{} line {}: duplicate id {}",
                    path.display(),
                    i + 1,
                    cols[0]
                ),
            ));
        }
        let wav = PathBuf::from(cols[1]);
        let wav = if wav.is_absolute() {
            wav
        } else {
            base.join(wav)
        };
        let rec = UtteranceRecord::new(cols[0], wav, cols[2]).map_err(|e| match e {
            Error::Validation {
                field,
                expected,
                actual,
            } => Error::Validation {
                field: format!("{field} ({} line {})", path.display(), i + 1),
                expected,
                actual,
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_keyword_list<S: AsRef<str>>(keywords: &[S], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for k in keywords {
        check_field(k.as_ref(), "keyword")?;
        s.push_str(k.as_ref());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One keyword per line; blank lines ignored; keywords lowercased.
pub fn read_keyword_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect())
}

/// Utterance-level train/validation/test split of in-vocabulary keywords plus every utterance
/// of the held-out keywords.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    pub oov: Vec<UtteranceRecord>,
}

/// Splits each in-vocabulary keyword's utterances (seeded shuffle) by `val_frac` and `test_frac`;
/// keywords listed in `oov_keywords` go to `oov` whole.
pub fn partition_utterances(
    records: &[UtteranceRecord],
    oov_keywords: &[String],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<Partition> {
    if !(val_frac >= 0.0 && test_frac >= 0.0 && val_frac + test_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions {val_frac} + {test_frac} must be nonnegative and below 1"
        )));
    }
    let oov: BTreeSet<String> = oov_keywords.iter().map(|k| k.to_lowercase()).collect();
    let mut by_kw: BTreeMap<String, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_kw.entry(r.keyword()).or_default().push(r);
    }
    for k in &oov {
        if !by_kw.contains_key(k) {
            return Err(Error::Lookup(format!(
                "held-out keyword {k:?} has no utterances"
            )));
        }
    }
    let mut p = Partition::default();
    for (i, (kw, mut utts)) in by_kw.into_iter().enumerate() {
        if oov.contains(&kw) {
            p.oov.extend(utts.into_iter().cloned());
            continue;
        }
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        utts.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[i as u64],
        )));
        let n = utts.len();
        let n_val = (n as f64 * val_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        for (j, u) in utts.into_iter().enumerate() {
            let dest = if j < n_train {
                &mut p.train
            } else if j < n_train + n_val {
                &mut p.val
            } else {
                &mut p.test
            };
            dest.push(u.clone());
        }
    }
    Ok(p)
}
