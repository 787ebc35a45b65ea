use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{word_length, UtteranceRecord};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

/// Largest edit distance at which a negative counts as hard.
pub const DEFAULT_HARD_THRESHOLD: usize = 3;
/// Fewest distinct keywords episode construction accepts.
pub const MIN_KEYWORDS: usize = 4;
pub const PAIR_HEADER: &str = "audio_id\tkeyword\tlabel\tdifficulty\tword_length\toov";

/// Unit-cost edit distance over the characters of the lowercased inputs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.to_lowercase().chars().collect();
    let b: Vec<char> = b.to_lowercase().chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Positive,
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Positive => "positive",
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Difficulty::Positive),
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::format(
                "difficulty",
                format!("{s:?} is not positive, easy or hard"),
            )),
        }
    }
}

/// One audio-text pair. `word_length` is that of the keyword text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub audio_id: String,
    pub keyword: String,
    pub label: u8,
    pub difficulty: Difficulty,
    pub word_length: usize,
    pub oov: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub anchor: String,
    pub positives: [PairExample; 3],
    pub negatives: [PairExample; 3],
}

impl Episode {
    pub fn pairs(&self) -> impl Iterator<Item = &PairExample> {
        self.positives.iter().chain(&self.negatives)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub hard_threshold: usize,
    /// Passes over each anchor's utterances; each pass reshuffles and draws fresh negatives.
    pub rounds: usize,
    /// Restrict anchors to these keywords; all records still serve as negatives.
    pub anchors: Option<BTreeSet<String>>,
    /// Anchors whose pairs are flagged out-of-vocabulary.
    pub oov_keywords: BTreeSet<String>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            hard_threshold: DEFAULT_HARD_THRESHOLD,
            rounds: 1,
            anchors: None,
            oov_keywords: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpisodeSet {
    pub episodes: Vec<Episode>,
    /// Keywords that could not anchor an episode, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EpisodeSet {
    pub fn pairs(&self) -> Vec<PairExample> {
        self.episodes
            .iter()
            .flat_map(|e| e.pairs().cloned())
            .collect()
    }
}

/// Episodes with default options: every keyword with at least three utterances anchors
/// `floor(k / 3)` episodes.
pub fn build_episodes(
    records: &[UtteranceRecord],
    seed: u64,
    hard_threshold: usize,
) -> Result<EpisodeSet> {
    build_episodes_with(
        records,
        seed,
        &EpisodeOptions {
            hard_threshold,
            ..EpisodeOptions::default()
        },
    )
}

pub fn build_episodes_with(
    records: &[UtteranceRecord],
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<EpisodeSet> {
    let mut by_kw: BTreeMap<String, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_kw.entry(r.keyword()).or_default().push(r);
    }
    if by_kw.len() < MIN_KEYWORDS {
        return Err(Error::InvalidArgument(format!(
            "episodes need at least {MIN_KEYWORDS} distinct keywords, found {}",
            by_kw.len()
        )));
    }
    for utts in by_kw.values_mut() {
        utts.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let oov: BTreeSet<String> = opts.oov_keywords.iter().map(|k| k.to_lowercase()).collect();
    let wanted: Option<BTreeSet<String>> = opts
        .anchors
        .as_ref()
        .map(|a| a.iter().map(|k| k.to_lowercase()).collect());

    let mut set = EpisodeSet::default();
    let mut anchors = Vec::new();
    for (kw, utts) in &by_kw {
        if wanted.as_ref().is_some_and(|w| !w.contains(kw)) {
            continue;
        }
        if utts.len() < 3 {
            set.skipped
                .push((kw.clone(), format!("only {} utterances", utts.len())));
            continue;
        }
        let pool: Vec<(&UtteranceRecord, usize)> = by_kw
            .iter()
            .filter(|(other, _)| *other != kw)
            .map(|(other, us)| (levenshtein(kw, other), us))
            .filter(|(d, _)| *d > 0)
            .flat_map(|(d, us)| us.iter().map(move |u| (*u, d)))
            .collect();
        if pool.len() < 3 {
            set.skipped.push((
                kw.clone(),
                format!("only {} negative utterances", pool.len()),
            ));
            continue;
        }
        anchors.push((kw, utts, pool));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6570]));
    for _ in 0..opts.rounds.max(1) {
        for (kw, utts, pool) in &anchors {
            let wl = word_length(kw);
            let is_oov = oov.contains(*kw);
            let pair = |u: &UtteranceRecord, difficulty: Difficulty| PairExample {
                audio_id: u.id.clone(),
                keyword: (*kw).clone(),
                label: u8::from(difficulty == Difficulty::Positive),
                difficulty,
                word_length: wl,
                oov: is_oov,
            };
            let mut order: Vec<&UtteranceRecord> = utts.to_vec();
            order.shuffle(&mut rng);
            for chunk in order.chunks_exact(3) {
                let picks = sample(&mut rng, pool.len(), 3);
                let neg = |i: usize| {
                    let (u, d) = pool[picks.index(i)];
                    let diff = if d <= opts.hard_threshold {
                        Difficulty::Hard
                    } else {
                        Difficulty::Easy
                    };
                    pair(u, diff)
                };
                set.episodes.push(Episode {
                    anchor: (*kw).clone(),
                    positives: [
                        pair(chunk[0], Difficulty::Positive),
                        pair(chunk[1], Difficulty::Positive),
                        pair(chunk[2], Difficulty::Positive),
                    ],
                    negatives: [neg(0), neg(1), neg(2)],
                });
            }
        }
    }
    Ok(set)
}

pub fn write_pairs(pairs: &[PairExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("{PAIR_HEADER}\n");
    for p in pairs {
        if p.audio_id.contains(['\t', '\n']) || p.keyword.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "pair {:?}/{:?} contains a tab or newline",
                p.audio_id, p.keyword
            )));
        }
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.audio_id,
            p.keyword,
            p.label,
            p.difficulty,
            p.word_length,
            u8::from(p.oov)
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == PAIR_HEADER => {}
        _ => {
            return Err(Error::format(
                "header",
                format!(
                    "{}: expected `{}`",
                    path.display(),
                    PAIR_HEADER.replace('\t', "<TAB>")
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{} line {}", path.display(), i + 1);
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 6 {
            return Err(Error::format(
                "columns",
                format!("{at}: expected 6, found {}", c.len()),
            ));
        }
        let label = match c[2] {
            "0" => 0,
            "1" => 1,
            v => return Err(Error::format("label", format!("{at}: {v:?} is not 0 or 1"))),
        };
        let difficulty: Difficulty = c[3]
            .parse()
            .map_err(|_| Error::format("difficulty", format!("{at}: {:?}", c[3])))?;
        let wl: usize = c[4]
            .parse()
            .map_err(|_| Error::format("word_length", format!("{at}: {:?}", c[4])))?;
        let oov = match c[5] {
            "0" => false,
            "1" => true,
            v => return Err(Error::format("oov", format!("{at}: {v:?} is not 0 or 1"))),
        };
        if (label == 1) != (difficulty == Difficulty::Positive) {
            return Err(Error::validation(
                format!("difficulty ({at})"),
                if label == 1 {
                    "positive"
                } else {
                    "easy or hard"
                },
                difficulty,
            ));
        }
        if !(1..=4).contains(&wl) {
            return Err(Error::validation(
                format!("word_length ({at})"),
                "1 to 4",
                wl,
            ));
        }
        out.push(PairExample {
            audio_id: c[0].to_string(),
            keyword: c[1].to_string(),
            label,
            difficulty,
            word_length: wl,
            oov,
        });
    }
    Ok(out)
}
