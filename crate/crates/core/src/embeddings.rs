//! Speech-synthesis intermediate representations (tags E1–E7) used as text-encoder input.
//!
//! On disk each sequence is one little-endian file:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `TTSE` |
//! | 1 | format version, `1` |
//! | 1 | tag, `1..=7` for E1..E7 |
//! | 4 | keyword byte length `k` (u32) |
//! | k | keyword, UTF-8 |
//! | 4 | rows (u32) |
//! | 4 | cols (u32) |
//! | rows·cols·4 | f32 values, row-major |
//!
//! A manifest lists files one per line as `keyword TAB tag TAB relative/path`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Tensor};

pub const MAGIC: &[u8; 4] = b"TTSE";
pub const FORMAT_VERSION: u8 = 1;
/// Decoder-side rows generated per character by [`synth_pseudo_embedding`].
pub const FRAMES_PER_CHAR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbeddingLayerTag {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
}

impl EmbeddingLayerTag {
    pub const ALL: [EmbeddingLayerTag; 7] = [
        Self::E1,
        Self::E2,
        Self::E3,
        Self::E4,
        Self::E5,
        Self::E6,
        Self::E7,
    ];

    pub fn width(self) -> usize {
        match self {
            Self::E7 => 80,
            _ => 512,
        }
    }

    /// E1–E3 have one row per character; E4–E7 one row per synthesized frame.
    pub fn is_char_indexed(self) -> bool {
        matches!(self, Self::E1 | Self::E2 | Self::E3)
    }

    pub fn byte(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(usize::from(b).checked_sub(1)?).copied()
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::E1 => "CharEmbedding block output",
            Self::E2 => "Convolution block output",
            Self::E3 => "Bi-LSTM block output",
            Self::E4 => "Attention block output",
            Self::E5 => "Prenet block output",
            Self::E6 => "Postnet block output",
            Self::E7 => "Target Melspectrogram",
        }
    }
}

impl fmt::Display for EmbeddingLayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.byte())
    }
}

impl FromStr for EmbeddingLayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix(['E', 'e'])
            .and_then(|d| d.parse::<u8>().ok())
            .and_then(Self::from_byte)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown embedding tag {s:?}; expected E1..E7"))
            })
    }
}

/// Characters counted for row alignment: Unicode scalars of the lowercased keyword, spaces included.
pub fn keyword_chars(keyword: &str) -> Vec<char> {
    keyword.to_lowercase().chars().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtsEmbeddingSequence {
    keyword: String,
    tag: EmbeddingLayerTag,
    values: Tensor,
}

impl TtsEmbeddingSequence {
    /// `values` must be `[rows, tag.width()]` with `rows ≥ 1`, and for E1–E3 `rows` must equal
    /// the keyword's character count.
    pub fn new(keyword: impl Into<String>, tag: EmbeddingLayerTag, values: Tensor) -> Result<Self> {
        let keyword = keyword.into();
        if let Some((field, expected, actual)) = check_dims(&keyword, tag, values.shape()) {
            return Err(Error::InvalidArgument(format!(
                "{tag} sequence for {keyword:?}: {field} expected {expected}, found {actual}"
            )));
        }
        Ok(TtsEmbeddingSequence {
            keyword,
            tag,
            values,
        })
    }

    pub fn keyword(&self) -> &str {
        &self.keyword
    }

    pub fn tag(&self) -> EmbeddingLayerTag {
        self.tag
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

fn check_dims(
    keyword: &str,
    tag: EmbeddingLayerTag,
    shape: &[usize],
) -> Option<(&'static str, String, String)> {
    if shape.len() != 2 {
        return Some(("shape", "2 dimensions".into(), format!("{shape:?}")));
    }
    if shape[1] != tag.width() {
        return Some(("cols", tag.width().to_string(), shape[1].to_string()));
    }
    if shape[0] == 0 {
        return Some(("rows", "at least 1".into(), "0".into()));
    }
    let chars = keyword_chars(keyword).len();
    if tag.is_char_indexed() && shape[0] != chars {
        return Some((
            "rows",
            format!("{chars} (character count)"),
            shape[0].to_string(),
        ));
    }
    None
}

pub fn encode_embedding(seq: &TtsEmbeddingSequence) -> Result<Vec<u8>> {
    if let Some((field, expected, actual)) = check_dims(&seq.keyword, seq.tag, seq.values.shape()) {
        return Err(Error::InvalidArgument(format!(
            "{field}: expected {expected}, found {actual}"
        )));
    }
    let kw = seq.keyword.as_bytes();
    let mut out = Vec::with_capacity(18 + kw.len() + seq.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(seq.tag.byte());
    out.extend_from_slice(&(kw.len() as u32).to_le_bytes());
    out.extend_from_slice(kw);
    out.extend_from_slice(&(seq.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.cols() as u32).to_le_bytes());
    for v in seq.values.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_embedding(seq: &TtsEmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embedding(seq)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Header fields of an embedding file, without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u8,
    pub tag: EmbeddingLayerTag,
    pub keyword: String,
    pub rows: usize,
    pub cols: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(field, format!("file ends after {} bytes", self.bytes.len()))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode_header(c: &mut Cursor<'_>) -> Result<EmbeddingHeader> {
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected TTSE"));
    }
    let version = c.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("expected {FORMAT_VERSION}, found {version}"),
        ));
    }
    let tag_byte = c.take(1, "tag")?[0];
    let tag = EmbeddingLayerTag::from_byte(tag_byte)
        .ok_or_else(|| Error::format("tag", format!("expected 1..=7, found {tag_byte}")))?;
    let klen = c.u32("keyword_length")?;
    let keyword = std::str::from_utf8(c.take(klen, "keyword")?)
        .map_err(|e| Error::format("keyword", e.to_string()))?
        .to_string();
    let rows = c.u32("rows")?;
    let cols = c.u32("cols")?;
    Ok(EmbeddingHeader {
        version,
        tag,
        keyword,
        rows,
        cols,
    })
}

pub fn decode_embedding(bytes: &[u8]) -> Result<TtsEmbeddingSequence> {
    let mut c = Cursor { bytes, pos: 0 };
    let h = decode_header(&mut c)?;
    if let Some((field, expected, actual)) = check_dims(&h.keyword, h.tag, &[h.rows, h.cols]) {
        return Err(Error::validation(field, expected, actual));
    }
    let n = h.rows * h.cols;
    let payload = c.take(n * 4, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    TtsEmbeddingSequence::new(h.keyword, h.tag, Tensor::new(vec![h.rows, h.cols], data)?)
}

pub fn read_embedding(path: impl AsRef<Path>) -> Result<TtsEmbeddingSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes).map_err(|e| with_path(e, path))
}

pub fn read_embedding_header(path: impl AsRef<Path>) -> Result<EmbeddingHeader> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&mut Cursor {
        bytes: &bytes,
        pos: 0,
    })
    .map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { field, detail } => Error::Format {
            field,
            detail: format!("{}: {detail}", path.display()),
        },
        Error::Validation {
            field,
            expected,
            actual,
        } => Error::Validation {
            field: format!("{} ({})", field, path.display()),
            expected,
            actual,
        },
        other => other,
    }
}

fn char_row(c: char, tag: EmbeddingLayerTag, seed: u64, width: usize) -> Vec<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::from(tag.byte()), u64::from(c)]));
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    (0..width).map(|_| dist.sample(&mut rng)).collect()
}

/// Deterministic stand-in for real synthesizer activations.
///
/// E1–E3 rows are per-character random vectors keyed on (character, tag, seed), so keywords
/// sharing characters share rows. E4–E7 expand each character into [`FRAMES_PER_CHAR`] rows
/// that glide linearly from that character's vector toward the next one.
pub fn synth_pseudo_embedding(
    keyword: &str,
    tag: EmbeddingLayerTag,
    seed: u64,
) -> Result<TtsEmbeddingSequence> {
    let chars = keyword_chars(keyword);
    if chars.is_empty() {
        return Err(Error::InvalidArgument("empty keyword".into()));
    }
    let width = tag.width();
    let rows: Vec<Vec<f64>> = chars
        .iter()
        .map(|&c| char_row(c, tag, seed, width))
        .collect();
    let data: Vec<f64> = if tag.is_char_indexed() {
        rows.concat()
    } else {
        let mut out = Vec::with_capacity(rows.len() * FRAMES_PER_CHAR * width);
        for (i, cur) in rows.iter().enumerate() {
            let next = rows.get(i + 1).unwrap_or(cur);
            for k in 0..FRAMES_PER_CHAR {
                let a = k as f64 / FRAMES_PER_CHAR as f64;
                out.extend(cur.iter().zip(next).map(|(x, y)| (1.0 - a) * x + a * y));
            }
        }
        out
    };
    let n = data.len() / width;
    TtsEmbeddingSequence::new(keyword, tag, Tensor::new(vec![n, width], data)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub keyword: String,
    pub tag: EmbeddingLayerTag,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for e in entries {
        if e.keyword.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "keyword {:?} contains a tab or newline",
                e.keyword
            )));
        }
        s.push_str(&format!("{}\t{}\t{}\n", e.keyword, e.tag, e.path.display()));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let at = || format!("{} line {}", path.display(), i + 1);
            if cols.len() != 3 {
                return Err(Error::format(
                    "manifest",
                    format!(
                        "{}: expected 3 tab-separated columns, found {}",
                        at(),
                        cols.len()
                    ),
                ));
            }
            let tag = cols[1]
                .parse()
                .map_err(|_| Error::format("tag", format!("{}: {:?}", at(), cols[1])))?;
            Ok(ManifestEntry {
                keyword: cols[0].to_string(),
                tag,
                path: PathBuf::from(cols[2]),
            })
        })
        .collect()
}

/// Sequences of one tag keyed by lowercased keyword.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    tag: Option<EmbeddingLayerTag>,
    by_keyword: BTreeMap<String, TtsEmbeddingSequence>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a sequence; all sequences in a store must share one tag.
    pub fn insert(&mut self, seq: TtsEmbeddingSequence) -> Result<()> {
        match self.tag {
            Some(t) if t != seq.tag => {
                return Err(Error::validation("tag", t, seq.tag));
            }
            _ => self.tag = Some(seq.tag),
        }
        self.by_keyword.insert(seq.keyword.to_lowercase(), seq);
        Ok(())
    }

    /// Loads every manifest entry with the given tag; paths resolve against the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>, tag: EmbeddingLayerTag) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut store = EmbeddingStore::new();
        for entry in read_manifest(path)?.into_iter().filter(|e| e.tag == tag) {
            let seq = read_embedding(base.join(&entry.path))?;
            if seq.keyword.to_lowercase() != entry.keyword.to_lowercase() {
                return Err(Error::validation(
                    format!("keyword ({})", entry.path.display()),
                    &entry.keyword,
                    seq.keyword(),
                ));
            }
            store.insert(seq)?;
        }
        store.tag = Some(tag);
        Ok(store)
    }

    /// Synthesizes pseudo-embeddings for every keyword.
    pub fn synthesize<'a>(
        keywords: impl IntoIterator<Item = &'a str>,
        tag: EmbeddingLayerTag,
        seed: u64,
    ) -> Result<Self> {
        let mut store = EmbeddingStore::new();
        for k in keywords {
            store.insert(synth_pseudo_embedding(k, tag, seed)?)?;
        }
        store.tag = Some(tag);
        Ok(store)
    }

    pub fn tag(&self) -> Option<EmbeddingLayerTag> {
        self.tag
    }

    pub fn get(&self, keyword: &str) -> Result<&TtsEmbeddingSequence> {
        self.by_keyword
            .get(&keyword.to_lowercase())
            .ok_or_else(|| Error::Lookup(format!("no embedding for keyword {keyword:?}")))
    }

    pub fn len(&self) -> usize {
        self.by_keyword.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_keyword.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TtsEmbeddingSequence> {
        self.by_keyword.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_bytes_and_names() {
        for (i, t) in EmbeddingLayerTag::ALL.iter().enumerate() {
            assert_eq!(t.byte() as usize, i + 1);
            assert_eq!(EmbeddingLayerTag::from_byte(t.byte()), Some(*t));
            assert_eq!(t.to_string().parse::<EmbeddingLayerTag>().unwrap(), *t);
        }
        assert_eq!(EmbeddingLayerTag::from_byte(0), None);
        assert_eq!(EmbeddingLayerTag::from_byte(8), None);
        assert!("E8".parse::<EmbeddingLayerTag>().is_err());
        assert_eq!(
            "e3".parse::<EmbeddingLayerTag>().unwrap(),
            EmbeddingLayerTag::E3
        );
    }

    #[test]
    fn header_length_matches_layout() {
        let seq = synth_pseudo_embedding("ab", EmbeddingLayerTag::E7, 1).unwrap();
        let bytes = encode_embedding(&seq).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 4 + 2 + 4 + 4 + 10 * 80 * 4);
        assert_eq!(&bytes[..4], b"TTSE");
        assert_eq!(bytes[5], 7);
    }
}
