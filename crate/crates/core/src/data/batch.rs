use std::collections::HashMap;

use super::corpus::UtteranceRecord;
use super::episodes::PairExample;
use crate::dsp::{load_wav, log_mel, MelSpectrogram};
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numerics::{prefix_len, Tensor};

/// Log-mel features keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct MelStore {
    by_id: HashMap<String, MelSpectrogram>,
}

impl MelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, mel: MelSpectrogram) {
        self.by_id.insert(id.into(), mel);
    }

    /// Loads and featurizes every record on up to `threads` worker threads. The result does not
    /// depend on the thread count.
    pub fn compute(records: &[UtteranceRecord], threads: usize) -> Result<Self> {
        let featurize = |r: &UtteranceRecord| -> Result<(String, MelSpectrogram)> {
            let mel = log_mel(&load_wav(&r.wav_path)?).map_err(|e| match e {
                Error::TooShort(d) => Error::TooShort(format!("{}: {d}", r.wav_path.display())),
                other => other,
            })?;
            Ok((r.id.clone(), mel))
        };
        let threads = threads.clamp(1, records.len().max(1));
        let results: Vec<Result<(String, MelSpectrogram)>> = if threads == 1 {
            records.iter().map(featurize).collect()
        } else {
            let chunk = records.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = records
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(featurize).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("feature worker panicked"))
                    .collect()
            })
        };
        let mut store = MelStore::new();
        for r in results {
            let (id, mel) = r?;
            store.insert(id, mel);
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Result<&MelSpectrogram> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no features for utterance {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Right-padded features for a group of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch, max_frames, n_mels]`.
    pub mel: Tensor,
    pub mel_masks: Vec<Vec<bool>>,
    /// `[batch, max_rows, width]`.
    pub text: Tensor,
    pub text_masks: Vec<Vec<bool>>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Unpadded `(mel, text)` per sample.
    pub fn unpadded(&self) -> Result<Vec<(Tensor, Tensor)>> {
        (0..self.len())
            .map(|b| {
                let n = prefix_len(&self.mel_masks[b])?;
                let m = prefix_len(&self.text_masks[b])?;
                Ok((
                    crate::model::trim_sample(&self.mel, b, n)?,
                    crate::model::trim_sample(&self.text, b, m)?,
                ))
            })
            .collect()
    }
}

fn pad_block(items: &[&Tensor]) -> (Tensor, Vec<Vec<bool>>) {
    let max = items.iter().map(|t| t.rows()).max().unwrap_or(0);
    let cols = items.first().map_or(0, |t| t.cols());
    let mut data = vec![0.0; items.len() * max * cols];
    let mut masks = Vec::with_capacity(items.len());
    for (b, t) in items.iter().enumerate() {
        data[b * max * cols..][..t.len()].copy_from_slice(t.data());
        let mut m = vec![true; t.rows()];
        m.resize(max, false);
        masks.push(m);
    }
    (
        Tensor::new(vec![items.len(), max, cols], data).expect("padded block shape"),
        masks,
    )
}

/// Groups `pairs` in order into batches of at most `batch_size`, padding to per-batch maxima.
pub fn batch_with_padding(
    pairs: &[PairExample],
    mels: &MelStore,
    embeddings: &EmbeddingStore,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let mut mel_refs = Vec::with_capacity(chunk.len());
            let mut text_refs = Vec::with_capacity(chunk.len());
            for p in chunk {
                mel_refs.push(mels.get(&p.audio_id)?.values());
                text_refs.push(embeddings.get(&p.keyword)?.values());
            }
            let (mel, mel_masks) = pad_block(&mel_refs);
            let (text, text_masks) = pad_block(&text_refs);
            Ok(Batch {
                mel,
                mel_masks,
                text,
                text_masks,
                labels: chunk.iter().map(|p| f64::from(p.label)).collect(),
            })
        })
        .collect()
}
