//! A desk-scale stand-in for a phrase corpus: every keyword "sounds" like its own fixed chord.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::corpus::{write_corpus_manifest, UtteranceRecord};
use crate::dsp::{hz_to_mel, mel_to_hz, write_wav, Waveform, HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

/// Phrases of one to four words, interleaved by length so any prefix of eight covers all lengths.
pub const TOY_WORDS: [&str; 16] = [
    "madame",
    "turn on",
    "open the door",
    "turn off the light",
    "modem",
    "turn off",
    "play some music",
    "turn on the radio",
    "stop",
    "next song",
    "close the window",
    "call my mother now",
    "music",
    "lights on",
    "what time is",
    "set an alarm for six",
];

const GRID_LOW_HZ: f64 = 200.0;
const GRID_HIGH_HZ: f64 = 4000.0;
const SNR_DB: f64 = 25.0;
const FADE_SAMPLES: usize = 160;
/// Shortest utterance: enough samples for 50 analysis frames.
const MIN_SAMPLES: usize = WIN_LENGTH + 49 * HOP_LENGTH;
const MAX_SAMPLES: usize = SAMPLE_RATE as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyKeyword {
    pub text: String,
    pub freqs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub keywords: Vec<ToyKeyword>,
    pub records: Vec<UtteranceRecord>,
}

fn assign_frequencies(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let slots = 3 * TOY_WORDS.len();
    let (lo, hi) = (hz_to_mel(GRID_LOW_HZ), hz_to_mel(GRID_HIGH_HZ));
    let mut grid: Vec<f64> = (0..slots)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (slots - 1) as f64))
        .collect();
    grid.shuffle(rng);
    grid.chunks_exact(3)
        .take(n)
        .map(|c| {
            let mut t = [c[0], c[1], c[2]];
            t.sort_by(f64::total_cmp);
            t
        })
        .collect()
}

fn utterance(freqs: &[f64; 3], rng: &mut ChaCha8Rng) -> Waveform {
    let n = rng.gen_range(MIN_SAMPLES..=MAX_SAMPLES);
    let amp = rng.gen_range(0.2..0.6);
    let tones: Vec<(f64, f64, f64)> = freqs
        .iter()
        .map(|f| {
            let f = f * (1.0 + rng.gen_range(-0.01..0.01));
            let a = amp / 3.0 * rng.gen_range(0.6..1.0);
            (f, a, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let sr = f64::from(SAMPLE_RATE);
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let edge = i.min(n - 1 - i);
            let env = if edge < FADE_SAMPLES {
                0.5 - 0.5 * (PI * edge as f64 / FADE_SAMPLES as f64).cos()
            } else {
                1.0
            };
            env * tones
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum::<f64>()
        })
        .collect();
    let power = samples.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let sigma = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite noise level");
    for s in &mut samples {
        *s += noise.sample(rng);
    }
    Waveform {
        samples,
        sample_rate_hz: SAMPLE_RATE,
    }
}

/// Writes `wav/kKKuUU.wav` files and `manifest.tsv` under `out_dir`.
///
/// Keyword `k` is `TOY_WORDS[k]` with three mel-grid frequencies no other keyword uses. Each
/// utterance lasts 0.515 to 1 s, with random level, ±1% detuning per tone, random phases, short
/// fades and white noise 25 dB below the signal.
pub fn synth_toy_corpus(
    n_keywords: usize,
    utterances_per_keyword: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<ToyCorpus> {
    if n_keywords < 2 || n_keywords > TOY_WORDS.len() {
        return Err(Error::InvalidArgument(format!(
            "toy corpus supports 2 to {} keywords, asked for {n_keywords}",
            TOY_WORDS.len()
        )));
    }
    if utterances_per_keyword == 0 {
        return Err(Error::InvalidArgument(
            "need at least one utterance per keyword".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x746f79]));
    let keywords: Vec<ToyKeyword> = assign_frequencies(n_keywords, &mut rng)
        .into_iter()
        .zip(TOY_WORDS)
        .map(|(freqs, text)| ToyKeyword {
            text: text.to_string(),
            freqs,
        })
        .collect();

    let mut records = Vec::with_capacity(n_keywords * utterances_per_keyword);
    let mut manifest_rows = Vec::with_capacity(records.capacity());
    for (k, kw) in keywords.iter().enumerate() {
        for u in 0..utterances_per_keyword {
            let id = format!("k{k:02}u{u:02}");
            let rel = format!("wav/{id}.wav");
            let mut urng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64, u as u64]));
            write_wav(out_dir.join(&rel), &utterance(&kw.freqs, &mut urng))?;
            records.push(UtteranceRecord::new(
                id.clone(),
                out_dir.join(&rel),
                kw.text.clone(),
            )?);
            manifest_rows.push(UtteranceRecord::new(id, rel, kw.text.clone())?);
        }
    }
    write_corpus_manifest(&manifest_rows, out_dir.join("manifest.tsv"))?;
    Ok(ToyCorpus { keywords, records })
}
