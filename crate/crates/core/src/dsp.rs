//! WAV ingestion and the 80-band log-mel front end.
//!
//! 25 ms periodic Hann windows (400 samples) every 10 ms (160 samples), zero-padded to a
//! 512-point FFT, power spectrum, HTK-scale triangular filters with unit peaks, natural log
//! with a 1e-6 floor. Frames start at sample 0 with no centering.

use std::path::Path;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// `frames × 80` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
}

impl MelSpectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] != N_MELS || values.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "mel spectrogram must be n×{N_MELS} with n ≥ 1, got {:?}",
                values.shape()
            )));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", format!("{}: {other}", path.display())),
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "channels",
            format!("expected 1 (mono), found {}", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "bits_per_sample",
            format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    if samples.is_empty() {
        return Err(Error::format("data", "no samples"));
    }
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM. Samples are clipped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over `n_fft/2 + 1` bins, each row scaled so its largest weight is 1.
pub fn mel_filterbank_matrix(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Tensor> {
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::InvalidArgument(format!(
            "need n_mels ≥ 1 and n_fft ≥ 2, got {n_mels}, {n_fft}"
        )));
    }
    if !(f_min >= 0.0 && f_min < f_max) {
        return Err(Error::InvalidArgument(format!(
            "f_min must be below f_max, got {f_min} and {f_max}"
        )));
    }
    let nyquist = f64::from(sample_rate) / 2.0;
    if f_max > nyquist {
        return Err(Error::InvalidArgument(format!(
            "f_max {f_max} exceeds Nyquist {nyquist}"
        )));
    }
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / n_fft as f64;

    let mut data = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut data[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            *w = up.min(down).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mel filter {m} covers no FFT bin; use fewer bands or a larger n_fft"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Tensor::new(vec![n_mels, bins], data)
}

fn default_filterbank() -> &'static Tensor {
    static BANK: OnceLock<Tensor> = OnceLock::new();
    BANK.get_or_init(|| {
        mel_filterbank_matrix(
            N_MELS,
            N_FFT,
            SAMPLE_RATE,
            0.0,
            f64::from(SAMPLE_RATE) / 2.0,
        )
        .expect("default filterbank parameters are valid")
    })
}

/// `1 + floor((N - 400) / 160)` for `N ≥ 400`, otherwise `None`.
pub fn frame_count(num_samples: usize) -> Option<usize> {
    (num_samples >= WIN_LENGTH).then(|| 1 + (num_samples - WIN_LENGTH) / HOP_LENGTH)
}

fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate_hz != SAMPLE_RATE {
        return Err(Error::validation(
            "sample_rate",
            SAMPLE_RATE,
            w.sample_rate_hz,
        ));
    }
    let n = frame_count(w.samples.len()).ok_or_else(|| {
        Error::TooShort(format!(
            "{} samples; at least {WIN_LENGTH} are needed for one frame",
            w.samples.len()
        ))
    })?;
    let bank = default_filterbank();
    let bins = N_FFT / 2 + 1;
    let window = hann_periodic(WIN_LENGTH);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(n * N_MELS);

    for f in 0..n {
        let frame = &w.samples[f * HOP_LENGTH..f * HOP_LENGTH + WIN_LENGTH];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(
                if i < WIN_LENGTH {
                    frame[i] * window[i]
                } else {
                    0.0
                },
                0.0,
            );
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..N_MELS {
            let row = &bank.data()[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    MelSpectrogram::new(Tensor::new(vec![n, N_MELS], out)?)
}
