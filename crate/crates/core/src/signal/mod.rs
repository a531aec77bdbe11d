//! Waveforms, the synthetic lyric corpus, spectral analysis and metrics.

mod corpus;
mod io;
mod loss;
mod stft;

pub use corpus::{
    parse_lyric, symbol_frequency, symbol_name, synth_corpus, CorpusConfig, CorpusItem,
    ACCOMPANIMENT_HZ, MAX_VOCAB,
};
pub use io::{read_corpus, read_pcm, write_corpus, write_pcm, MANIFEST_FILE};
pub use loss::{multiscale_stft_loss, multiscale_stft_loss_value, stft_scales, STFT_SCALES};
pub use stft::{stft, stft_magnitude, Spectrogram, StftPlan};

use crate::error::{Error, Result};

/// Largest absolute sample value accepted.
pub const HEADROOM: f32 = 4.0;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(v) = samples
            .iter()
            .find(|v| !v.is_finite() || v.abs() > HEADROOM)
        {
            return Err(Error::invalid(format!(
                "sample {v} outside [-{HEADROOM}, {HEADROOM}]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f32 {
        self.samples.len() as f32 / self.sample_rate as f32
    }

    /// Samples `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Waveform> {
        if start + len > self.samples.len() {
            return Err(Error::invalid("segment beyond waveform end"));
        }
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, gain: f32) -> Result<Waveform> {
        Waveform::new(
            self.samples.iter().map(|v| v * gain).collect(),
            self.sample_rate,
        )
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&v| v as f64 * v as f64).sum()
    }
}

/// Signal-to-distortion ratio `10·log10(‖ref‖² / ‖ref − est‖²)` in dB,
/// capped at +100 dB.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f32> {
    sdr_slices(reference.samples(), estimate.samples())
}

pub const SDR_CAP_DB: f32 = 100.0;

pub fn sdr_slices(reference: &[f32], estimate: &[f32]) -> Result<f32> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "sdr length mismatch: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let signal: f64 = reference.iter().map(|&v| v as f64 * v as f64).sum();
    if signal == 0.0 {
        return Err(Error::invalid("sdr reference is all zeros"));
    }
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(&r, &e)| {
            let d = r as f64 - e as f64;
            d * d
        })
        .sum();
    if err == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok(((10.0 * (signal / err).log10()) as f32).min(SDR_CAP_DB))
}
