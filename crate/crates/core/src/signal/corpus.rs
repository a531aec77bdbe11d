use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::Waveform;
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng};

/// Lyric vocabularies are limited to this many symbols.
pub const MAX_VOCAB: usize = 32;

/// Root, third and fifth of the low accompaniment.
pub const ACCOMPANIMENT_HZ: [f32; 3] = [110.0, 138.591_3, 164.813_8];

const MELODY_AMP: f32 = 0.5;
const ACCOMPANIMENT_DB: f32 = -12.0;
const ATTACK_S: f32 = 0.01;
const DECAY_S: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_items: usize,
    /// Lyric vocabulary size `V`.
    pub vocab_size: usize,
    /// Symbols per item `M`.
    pub symbols_per_item: usize,
    pub segment_s: f32,
    pub sample_rate: u32,
    /// Noise level relative to the melody; `-inf` disables noise.
    pub noise_db: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_items: 256,
            vocab_size: 16,
            symbols_per_item: 4,
            segment_s: 0.5,
            sample_rate: 16000,
            noise_db: -20.0,
        }
    }
}

impl CorpusConfig {
    pub fn segment_len(&self) -> usize {
        (self.segment_s * self.sample_rate as f32).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return Err(Error::invalid(format!(
                "vocab size must be in 1..={MAX_VOCAB}, got {}",
                self.vocab_size
            )));
        }
        if self.symbols_per_item == 0 {
            return Err(Error::invalid("symbols per item must be positive"));
        }
        if self.sample_rate == 0 || !(self.segment_s > 0.0) || self.segment_len() == 0 {
            return Err(Error::invalid("segment length must be positive"));
        }
        if self.noise_db.is_nan() || self.noise_db == f32::INFINITY {
            return Err(Error::invalid("noise level must be finite or -inf"));
        }
        Ok(())
    }
}

crate::config::config_section!(
    CorpusConfig,
    "corpus",
    [
        n_items,
        vocab_size,
        symbols_per_item,
        segment_s,
        sample_rate,
        noise_db
    ]
);

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: usize,
    /// Symbol indices in `0..vocab_size`.
    pub lyric: Vec<usize>,
    pub duration_s: f32,
    pub seed: u64,
    pub waveform: Waveform,
}

impl CorpusItem {
    pub fn lyric_text(&self) -> String {
        self.lyric
            .iter()
            .map(|&s| symbol_name(s))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Melody pitch of symbol `s`: `220·2^(s/12)` Hz.
pub fn symbol_frequency(s: usize) -> f32 {
    220.0 * 2f32.powf(s as f32 / 12.0)
}

pub fn symbol_name(s: usize) -> String {
    format!("s{s}")
}

/// Parses whitespace-separated symbol names.
pub fn parse_lyric(text: &str, vocab_size: usize) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            w.strip_prefix('s')
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&s| s < vocab_size && symbol_name(s) == w)
                .ok_or_else(|| Error::UnknownSymbol(w.to_string()))
        })
        .collect()
}

/// Deterministic synthetic corpus. Item `id` depends only on `hash(seed, id)`
/// and the config.
pub fn synth_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<CorpusItem>> {
    config.validate()?;
    (0..config.n_items)
        .into_par_iter()
        .map(|id| synth_item(config, seed, id))
        .collect()
}

fn synth_item(config: &CorpusConfig, seed: u64, id: usize) -> Result<CorpusItem> {
    let item_seed = derive_seed(seed, "corpus-item", id as u64);
    let mut r = rng(item_seed);
    let lyric: Vec<usize> = (0..config.symbols_per_item)
        .map(|_| r.gen_range(0..config.vocab_size))
        .collect();
    let sr = config.sample_rate as f32;
    let seg = config.segment_len();
    let n = seg * lyric.len();
    let mut x = vec![0.0f32; n];

    for (i, &s) in lyric.iter().enumerate() {
        let f = symbol_frequency(s);
        let phase: f32 = r.gen_range(0.0..2.0 * PI);
        for j in 0..seg {
            let t = j as f32 / sr;
            let env = (t / ATTACK_S).min(1.0) * (-t / DECAY_S).exp();
            x[i * seg + j] = MELODY_AMP * env * (2.0 * PI * f * t + phase).sin();
        }
    }
    let acc = MELODY_AMP * 10f32.powf(ACCOMPANIMENT_DB / 20.0);
    for (j, v) in x.iter_mut().enumerate() {
        let t = j as f32 / sr;
        *v += acc
            * ACCOMPANIMENT_HZ
                .iter()
                .map(|&f| (2.0 * PI * f * t).sin())
                .sum::<f32>();
    }
    if config.noise_db.is_finite() {
        let std = MELODY_AMP * 10f32.powf(config.noise_db / 20.0);
        for v in x.iter_mut() {
            let e: f32 = StandardNormal.sample(&mut r);
            *v += std * e;
        }
    }
    Ok(CorpusItem {
        id,
        lyric,
        duration_s: n as f32 / sr,
        seed: item_seed,
        waveform: Waveform::new(x, config.sample_rate)?,
    })
}
