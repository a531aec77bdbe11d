//! Convolutional codec around the residual quantizer.
//!
//! The encoder is a stack of strided 1-D convolutions (kernel `2f`, stride
//! `f`) so a clip of `τ·hop` samples maps to exactly `τ` latent frames; the
//! decoder mirrors it with transposed convolutions at a wider channel count.

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{config_section, Section};
use crate::error::{Error, Result};
use crate::numerics::{
    AdamWConfig, Bound, Graph, LrSchedule, OptimState, Params, Tensor, Unary, Var,
};
use crate::rvq::{
    self, decode_tensor, ema_update, encode_rows, init_codebooks, reinit_dead_codes, Codebook,
    LatentSequence, RvqConfig, TokenHierarchy,
};
use crate::signal::{multiscale_stft_loss, sdr, CorpusItem, Waveform};
use crate::util::{derive_seed, is_holdout, rng};

const LEAK: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Quantizer depth `N`.
    pub depth: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// Downsampling factors; their product is the hop.
    pub factors: Vec<usize>,
    /// Encoder widths: input convolution, then one per downsampling stage.
    pub enc_channels: Vec<usize>,
    /// Decoder widths are the reversed encoder widths times this.
    pub dec_width_mult: usize,
    pub lambda_wav: f32,
    pub lambda_stft: f32,
    pub beta: f32,
    pub ema_decay: f32,
    pub usage_threshold: f32,
    pub usage_window: f32,
    pub kmeans_iters: usize,
    /// Probability that a training step decodes a random prefix of the layers.
    pub quantizer_dropout: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            depth: 16,
            codebook_size: 256,
            latent_dim: 64,
            factors: vec![8, 8, 8],
            enc_channels: vec![16, 32, 64, 64],
            dec_width_mult: 2,
            lambda_wav: 1.0,
            lambda_stft: 0.005,
            beta: 0.25,
            ema_decay: 0.99,
            usage_threshold: 2.0,
            usage_window: 100.0,
            kmeans_iters: 10,
            quantizer_dropout: 0.5,
        }
    }
}

config_section!(
    CodecConfig,
    "codec",
    [
        sample_rate,
        depth,
        codebook_size,
        latent_dim,
        factors,
        enc_channels,
        dec_width_mult,
        lambda_wav,
        lambda_stft,
        beta,
        ema_decay,
        usage_threshold,
        usage_window,
        kmeans_iters,
        quantizer_dropout,
    ]
);

impl CodecConfig {
    pub fn hop(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn frame_rate(&self) -> f32 {
        self.sample_rate as f32 / self.hop() as f32
    }

    pub fn rvq(&self) -> RvqConfig {
        RvqConfig {
            depth: self.depth,
            codebook_size: self.codebook_size,
            dim: self.latent_dim,
            gamma: self.ema_decay,
            usage_threshold: self.usage_threshold,
            usage_window: self.usage_window,
            kmeans_iters: self.kmeans_iters,
        }
    }

    fn dec_channels(&self) -> Vec<usize> {
        self.enc_channels
            .iter()
            .rev()
            .map(|c| c * self.dec_width_mult)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("codec.depth must be at least 2".into()));
        }
        if self.factors.is_empty() || self.factors.iter().any(|&f| f < 2 || f % 2 != 0) {
            return Err(Error::Config(
                "codec.factors must be even and at least 2".into(),
            ));
        }
        if self.enc_channels.len() != self.factors.len() + 1 || self.enc_channels.contains(&0) {
            return Err(Error::Config(
                "codec.enc_channels needs one positive width per factor plus one".into(),
            ));
        }
        if self.dec_width_mult == 0 || self.sample_rate == 0 {
            return Err(Error::Config(
                "codec widths and sample rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.quantizer_dropout) {
            return Err(Error::Config(
                "codec.quantizer_dropout must be a probability".into(),
            ));
        }
        self.rvq().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Training crop length in samples, a multiple of the hop.
    pub crop_len: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub holdout_fraction: f32,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            crop_len: 8192,
            lr: 3e-3,
            warmup: 100,
            weight_decay: 0.0,
            holdout_fraction: 0.1,
            log_every: 50,
        }
    }
}

config_section!(
    CodecTrainConfig,
    "codec_train",
    [
        steps,
        batch,
        crop_len,
        lr,
        warmup,
        weight_decay,
        holdout_fraction,
        log_every
    ]
);

/// Trained (or freshly initialised) codec: network weights plus codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: Params,
    pub codebooks: Vec<Codebook>,
    pub step: usize,
}

fn he(dims: &[usize], fan_in: usize, r: &mut crate::util::Rng) -> Tensor {
    Tensor::randn(dims, (2.0 / (1.0 + LEAK * LEAK) / fan_in as f32).sqrt(), r)
}

impl Codec {
    /// Random weights; codebooks are placeholders until the first batch
    /// initialises them.
    pub fn init(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(derive_seed(seed, "codec-init", 0));
        let mut p = Params::new();
        let enc = &config.enc_channels;
        p.insert("enc.in.w", he(&[enc[0], 1, 7], 7, &mut r));
        p.insert("enc.in.b", Tensor::zeros(&[enc[0]]));
        for (i, &f) in config.factors.iter().enumerate() {
            p.insert(
                format!("enc.down{i}.w"),
                he(&[enc[i + 1], enc[i], 2 * f], enc[i] * 2 * f, &mut r),
            );
            p.insert(format!("enc.down{i}.b"), Tensor::zeros(&[enc[i + 1]]));
        }
        let last = *enc.last().expect("validated");
        p.insert(
            "enc.out.w",
            Tensor::randn(
                &[config.latent_dim, last, 1],
                (1.0 / last as f32).sqrt(),
                &mut r,
            ),
        );
        p.insert("enc.out.b", Tensor::zeros(&[config.latent_dim]));

        let dec = config.dec_channels();
        p.insert(
            "dec.in.w",
            he(&[dec[0], config.latent_dim, 1], config.latent_dim, &mut r),
        );
        p.insert("dec.in.b", Tensor::zeros(&[dec[0]]));
        for (i, &f) in config.factors.iter().rev().enumerate() {
            // each output sample of a stride-f transposed conv sees 2 taps per input channel
            p.insert(
                format!("dec.up{i}.w"),
                he(&[dec[i], dec[i + 1], 2 * f], dec[i] * 2, &mut r),
            );
            p.insert(format!("dec.up{i}.b"), Tensor::zeros(&[dec[i + 1]]));
        }
        let last = *dec.last().expect("validated");
        p.insert(
            "dec.out.w",
            Tensor::randn(&[1, last, 7], (1.0 / (7 * last) as f32).sqrt(), &mut r),
        );
        p.insert("dec.out.b", Tensor::zeros(&[1]));

        let codebooks = (0..config.depth)
            .map(|n| {
                Codebook::new(
                    n,
                    Tensor::randn(&[config.codebook_size, config.latent_dim], 1.0, &mut r),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params: p,
            codebooks,
            step: 0,
        })
    }

    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    pub fn frame_rate(&self) -> f32 {
        self.config.frame_rate()
    }

    /// `x [B, 1, L]` → latents `[B, D, L/hop]`.
    pub fn encoder(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = g.conv1d(x, p.get("enc.in.w")?, Some(p.get("enc.in.b")?), 1, 3)?;
        h = g.unary(h, Unary::LeakyRelu(LEAK))?;
        for (i, &f) in self.config.factors.iter().enumerate() {
            h = g.conv1d(
                h,
                p.get(&format!("enc.down{i}.w"))?,
                Some(p.get(&format!("enc.down{i}.b"))?),
                f,
                f / 2,
            )?;
            h = g.unary(h, Unary::LeakyRelu(LEAK))?;
        }
        g.conv1d(h, p.get("enc.out.w")?, Some(p.get("enc.out.b")?), 1, 0)
    }

    /// Latents `[B, D, τ]` → `[B, 1, τ·hop]`.
    pub fn decoder(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let mut h = g.conv1d(z, p.get("dec.in.w")?, Some(p.get("dec.in.b")?), 1, 0)?;
        h = g.unary(h, Unary::LeakyRelu(LEAK))?;
        for (i, &f) in self.config.factors.iter().rev().enumerate() {
            let (w, b) = (
                p.get(&format!("dec.up{i}.w"))?,
                p.get(&format!("dec.up{i}.b"))?,
            );
            h = g.conv_transpose1d(h, w, Some(b), f, f / 2)?;
            h = g.unary(h, Unary::LeakyRelu(LEAK))?;
        }
        g.conv1d(h, p.get("dec.out.w")?, Some(p.get("dec.out.b")?), 1, 3)
    }

    /// `τ = floor(len / hop)` latent frames of `w`.
    pub fn encode_frames(&self, w: &Waveform) -> Result<LatentSequence> {
        let hop = self.hop();
        let tau = w.len() / hop;
        if tau == 0 {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one hop ({hop})",
                w.len()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let x = g.input(Tensor::new(
            vec![1, 1, tau * hop],
            w.samples()[..tau * hop].to_vec(),
        )?)?;
        let z = self.encoder(&mut g, &p, x)?;
        let z = g.value(z);
        let d = self.config.latent_dim;
        // [1, D, τ] → [τ, D]
        let mut v = vec![0.0f32; tau * d];
        for c in 0..d {
            for t in 0..tau {
                v[t * d + c] = z.data()[c * tau + t];
            }
        }
        LatentSequence::new(Tensor::new(vec![tau, d], v)?, self.frame_rate())
    }

    /// Waveform of `τ·hop` samples from latents `[τ, D]`, clamped to the
    /// waveform headroom.
    pub fn decode_frames(&self, z: &LatentSequence) -> Result<Waveform> {
        let d = self.config.latent_dim;
        if z.dim() != d {
            return Err(Error::shape(
                "decode_frames",
                format!("latent dim {} vs codec {d}", z.dim()),
            ));
        }
        let tau = z.len();
        let mut v = vec![0.0f32; tau * d];
        for t in 0..tau {
            for c in 0..d {
                v[c * tau + t] = z.vectors.data()[t * d + c];
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let zi = g.input(Tensor::new(vec![1, d, tau], v)?)?;
        let y = self.decoder(&mut g, &p, zi)?;
        let out = g
            .value(y)
            .data()
            .iter()
            .map(|v| v.clamp(-crate::signal::HEADROOM, crate::signal::HEADROOM))
            .collect();
        Waveform::new(out, self.config.sample_rate)
    }

    /// Full-depth token hierarchy of `w`.
    pub fn tokenize(&self, w: &Waveform) -> Result<TokenHierarchy> {
        let z = self.encode_frames(w)?;
        Ok(rvq::encode(&z, &self.codebooks, self.config.depth)?.0)
    }

    /// Decodes the first `up_to` layers of `h` to audio.
    pub fn render(&self, h: &TokenHierarchy, up_to: usize) -> Result<Waveform> {
        if up_to == 0 || up_to > h.depth() {
            return Err(Error::invalid(format!(
                "cannot render {up_to} of {} layers",
                h.depth()
            )));
        }
        let z = decode_tensor(h, &self.codebooks, up_to)?;
        self.decode_frames(&LatentSequence::new(z, self.frame_rate())?)
    }

    /// Encode, quantize with `up_to` layers, decode.
    pub fn round_trip(&self, w: &Waveform, up_to: usize) -> Result<Waveform> {
        let h = self.tokenize(w)?;
        self.render(&h, up_to)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.canonical());
        ck.meta.insert("kind".into(), "codec".into());
        ck.meta.insert("step".into(), self.step.to_string());
        for (name, t) in self.params.iter() {
            ck.tensors.insert(name.clone(), t.clone());
        }
        for cb in &self.codebooks {
            let n = cb.layer;
            ck.tensors
                .insert(format!("rvq.{n}.codewords"), cb.codewords.clone());
            ck.tensors.insert(
                format!("rvq.{n}.ema_counts"),
                Tensor::from_vec(cb.ema_counts.clone()),
            );
            ck.tensors
                .insert(format!("rvq.{n}.ema_sums"), cb.ema_sums.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "codec" {
            return Err(Error::Checkpoint(format!(
                "expected a codec checkpoint, got {}",
                ck.meta("kind")?
            )));
        }
        let config = CodecConfig::from_text(&ck.config_text)?;
        let mut codec = Codec::init(&config, 0)?;
        for (name, t) in codec.params.clone().iter() {
            let stored = ck.tensor(name)?;
            if stored.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs {:?}",
                    stored.dims(),
                    t.dims()
                )));
            }
            codec.params.insert(name.clone(), stored.clone());
        }
        for cb in codec.codebooks.iter_mut() {
            let n = cb.layer;
            cb.codewords = ck.tensor(&format!("rvq.{n}.codewords"))?.clone();
            cb.ema_counts = ck.tensor(&format!("rvq.{n}.ema_counts"))?.data().to_vec();
            cb.ema_sums = ck.tensor(&format!("rvq.{n}.ema_sums"))?.clone();
            if cb.codewords.dims() != [config.codebook_size, config.latent_dim]
                || cb.ema_counts.len() != config.codebook_size
            {
                return Err(Error::Checkpoint(format!(
                    "codebook {n} has the wrong shape"
                )));
            }
        }
        codec.step = ck
            .meta("step")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad step".into()))?;
        Ok(codec)
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.config.digest())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecStep {
    pub step: usize,
    pub loss: f32,
    pub wav_l1: f32,
    pub stft: f32,
    pub commit: f32,
}

#[derive(Clone, Debug, Default)]
pub struct CodecLog {
    pub steps: Vec<CodecStep>,
    /// Per-layer fraction of live codes at the end of training.
    pub usage: Vec<f32>,
}

fn crops(
    items: &[&CorpusItem],
    batch: usize,
    len: usize,
    r: &mut crate::util::Rng,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let it = items[r.gen_range(0..items.len())];
        let n = it.waveform.len();
        if n < len {
            return Err(Error::invalid(format!(
                "item {} shorter than the training crop",
                it.id
            )));
        }
        let start = r.gen_range(0..=n - len);
        data.extend_from_slice(&it.waveform.samples()[start..start + len]);
    }
    Tensor::new(vec![batch, 1, len], data)
}

/// `[B, D, τ]` → rows `[B·τ, D]`.
fn to_rows(z: &Tensor) -> Result<Tensor> {
    let (b, d, t) = (z.dims()[0], z.dims()[1], z.dims()[2]);
    let mut v = vec![0.0f32; b * d * t];
    for i in 0..b {
        for c in 0..d {
            for s in 0..t {
                v[(i * t + s) * d + c] = z.data()[(i * d + c) * t + s];
            }
        }
    }
    Tensor::new(vec![b * t, d], v)
}

fn from_rows(rows: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    let d = rows.dims()[1];
    let mut v = vec![0.0f32; b * d * t];
    for i in 0..b {
        for c in 0..d {
            for s in 0..t {
                v[(i * d + c) * t + s] = rows.data()[(i * t + s) * d + c];
            }
        }
    }
    Tensor::new(vec![b, d, t], v)
}

/// Trains a codec on the non-held-out items.
///
/// Each step encodes a batch of random crops, quantizes with all layers,
/// decodes a prefix of them (all, or a random count with probability
/// `quantizer_dropout`) through the straight-through estimator, and
/// minimises `λ_wav·L1 + λ_stft·STFT + β·commitment`. Codebooks follow by EMA
/// with dead-code replacement; they are k-means initialised on the first batch.
pub fn train_codec(
    items: &[CorpusItem],
    config: &CodecConfig,
    train: &CodecTrainConfig,
    seed: u64,
    mut observe: impl FnMut(&CodecStep),
) -> Result<(Codec, CodecLog)> {
    let train_items: Vec<&CorpusItem> = items
        .iter()
        .filter(|it| !is_holdout(it.id, train.holdout_fraction))
        .collect();
    if train_items.is_empty() {
        return Err(Error::invalid("no training items"));
    }
    let hop = config.hop();
    if train.crop_len == 0 || !train.crop_len.is_multiple_of(hop) || train.batch == 0 {
        return Err(Error::Config(format!(
            "codec_train.crop_len must be a positive multiple of {hop}"
        )));
    }
    let mut codec = Codec::init(config, seed)?;
    let rcfg = config.rvq();
    let mut r = rng(derive_seed(seed, "codec-train", 0));
    let mut opt = OptimState::new(AdamWConfig {
        weight_decay: train.weight_decay,
        decay_min_rank: 2,
        ..Default::default()
    });
    let sched = LrSchedule {
        peak: train.lr,
        warmup: train.warmup,
    };
    let mut log = CodecLog::default();
    let tau = train.crop_len / hop;

    for step in 1..=train.steps {
        let x = crops(&train_items, train.batch, train.crop_len, &mut r)?;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                loss: f32::NAN,
            },
            e => e,
        };
        let mut g = Graph::new();
        let p = codec.params.bind(&mut g)?;
        let xv = g.input(x.clone())?;
        let z = codec.encoder(&mut g, &p, xv).map_err(diverged)?;
        let rows = to_rows(g.value(z))?;
        if step == 1 {
            codec.codebooks = init_codebooks(&rows, &rcfg, &mut r)?;
        }
        let enc = encode_rows(&rows, &codec.codebooks, config.depth)?;
        let n_q = if r.gen::<f32>() < config.quantizer_dropout {
            r.gen_range(1..=config.depth)
        } else {
            config.depth
        };
        let prefix = if n_q == config.depth {
            enc.quantized_sum.clone()
        } else {
            let rem = &enc.residuals[n_q];
            Tensor::new(
                rows.dims().to_vec(),
                rows.data()
                    .iter()
                    .zip(rem.data())
                    .map(|(a, b)| a - b)
                    .collect(),
            )?
        };
        let q_used = from_rows(&prefix, train.batch, tau)?;
        let q_full = from_rows(&enc.quantized_sum, train.batch, tau)?;
        let zq = g.straight_through(z, &q_used)?;
        let y = codec.decoder(&mut g, &p, zq).map_err(diverged)?;
        let y2 = g.reshape(y, &[train.batch, train.crop_len])?;
        let x2 = g.input(x.reshape(&[train.batch, train.crop_len])?)?;
        let diff = g.sub(y2, x2)?;
        let diff = g.abs(diff)?;
        let wav = g.mean(diff)?;
        let stft = multiscale_stft_loss(&mut g, x2, y2).map_err(diverged)?;
        let commit = rvq::commitment_loss(&mut g, z, &q_full, config.beta)?;
        let a = g.scale(wav, config.lambda_wav)?;
        let b = g.scale(stft, config.lambda_stft)?;
        let total = g.add(a, b)?;
        let total = g.add(total, commit)?;
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = g.backward(total).map_err(diverged)?.params()?;
        opt.step(&mut codec.params, &grads, sched.at(step))?;

        for (n, cb) in codec.codebooks.iter_mut().enumerate() {
            ema_update(cb, &enc.residuals[n], &enc.indices[n], config.ema_decay)?;
            reinit_dead_codes(cb, rcfg.dead_count(), &enc.residuals[n], &mut r)?;
        }
        codec.step = step;
        let rec = CodecStep {
            step,
            loss,
            wav_l1: g.value(wav).item(),
            stft: g.value(stft).item(),
            commit: g.value(commit).item(),
        };
        if step == 1 || step % train.log_every.max(1) == 0 || step == train.steps {
            observe(&rec);
        }
        log.steps.push(rec);
    }
    log.usage = codec
        .codebooks
        .iter()
        .map(|cb| cb.usage_fraction(rcfg.dead_count()))
        .collect();
    Ok((codec, log))
}

/// Mean SDR over `items` when decoding with each layer count.
pub fn eval_codec(
    codec: &Codec,
    items: &[&CorpusItem],
    layer_counts: &[usize],
) -> Result<Vec<(usize, f32)>> {
    if items.is_empty() {
        return Err(Error::invalid("no items to evaluate"));
    }
    if let Some(&c) = layer_counts
        .iter()
        .find(|&&c| c == 0 || c > codec.config.depth)
    {
        return Err(Error::invalid(format!(
            "layer count {c} outside 1..={}",
            codec.config.depth
        )));
    }
    let per_item: Vec<Vec<f32>> = items
        .par_iter()
        .map(|it| {
            let h = codec.tokenize(&it.waveform)?;
            let n = h.len() * codec.hop();
            let reference = it.waveform.segment(0, n)?;
            layer_counts
                .iter()
                .map(|&c| sdr(&reference, &codec.render(&h, c)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(layer_counts
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            (
                c,
                per_item.iter().map(|v| v[j]).sum::<f32>() / per_item.len() as f32,
            )
        })
        .collect())
}

/// Items held out from codec training.
pub fn holdout_items(items: &[CorpusItem], fraction: f32) -> Vec<&CorpusItem> {
    items
        .iter()
        .filter(|it| is_holdout(it.id, fraction))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_corpus, CorpusConfig};

    fn tiny() -> CodecConfig {
        CodecConfig {
            depth: 3,
            codebook_size: 8,
            latent_dim: 4,
            factors: vec![4, 2],
            enc_channels: vec![4, 6, 8],
            ..Default::default()
        }
    }

    #[test]
    fn shape_contracts() {
        let c = Codec::init(&tiny(), 1).unwrap();
        assert_eq!(c.hop(), 8);
        let w = Waveform::new(
            (0..85).map(|i| (i as f32 * 0.3).sin() * 0.5).collect(),
            16000,
        )
        .unwrap();
        let z = c.encode_frames(&w).unwrap();
        assert_eq!(z.len(), 10);
        assert_eq!(c.decode_frames(&z).unwrap().len(), 80);
        assert_eq!(c.encode_frames(&w).unwrap(), z);
        let silent = Waveform::new(vec![0.0; 16], 16000).unwrap();
        assert!(c.encode_frames(&silent).unwrap().vectors.all_finite());
        let zero = LatentSequence::new(Tensor::zeros(&[10, 4]), c.frame_rate()).unwrap();
        assert_eq!(c.decode_frames(&zero).unwrap().len(), 80);
        assert!(c
            .encode_frames(&Waveform::new(vec![0.0; 7], 16000).unwrap())
            .is_err());
        let bad = LatentSequence::new(Tensor::zeros(&[10, 5]), c.frame_rate()).unwrap();
        assert!(c.decode_frames(&bad).is_err());
    }

    #[test]
    fn default_hop_and_frame_rate() {
        let c = CodecConfig::default();
        assert_eq!(c.hop(), 512);
        assert_eq!(c.frame_rate(), 31.25);
        assert!(CodecConfig { depth: 1, ..tiny() }.validate().is_err());
        assert!(CodecConfig {
            factors: vec![3],
            enc_channels: vec![2, 2],
            ..tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn one_step_moves_everything_and_is_deterministic() {
        let items = synth_corpus(
            &CorpusConfig {
                n_items: 6,
                symbols_per_item: 1,
                segment_s: 0.05,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let tc = CodecTrainConfig {
            steps: 2,
            batch: 2,
            crop_len: 160,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let init = Codec::init(&tiny(), 5).unwrap();
        let (a, log) = train_codec(&items, &tiny(), &tc, 5, |_| {}).unwrap();
        let (b, _) = train_codec(&items, &tiny(), &tc, 5, |_| {}).unwrap();
        assert_eq!(
            a.to_checkpoint().to_bytes().unwrap(),
            b.to_checkpoint().to_bytes().unwrap()
        );
        assert_eq!(log.steps.len(), 2);
        for (name, t) in init.params.iter() {
            assert_ne!(a.params.get(name).unwrap(), t, "{name} did not move");
        }
        let (one, _) = train_codec(
            &items,
            &tiny(),
            &CodecTrainConfig {
                steps: 1,
                ..tc.clone()
            },
            5,
            |_| {},
        )
        .unwrap();
        assert_ne!(one.codebooks[0].ema_counts, a.codebooks[0].ema_counts);
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Codec::init(&tiny(), 2).unwrap();
        let ck = c.to_checkpoint();
        let back =
            Codec::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back, c);
    }
}
