//! Two-stage inference: the backbone writes layers 0 and 1, the SR model
//! fills layers 2.. one full-attention pass per layer, the codec renders.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::lm::{build_mask, sample_in_block, MaskKind, PositionInput};
use crate::rvq::TokenHierarchy;
use crate::sequence::{backbone_block, conditioning_sums, tokenize_text, TextCondition};
use crate::signal::{write_pcm, Waveform};
use crate::trainer::{Role, TrainedLm};
use crate::util::{derive_seed, f32_digest, rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub text: TextCondition,
    /// Layers to fill and render.
    pub depth: usize,
    pub temperature: f32,
    pub top_k: usize,
    /// SR sampling temperature; 0 decodes greedily.
    pub sr_temperature: f32,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(text: TextCondition, depth: usize, seed: u64) -> Self {
        Self {
            text,
            depth,
            temperature: 0.9,
            top_k: 64,
            sr_temperature: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.text.duration_s > 0.0) {
            return Err(Error::invalid(format!(
                "duration {} s",
                self.text.duration_s
            )));
        }
        if self.depth < 2 {
            return Err(Error::invalid(format!("render depth {} < 2", self.depth)));
        }
        if self.top_k == 0 || !(self.temperature >= 0.0) || !(self.sr_temperature >= 0.0) {
            return Err(Error::invalid("top_k must be >= 1 and temperatures >= 0"));
        }
        Ok(())
    }
}

/// Frames for a duration: `round(duration · frame_rate)`, at least 1.
pub fn frame_count(duration_s: f32, frame_rate: f32) -> usize {
    ((duration_s * frame_rate).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// Two-layer hierarchy.
    pub tokens: TokenHierarchy,
    /// First frame at which `<eos>` outranked every layer-0 token, if any.
    pub early_eos: Option<usize>,
}

/// Autoregressive `(q0, q1)` generation for exactly `τ` frames. Each step
/// samples from the block of the layer it writes; `<eos>` never stops
/// generation but its first premature win is reported.
pub fn generate_backbone(
    backbone: &TrainedLm,
    request: &GenerationRequest,
    frame_rate: f32,
) -> Result<BackboneOutput> {
    request.validate()?;
    if backbone.role != Role::Backbone {
        return Err(Error::invalid(
            "generate_backbone needs a backbone checkpoint",
        ));
    }
    let lm = &backbone.lm;
    let vocab = &lm.vocab;
    let tau = frame_count(request.text.duration_s, frame_rate);
    let mut ids = tokenize_text(&request.text, &backbone.text)?;
    let text_len = ids.len();
    if text_len + 2 * tau > lm.config.max_seq_len {
        return Err(Error::invalid(format!(
            "{tau} frames exceed the backbone context"
        )));
    }
    let full = backbone_block(vocab)?;
    let blocks = [vocab.layer_range(0)?, vocab.layer_range(1)?];
    let mut r = rng(derive_seed(request.seed, "backbone-sample", 0));
    let mut early_eos = None;
    for t in 0..tau {
        for (layer, block) in blocks.iter().enumerate() {
            let inputs: Vec<PositionInput> = ids.iter().map(|&i| PositionInput::Token(i)).collect();
            let mask = build_mask(MaskKind::Causal, inputs.len(), &[])?;
            let last = inputs.len() - 1;
            let row = lm.block_logits(&inputs, &mask, last..last + 1, full.clone())?;
            let row = row.data();
            let local = block.start - full.start..block.end - full.start;
            if layer == 0 && early_eos.is_none() {
                let eos = row[vocab.eos() - full.start];
                if row[local.clone()].iter().all(|&v| eos > v) {
                    early_eos = Some(t);
                }
            }
            let id = full.start
                + sample_in_block(row, local, request.temperature, request.top_k, &mut r)?;
            match vocab.split_acoustic(id) {
                Some((n, _)) if n == layer => ids.push(id),
                _ => unreachable!("sampled id {id} outside layer {layer}"),
            }
        }
    }
    let mut grid = Vec::with_capacity(2 * tau);
    for layer in 0..2 {
        grid.extend(
            ids[text_len..]
                .iter()
                .skip(layer)
                .step_by(2)
                .map(|&id| vocab.split_acoustic(id).unwrap().1),
        );
    }
    Ok(BackboneOutput {
        tokens: TokenHierarchy::new(2, tau, vocab.codebook_size, grid)?,
        early_eos,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrOutput {
    pub tokens: TokenHierarchy,
    /// Full-attention forward passes run.
    pub passes: usize,
    /// Digest of each layer at the moment it was fixed.
    pub fixed_digests: Vec<String>,
}

/// Fills layers `partial.depth()..request.depth`, one full-attention pass per
/// layer, each conditioned on the sum of all fixed lower layers.
pub fn super_resolve(
    sr: &TrainedLm,
    codec: &Codec,
    request: &GenerationRequest,
    partial: &TokenHierarchy,
) -> Result<SrOutput> {
    request.validate()?;
    if sr.role != Role::SuperRes {
        return Err(Error::invalid("super_resolve needs an SR checkpoint"));
    }
    if partial.depth() < 2 {
        return Err(Error::invalid(format!(
            "SR needs layers 0 and 1, got {} layers",
            partial.depth()
        )));
    }
    let lm = &sr.lm;
    let vocab = &lm.vocab;
    if request.depth > vocab.acoustic_blocks || request.depth > codec.config.depth {
        return Err(Error::invalid(format!(
            "depth {} exceeds the SR model or codec",
            request.depth
        )));
    }
    let text = tokenize_text(&request.text, &sr.text)?;
    let tau = partial.len();
    let mut h = partial.truncated(partial.depth().min(request.depth))?;
    let mut fixed: Vec<String> = h.layer_digests();
    let mut r = rng(derive_seed(request.seed, "sr-sample", 0));
    let mut passes = 0;
    for n in h.depth()..request.depth {
        let mut inputs: Vec<PositionInput> =
            text.iter().map(|&i| PositionInput::Token(i)).collect();
        inputs.push(PositionInput::Token(vocab.target_token(n)?));
        let lead = inputs.len();
        for vector in conditioning_sums(&h, &codec.codebooks, n)? {
            inputs.push(PositionInput::Continuous { vector, layer: n });
        }
        let mask = build_mask(MaskKind::Full, inputs.len(), &[])?;
        let block = vocab.layer_range(n)?;
        let logits = lm.block_logits(&inputs, &mask, lead..lead + tau, block.clone())?;
        passes += 1;
        let k = vocab.codebook_size;
        let layer = (0..tau)
            .map(|t| {
                let row = &logits.data()[t * k..(t + 1) * k];
                sample_in_block(row, 0..k, request.sr_temperature, k, &mut r)
            })
            .collect::<Result<Vec<usize>>>()?;
        h = h.extended(n + 1)?;
        h.set_layer(n, &layer)?;
        fixed.push(h.layer_digest(n));
        for (i, d) in fixed.iter().enumerate().take(n) {
            if *d != h.layer_digest(i) {
                return Err(Error::invalid(format!("layer {i} changed during pass {n}")));
            }
        }
    }
    Ok(SrOutput {
        tokens: h,
        passes,
        fixed_digests: fixed,
    })
}

/// Decodes every layer of `h` through the codec decoder.
pub fn render(codec: &Codec, h: &TokenHierarchy) -> Result<Waveform> {
    codec.render(h, h.depth())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub waveform: Waveform,
    pub tokens: TokenHierarchy,
    pub sr_passes: usize,
    pub early_eos: Option<usize>,
    pub request: GenerationRequest,
}

impl Generation {
    pub fn waveform_digest(&self) -> String {
        f32_digest(self.waveform.samples())
    }

    /// `key=value` metadata record.
    pub fn metadata(&self) -> String {
        let q = &self.request;
        let mut s = String::new();
        let lyric: Vec<String> = q.text.lyric.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "lyric={}", lyric.join(" "));
        let _ = writeln!(s, "duration_s={}", q.text.duration_s);
        let _ = writeln!(s, "depth={}", q.depth);
        let _ = writeln!(s, "seed={}", q.seed);
        let _ = writeln!(s, "temperature={}", q.temperature);
        let _ = writeln!(s, "top_k={}", q.top_k);
        let _ = writeln!(s, "sr_temperature={}", q.sr_temperature);
        let _ = writeln!(s, "frames={}", self.tokens.len());
        let _ = writeln!(s, "samples={}", self.waveform.len());
        let _ = writeln!(s, "sr_passes={}", self.sr_passes);
        let _ = writeln!(
            s,
            "early_eos={}",
            self.early_eos.map_or("none".to_string(), |t| t.to_string())
        );
        for (n, d) in self.tokens.layer_digests().iter().enumerate() {
            let _ = writeln!(s, "layer_digest.{n}={d}");
        }
        let _ = writeln!(s, "waveform_digest={}", self.waveform_digest());
        s
    }

    /// Writes `<stem>.pcm` (LE f32) and `<stem>.meta`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        write_pcm(&stem.with_extension("pcm"), &self.waveform)?;
        std::fs::write(stem.with_extension("meta"), self.metadata())?;
        Ok(())
    }
}

/// Checks that both LMs were trained on `codec`'s tokens and share a text
/// vocabulary.
pub fn check_compatible(backbone: &TrainedLm, sr: &TrainedLm, codec: &Codec) -> Result<()> {
    let want = codec.digest_hex();
    for m in [backbone, sr] {
        if m.codec_digest != want {
            return Err(Error::DigestMismatch {
                expected: want,
                found: m.codec_digest.clone(),
            });
        }
        if m.lm.vocab.depth != codec.config.depth
            || m.lm.vocab.codebook_size != codec.config.codebook_size
        {
            return Err(Error::invalid(format!(
                "{} vocab does not match the codec",
                m.role.name()
            )));
        }
    }
    if backbone.text != sr.text {
        return Err(Error::invalid("backbone and SR text vocabularies differ"));
    }
    Ok(())
}

/// Backbone, `depth − 2` SR passes, render.
pub fn generate(
    backbone: &TrainedLm,
    sr: &TrainedLm,
    codec: &Codec,
    request: &GenerationRequest,
) -> Result<Generation> {
    check_compatible(backbone, sr, codec)?;
    let coarse = generate_backbone(backbone, request, codec.frame_rate())?;
    let fine = super_resolve(sr, codec, request, &coarse.tokens)?;
    if fine.passes != request.depth - 2 {
        return Err(Error::invalid(format!(
            "{} SR passes for depth {}",
            fine.passes, request.depth
        )));
    }
    let waveform = render(codec, &fine.tokens)?;
    Ok(Generation {
        waveform,
        tokens: fine.tokens,
        sr_passes: fine.passes,
        early_eos: coarse.early_eos,
        request: request.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::lm::{Lm, LmConfig};
    use crate::sequence::TextVocab;
    use crate::trainer::vocab_for;
    use crate::Tensor;

    fn codec(depth: usize) -> Codec {
        let cfg = CodecConfig {
            depth,
            codebook_size: 8,
            latent_dim: 4,
            factors: vec![4, 4],
            enc_channels: vec![4, 4, 4],
            ..Default::default()
        };
        let mut c = Codec::init(&cfg, 1).unwrap();
        let mut r = rng(2);
        for cb in c.codebooks.iter_mut() {
            cb.codewords = Tensor::randn(&[8, 4], 1.0, &mut r);
        }
        c
    }

    fn models(c: &Codec) -> (TrainedLm, TrainedLm) {
        let tv = TextVocab::new(4, 4).unwrap();
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 1,
            d_ffn: 16,
            max_seq_len: 256,
            ..Default::default()
        };
        let mk = |role, latent, seed| TrainedLm {
            lm: Lm::init(&cfg, vocab_for(role, &tv, c).unwrap(), latent, seed).unwrap(),
            role,
            text: tv,
            codec_digest: c.digest_hex(),
            step: 0,
            seed,
        };
        (mk(Role::Backbone, 0, 3), mk(Role::SuperRes, 4, 4))
    }

    fn request(depth: usize) -> GenerationRequest {
        GenerationRequest::new(TextCondition::new(vec![0, 3, 1], 0.012).unwrap(), depth, 9)
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(2.0, 31.25), 63);
        assert_eq!(frame_count(381.0, 21.5), 8192);
    }

    #[test]
    fn pass_count_is_depth_minus_two() {
        for depth in [4, 8, 16] {
            let c = codec(depth);
            let (b, s) = models(&c);
            let g = generate(&b, &s, &c, &request(depth)).unwrap();
            assert_eq!(g.sr_passes, depth - 2);
            assert_eq!(g.tokens.depth(), depth);
            let tau = frame_count(0.012, c.frame_rate());
            assert_eq!(g.tokens.len(), tau);
            assert_eq!(g.waveform.len(), tau * c.hop());
        }
    }

    #[test]
    fn layers_are_fixed_once() {
        let c = codec(6);
        let (b, s) = models(&c);
        let q = request(6);
        let coarse = generate_backbone(&b, &q, c.frame_rate()).unwrap();
        let out = super_resolve(&s, &c, &q, &coarse.tokens).unwrap();
        assert_eq!(out.fixed_digests, out.tokens.layer_digests());
        assert_eq!(
            &out.tokens.layer_digests()[..2],
            &coarse.tokens.layer_digests()[..]
        );
        assert!(super_resolve(&s, &c, &q, &coarse.tokens.truncated(1).unwrap()).is_err());
    }

    #[test]
    fn deterministic_and_checked() {
        let c = codec(4);
        let (b, s) = models(&c);
        let a = generate(&b, &s, &c, &request(4)).unwrap();
        let a2 = generate(&b, &s, &c, &request(4)).unwrap();
        assert_eq!(a.waveform_digest(), a2.waveform_digest());
        let mut other = request(4);
        other.seed = 10;
        assert_ne!(generate(&b, &s, &c, &other).unwrap().tokens, a.tokens);
        let mut greedy = request(4);
        greedy.temperature = 0.0;
        let g1 = generate_backbone(&b, &greedy, c.frame_rate()).unwrap();
        greedy.seed = 77;
        assert_eq!(generate_backbone(&b, &greedy, c.frame_rate()).unwrap(), g1);

        let mut stale = s.clone();
        stale.codec_digest = "00".into();
        assert!(matches!(
            generate(&b, &stale, &c, &request(4)),
            Err(Error::DigestMismatch { .. })
        ));
        assert!(generate(&s, &b, &c, &request(4)).is_err());
        assert!(generate(&b, &s, &c, &request(5)).is_err());
        let meta = a.metadata();
        assert!(meta.contains("sr_passes=2\n") && meta.contains("layer_digest.3="));
    }

    #[test]
    fn render_matches_round_trip() {
        let c = codec(4);
        let w = Waveform::new(
            (0..1024).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(),
            16000,
        )
        .unwrap();
        let h = c.tokenize(&w).unwrap();
        assert_eq!(render(&c, &h).unwrap(), c.round_trip(&w, 4).unwrap());
        assert_eq!(render(&c, &h.truncated(2).unwrap()).unwrap().len(), w.len());
    }
}
