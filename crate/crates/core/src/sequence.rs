//! Training and inference sequences for the two language models.
//!
//! Text block layout: `<bos>`, `<sep>`, `<dur_1>…<dur_max>`, then one token
//! per lyric symbol.

use std::ops::Range;

use rand::Rng;

use crate::config::config_section;
use crate::error::{Error, Result};
use crate::lm::{build_mask, AttentionMask, Example, MaskKind, PositionInput, VocabLayout};
use crate::rvq::{Codebook, TokenHierarchy};

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    /// Largest duration bucket, in seconds.
    pub max_duration_s: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { max_duration_s: 16 }
    }
}

config_section!(SequenceConfig, "sequence", [max_duration_s]);

#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    pub lyric: Vec<usize>,
    pub duration_s: f32,
    pub prompt: Option<String>,
}

impl TextCondition {
    pub fn new(lyric: Vec<usize>, duration_s: f32) -> Result<Self> {
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return Err(Error::invalid(format!(
                "duration {duration_s} must be positive"
            )));
        }
        Ok(Self {
            lyric,
            duration_s,
            prompt: None,
        })
    }
}

/// The symbolic text tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextVocab {
    pub symbols: usize,
    pub max_duration_s: usize,
}

impl TextVocab {
    pub fn new(symbols: usize, max_duration_s: usize) -> Result<Self> {
        if symbols == 0 || max_duration_s == 0 {
            return Err(Error::invalid(
                "text vocab needs symbols and at least one duration bucket",
            ));
        }
        Ok(Self {
            symbols,
            max_duration_s,
        })
    }

    pub fn size(&self) -> usize {
        2 + self.max_duration_s + self.symbols
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn sep(&self) -> usize {
        1
    }

    /// `<dur_b>` for `b` in `1..=max_duration_s`.
    pub fn duration_token(&self, b: usize) -> usize {
        1 + b
    }

    pub fn symbol_token(&self, s: usize) -> usize {
        2 + self.max_duration_s + s
    }

    /// Duration rounded up to whole seconds, at least 1.
    pub fn bucket(&self, duration_s: f32) -> Result<usize> {
        let b = (duration_s.ceil() as usize).max(1);
        if !(duration_s > 0.0) || b > self.max_duration_s {
            return Err(Error::invalid(format!(
                "duration {duration_s} s outside (0, {}]",
                self.max_duration_s
            )));
        }
        Ok(b)
    }
}

/// `[<bos>, <dur_b>, lyric…, <sep>]`.
pub fn tokenize_text(tc: &TextCondition, tv: &TextVocab) -> Result<Vec<usize>> {
    let mut ids = vec![tv.bos(), tv.duration_token(tv.bucket(tc.duration_s)?)];
    for &s in &tc.lyric {
        if s >= tv.symbols {
            return Err(Error::UnknownSymbol(crate::signal::symbol_name(s)));
        }
        ids.push(tv.symbol_token(s));
    }
    ids.push(tv.sep());
    Ok(ids)
}

/// Inverse of [`tokenize_text`]: `(lyric, duration bucket)`.
pub fn detokenize_text(ids: &[usize], tv: &TextVocab) -> Result<(Vec<usize>, usize)> {
    let bad = || Error::invalid(format!("not a text sequence: {ids:?}"));
    if ids.len() < 3 || ids[0] != tv.bos() || *ids.last().unwrap() != tv.sep() {
        return Err(bad());
    }
    let b = ids[1]
        .checked_sub(1)
        .filter(|&b| (1..=tv.max_duration_s).contains(&b))
        .ok_or_else(bad)?;
    let lyric = ids[2..ids.len() - 1]
        .iter()
        .map(|&id| {
            id.checked_sub(tv.symbol_token(0))
                .filter(|&s| s < tv.symbols)
                .ok_or_else(bad)
        })
        .collect::<Result<_>>()?;
    Ok((lyric, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Backbone,
    Task0,
    /// Predict layer `n` from the sum of layers below it.
    Task1(usize),
}

impl TaskKind {
    pub fn name(&self) -> String {
        match self {
            TaskKind::Backbone => "backbone".into(),
            TaskKind::Task0 => "task0".into(),
            TaskKind::Task1(n) => format!("task1_l{n}"),
        }
    }

    pub fn mask_kind(&self) -> MaskKind {
        match self {
            TaskKind::Task1(_) => MaskKind::Full,
            _ => MaskKind::Causal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub inputs: Vec<PositionInput>,
    /// Target id per position; only meaningful where `loss_mask` is set.
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub mask: AttentionMask,
    pub block: Range<usize>,
}

impl TaskInstance {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            inputs: &self.inputs,
            mask: &self.mask,
            targets: &self.targets,
            loss_mask: &self.loss_mask,
            block: self.block.clone(),
        }
    }

    /// Token ids of the discrete inputs, in order.
    pub fn token_ids(&self) -> Vec<usize> {
        self.inputs
            .iter()
            .filter_map(|p| match p {
                PositionInput::Token(id) => Some(*id),
                PositionInput::Continuous { .. } => None,
            })
            .collect()
    }
}

fn tokens(ids: &[usize]) -> Vec<PositionInput> {
    ids.iter().map(|&id| PositionInput::Token(id)).collect()
}

/// Causal next-token instance over `ids`; positions whose target index is at
/// least `first_target` carry loss.
fn next_token(
    kind: TaskKind,
    ids: &[usize],
    first_target: usize,
    block: Range<usize>,
) -> Result<TaskInstance> {
    let n = ids.len();
    let mut targets = vec![0; n];
    let mut loss_mask = vec![false; n];
    for p in 0..n - 1 {
        targets[p] = ids[p + 1];
        loss_mask[p] = p + 1 >= first_target;
    }
    Ok(TaskInstance {
        kind,
        inputs: tokens(ids),
        targets,
        loss_mask,
        mask: build_mask(MaskKind::Causal, n, &[])?,
        block,
    })
}

/// Block of the backbone's predictions: `<eos>` plus the layer-0 and layer-1
/// blocks (control tokens other than `<eos>` are never targets).
pub fn backbone_block(vocab: &VocabLayout) -> Result<Range<usize>> {
    Ok(vocab.control_range().start..vocab.layer_range(1)?.end)
}

/// `[T] + [q0¹, q1¹, q0², q1², …] + <eos>` under a causal mask.
pub fn build_backbone_sequence(
    tc: &TextCondition,
    h: &TokenHierarchy,
    tv: &TextVocab,
    vocab: &VocabLayout,
) -> Result<TaskInstance> {
    if h.depth() < 2 {
        return Err(Error::invalid(format!(
            "backbone needs two layers, hierarchy has {}",
            h.depth()
        )));
    }
    let mut ids = tokenize_text(tc, tv)?;
    let text_len = ids.len();
    for t in 0..h.len() {
        ids.push(vocab.acoustic_id(0, h.get(0, t))?);
        ids.push(vocab.acoustic_id(1, h.get(1, t))?);
    }
    ids.push(vocab.eos());
    next_token(TaskKind::Backbone, &ids, text_len, backbone_block(vocab)?)
}

/// Recovers `(q0, q1)` from backbone ids (text prefix of `text_len` tokens,
/// optional trailing `<eos>`).
pub fn parse_backbone(
    ids: &[usize],
    text_len: usize,
    vocab: &VocabLayout,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut acoustic = ids
        .get(text_len..)
        .ok_or_else(|| Error::invalid("sequence shorter than its text"))?;
    if acoustic.last() == Some(&vocab.eos()) {
        acoustic = &acoustic[..acoustic.len() - 1];
    }
    if acoustic.len() % 2 != 0 {
        return Err(Error::invalid("backbone sequence has an unpaired step"));
    }
    let mut q = (Vec::new(), Vec::new());
    for pair in acoustic.chunks_exact(2) {
        match (vocab.split_acoustic(pair[0]), vocab.split_acoustic(pair[1])) {
            (Some((0, a)), Some((1, b))) => {
                q.0.push(a);
                q.1.push(b);
            }
            _ => {
                return Err(Error::invalid(format!(
                    "ids {pair:?} are not a (q0, q1) pair"
                )))
            }
        }
    }
    Ok(q)
}

/// `[T, q0^{<t}] → q0^t` under a causal mask: the backbone format without q1.
pub fn build_task0(
    tc: &TextCondition,
    h: &TokenHierarchy,
    tv: &TextVocab,
    vocab: &VocabLayout,
) -> Result<TaskInstance> {
    if h.depth() == 0 || h.is_empty() {
        return Err(Error::invalid("empty hierarchy"));
    }
    let mut ids = tokenize_text(tc, tv)?;
    let text_len = ids.len();
    for t in 0..h.len() {
        ids.push(vocab.acoustic_id(0, h.get(0, t))?);
    }
    next_token(TaskKind::Task0, &ids, text_len, vocab.layer_range(0)?)
}

/// `Σ_{i<n} codebook_i[h[i, t]]` for every frame.
pub fn conditioning_sums(
    h: &TokenHierarchy,
    codebooks: &[Codebook],
    n: usize,
) -> Result<Vec<Vec<f32>>> {
    if n > h.depth() || n > codebooks.len() {
        return Err(Error::invalid(format!("cannot sum {n} layers")));
    }
    let d = codebooks
        .first()
        .map(|c| c.dim())
        .ok_or_else(|| Error::invalid("no codebooks"))?;
    Ok((0..h.len())
        .map(|t| {
            let mut v = vec![0.0f32; d];
            for (i, cb) in codebooks.iter().enumerate().take(n) {
                for (a, b) in v.iter_mut().zip(cb.codeword(h.get(i, t))) {
                    *a += b;
                }
            }
            v
        })
        .collect())
}

/// `T + <tgt_n> + Σ_{i<n} q_i → q_n`, all τ targets at once under a full
/// mask.
pub fn build_task1(
    tc: &TextCondition,
    h: &TokenHierarchy,
    codebooks: &[Codebook],
    n: usize,
    tv: &TextVocab,
    vocab: &VocabLayout,
) -> Result<TaskInstance> {
    if n < 1 || n >= h.depth() || n >= vocab.acoustic_blocks {
        return Err(Error::invalid(format!(
            "target layer {n} outside 1..{}",
            h.depth().min(vocab.acoustic_blocks)
        )));
    }
    let text = tokenize_text(tc, tv)?;
    let mut inputs = tokens(&text);
    inputs.push(PositionInput::Token(vocab.target_token(n)?));
    let lead = inputs.len();
    for vector in conditioning_sums(h, codebooks, n)? {
        inputs.push(PositionInput::Continuous { vector, layer: n });
    }
    let len = inputs.len();
    let mut targets = vec![0; len];
    let mut loss_mask = vec![false; len];
    for t in 0..h.len() {
        targets[lead + t] = vocab.acoustic_id(n, h.get(n, t))?;
        loss_mask[lead + t] = true;
    }
    Ok(TaskInstance {
        kind: TaskKind::Task1(n),
        inputs,
        targets,
        loss_mask,
        mask: build_mask(MaskKind::Full, len, &[])?,
        block: vocab.layer_range(n)?,
    })
}

/// Task 0 with probability `p0`, otherwise Task 1 with a target layer drawn
/// uniformly from `[2, depth)`.
pub fn sample_task<R: Rng + ?Sized>(p0: f32, depth: usize, rng: &mut R) -> Result<TaskKind> {
    sample_task_from(p0, 2, depth, rng)
}

/// [`sample_task`] with Task 1 layers drawn from `[first_layer, depth)`.
pub fn sample_task_from<R: Rng + ?Sized>(
    p0: f32,
    first_layer: usize,
    depth: usize,
    rng: &mut R,
) -> Result<TaskKind> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::invalid(format!("p0 {p0} outside [0, 1]")));
    }
    if first_layer == 0 || first_layer >= depth {
        return Err(Error::invalid(format!(
            "no Task 1 layers in [{first_layer}, {depth})"
        )));
    }
    if rng.gen::<f32>() < p0 {
        Ok(TaskKind::Task0)
    } else {
        Ok(TaskKind::Task1(rng.gen_range(first_layer..depth)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::util::rng;

    fn tv() -> TextVocab {
        TextVocab::new(16, 16).unwrap()
    }

    fn vocab(blocks: usize) -> VocabLayout {
        VocabLayout::new(tv().size(), 4, 8, blocks).unwrap()
    }

    fn hier(layers: &[&[usize]]) -> TokenHierarchy {
        let len = layers[0].len();
        TokenHierarchy::new(layers.len(), len, 8, layers.concat()).unwrap()
    }

    fn tc(lyric: &[usize], d: f32) -> TextCondition {
        TextCondition::new(lyric.to_vec(), d).unwrap()
    }

    #[test]
    fn text_layout_and_buckets() {
        let v = tv();
        let ids = tokenize_text(&tc(&[0, 1], 2.0), &v).unwrap();
        assert_eq!(
            ids,
            vec![
                v.bos(),
                v.duration_token(2),
                v.symbol_token(0),
                v.symbol_token(1),
                v.sep()
            ]
        );
        assert_eq!(v.bucket(0.4).unwrap(), 1);
        assert_eq!(v.bucket(2.0).unwrap(), 2);
        assert_eq!(v.bucket(2.01).unwrap(), 3);
        assert!(v.bucket(16.5).is_err());
        assert!(tokenize_text(&tc(&[16], 1.0), &v).is_err());
        assert!(TextCondition::new(vec![1], 0.0).is_err());
        let lyric = vec![3, 15, 0, 7];
        let (back, b) = detokenize_text(&tokenize_text(&tc(&lyric, 0.4), &v).unwrap(), &v).unwrap();
        assert_eq!((back, b), (lyric, 1));
    }

    #[test]
    fn backbone_layout() {
        let v = vocab(2);
        let h = hier(&[&[3, 7], &[5, 2], &[1, 1]]);
        let inst = build_backbone_sequence(&tc(&[1, 2], 2.0), &h, &tv(), &v).unwrap();
        let ids = inst.token_ids();
        let (o0, o1) = (
            v.layer_range(0).unwrap().start,
            v.layer_range(1).unwrap().start,
        );
        assert_eq!(&ids[5..9], &[o0 + 3, o1 + 5, o0 + 7, o1 + 2]);
        assert_eq!(ids.len(), 5 + 2 * 2 + 1);
        assert_eq!(*ids.last().unwrap(), v.eos());
        // loss on the four acoustic targets and <eos>
        assert_eq!(inst.loss_positions(), 5);
        assert!(inst.loss_mask[4] && !inst.loss_mask[3] && !inst.loss_mask[9]);
        assert_eq!(inst.targets[8], v.eos());
        assert_eq!(inst.mask.kind(), MaskKind::Causal);
        assert_eq!(
            parse_backbone(&ids, 5, &v).unwrap(),
            (vec![3, 7], vec![5, 2])
        );
        assert!(build_backbone_sequence(&tc(&[1], 1.0), &hier(&[&[1]]), &tv(), &v).is_err());
        assert!(parse_backbone(&ids[..8], 5, &v).is_err());
    }

    #[test]
    fn task0_is_backbone_without_q1() {
        let v = vocab(4);
        let h = hier(&[&[3, 7, 1], &[5, 2, 0]]);
        let c = tc(&[4], 1.5);
        let t0 = build_task0(&c, &h, &tv(), &v).unwrap();
        assert_eq!(t0.loss_positions(), 3);
        assert_eq!(t0.mask.kind(), MaskKind::Causal);
        assert_eq!(t0.block, v.layer_range(0).unwrap());
        let bb = build_backbone_sequence(&c, &h, &tv(), &v)
            .unwrap()
            .token_ids();
        let q0_only: Vec<usize> = bb
            .iter()
            .copied()
            .filter(|&id| v.split_acoustic(id).is_none_or(|(n, _)| n == 0))
            .collect();
        assert_eq!(&q0_only[..q0_only.len() - 1], &t0.token_ids()[..]);
        for p in 0..t0.len() {
            if t0.loss_mask[p] {
                assert!(t0.block.contains(&t0.targets[p]));
            }
        }
    }

    fn codebooks(scale: f32) -> Vec<Codebook> {
        (0..4)
            .map(|n| {
                let w: Vec<f32> = (0..8 * 2)
                    .map(|i| scale * (i as f32 + 100.0 * n as f32))
                    .collect();
                Codebook::new(n, Tensor::new(vec![8, 2], w).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn task1_layout() {
        let v = vocab(4);
        let h = hier(&[&[1, 2, 3], &[0, 0, 4], &[7, 6, 5], &[2, 2, 2]]);
        let c = tc(&[4, 5], 2.0);
        let inst = build_task1(&c, &h, &codebooks(1.0), 2, &tv(), &v).unwrap();
        assert_eq!(inst.len(), 4 + 1 + 1 + 3);
        assert_eq!(inst.loss_positions(), 3);
        assert_eq!(inst.mask.kind(), MaskKind::Full);
        assert_eq!(
            inst.inputs[5],
            PositionInput::Token(v.target_token(2).unwrap())
        );
        // two layers summed: codeword 1 of layer 0 + codeword 0 of layer 1
        let want = vec![2.0 + 100.0, 3.0 + 101.0];
        assert_eq!(
            inst.inputs[6],
            PositionInput::Continuous {
                vector: want,
                layer: 2
            }
        );
        assert_eq!(
            &inst.targets[6..],
            &[
                v.acoustic_id(2, 7).unwrap(),
                v.acoustic_id(2, 6).unwrap(),
                v.acoustic_id(2, 5).unwrap()
            ]
        );
        let zero = build_task1(&c, &h, &codebooks(0.0), 2, &tv(), &v).unwrap();
        assert!(zero.inputs[6..].iter().all(|p| matches!(p, PositionInput::Continuous { vector, .. } if vector.iter().all(|&x| x == 0.0))));
        assert_eq!(zero.targets, inst.targets);
        assert!(build_task1(&c, &h, &codebooks(1.0), 4, &tv(), &v).is_err());
        assert!(build_task1(&c, &h, &codebooks(1.0), 0, &tv(), &v).is_err());
    }

    #[test]
    fn task_mixture() {
        let mut r = rng(3);
        assert!((0..500).all(|_| sample_task(1.0, 16, &mut r).unwrap() == TaskKind::Task0));
        assert!((0..500).all(|_| sample_task(0.0, 16, &mut r).unwrap() != TaskKind::Task0));
        let draws: Vec<TaskKind> = (0..10_000)
            .map(|_| sample_task(0.25, 16, &mut r).unwrap())
            .collect();
        let f = draws.iter().filter(|&&k| k == TaskKind::Task0).count() as f32 / 1e4;
        assert!((f - 0.25).abs() <= 0.02, "{f}");
        let layers: Vec<usize> = draws
            .iter()
            .filter_map(|k| {
                if let TaskKind::Task1(n) = k {
                    Some(*n)
                } else {
                    None
                }
            })
            .collect();
        assert_eq!(*layers.iter().min().unwrap(), 2);
        assert_eq!(*layers.iter().max().unwrap(), 15);
        assert!(sample_task(1.5, 16, &mut r).is_err());
        assert!(sample_task(0.5, 2, &mut r).is_err());
        assert_eq!(
            sample_task_from(0.0, 1, 2, &mut r).unwrap(),
            TaskKind::Task1(1)
        );
    }
}
