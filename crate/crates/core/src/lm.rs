//! Small pre-norm transformer language model.
//!
//! Rotary positions, grouped key/value heads and a SwiGLU feed-forward. A
//! position is either a vocabulary token or a continuous latent vector with a
//! layer tag. The output vocabulary is laid out as
//! `[text][control][layer 0]…[layer B−1]`, and losses and sampling are
//! restricted to one block at a time.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{config_section, split_sections, Section};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, Params, Tensor, Var};
use crate::util::rng;

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
    /// Standard deviation of the random initialisation.
    pub init_std: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            n_kv_heads: 4,
            d_ffn: 352,
            max_seq_len: 2048,
            rope_base: 10_000.0,
            init_std: 0.02,
        }
    }
}

config_section!(
    LmConfig,
    "lm",
    [
        n_layers,
        d_model,
        n_heads,
        n_kv_heads,
        d_ffn,
        max_seq_len,
        rope_base,
        init_std
    ]
);

impl LmConfig {
    /// The published full-scale trunk. Not trainable on a desk machine; kept
    /// as a preset for shape and sequence-length checks.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 24,
            d_model: 2048,
            n_heads: 32,
            n_kv_heads: 8,
            d_ffn: 5632,
            max_seq_len: 16384,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("lm sizes must be positive"));
        }
        if self.n_heads == 0
            || self.n_kv_heads == 0
            || !self.n_heads.is_multiple_of(self.n_kv_heads)
        {
            return Err(Error::invalid(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) || !self.head_dim().is_multiple_of(2) {
            return Err(Error::invalid("d_model / n_heads must be an even integer"));
        }
        if !(self.rope_base > 1.0) || !(self.init_std > 0.0) {
            return Err(Error::invalid(
                "rope_base must exceed 1 and init_std be positive",
            ));
        }
        Ok(())
    }
}

/// Sizes of the vocabulary blocks. The control block holds `<eos>` followed
/// by one `<tgt_n>` token per codec layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VocabLayout {
    pub text: usize,
    /// Codec depth `N`.
    pub depth: usize,
    pub codebook_size: usize,
    /// Number of acoustic blocks present (2 for the backbone, `N` for SR).
    pub acoustic_blocks: usize,
}

config_section!(
    VocabLayout,
    "vocab",
    [text, depth, codebook_size, acoustic_blocks]
);

impl VocabLayout {
    pub fn new(
        text: usize,
        depth: usize,
        codebook_size: usize,
        acoustic_blocks: usize,
    ) -> Result<Self> {
        let v = Self {
            text,
            depth,
            codebook_size,
            acoustic_blocks,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text == 0 || self.depth == 0 || self.codebook_size == 0 {
            return Err(Error::invalid("vocab blocks must be non-empty"));
        }
        if self.acoustic_blocks == 0 || self.acoustic_blocks > self.depth {
            return Err(Error::invalid(format!(
                "acoustic blocks {} must be in 1..={}",
                self.acoustic_blocks, self.depth
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.text + self.depth + 1 + self.acoustic_blocks * self.codebook_size
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text
    }

    pub fn control_range(&self) -> Range<usize> {
        self.text..self.text + self.depth + 1
    }

    pub fn eos(&self) -> usize {
        self.text
    }

    /// The `<tgt_n>` control token.
    pub fn target_token(&self, n: usize) -> Result<usize> {
        if n >= self.depth {
            return Err(Error::invalid(format!("layer {n} >= depth {}", self.depth)));
        }
        Ok(self.text + 1 + n)
    }

    pub fn layer_range(&self, n: usize) -> Result<Range<usize>> {
        if n >= self.acoustic_blocks {
            return Err(Error::invalid(format!(
                "layer {n} has no block (blocks: {})",
                self.acoustic_blocks
            )));
        }
        let start = self.text + self.depth + 1 + n * self.codebook_size;
        Ok(start..start + self.codebook_size)
    }

    pub fn acoustic_id(&self, n: usize, code: usize) -> Result<usize> {
        if code >= self.codebook_size {
            return Err(Error::invalid(format!(
                "code {code} >= codebook size {}",
                self.codebook_size
            )));
        }
        Ok(self.layer_range(n)?.start + code)
    }

    /// `(layer, code)` of an acoustic id.
    pub fn split_acoustic(&self, id: usize) -> Option<(usize, usize)> {
        let base = self.text + self.depth + 1;
        (id >= base && id < self.size()).then(|| {
            (
                (id - base) / self.codebook_size,
                (id - base) % self.codebook_size,
            )
        })
    }

    pub fn with_blocks(&self, acoustic_blocks: usize) -> Result<Self> {
        Self::new(self.text, self.depth, self.codebook_size, acoustic_blocks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Causal,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    pad: Vec<bool>,
}

/// Attention pattern over `length` positions; padded positions neither attend
/// nor are attended. An empty `pad_flags` means no padding.
pub fn build_mask(kind: MaskKind, length: usize, pad_flags: &[bool]) -> Result<AttentionMask> {
    if length == 0 {
        return Err(Error::invalid("mask length must be at least 1"));
    }
    let pad = match pad_flags.len() {
        0 => vec![false; length],
        n if n == length => pad_flags.to_vec(),
        n => return Err(Error::invalid(format!("{n} pad flags for length {length}"))),
    };
    Ok(AttentionMask { kind, pad })
}

impl AttentionMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.pad[i]
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        !self.pad[i] && !self.pad[j] && (self.kind == MaskKind::Full || j <= i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionInput {
    Token(usize),
    /// A latent-space vector (dim `D`) tagged with the layer it conditions.
    Continuous {
        vector: Vec<f32>,
        layer: usize,
    },
}

/// One training sequence with its block-restricted targets.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub inputs: &'a [PositionInput],
    pub mask: &'a AttentionMask,
    pub targets: &'a [usize],
    pub loss_mask: &'a [bool],
    pub block: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    pub config: LmConfig,
    pub vocab: VocabLayout,
    /// Dimension of continuous inputs; 0 for token-only models.
    pub latent_dim: usize,
    pub params: Params,
}

enum Init {
    Normal(f32),
    Ones,
    Zeros,
}

impl Lm {
    pub fn init(
        config: &LmConfig,
        vocab: VocabLayout,
        latent_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        vocab.validate()?;
        let mut lm = Self {
            config: config.clone(),
            vocab,
            latent_dim,
            params: Params::new(),
        };
        let mut r = rng(seed);
        for (name, dims, init) in lm.shapes() {
            let t = match init {
                Init::Normal(std) => Tensor::randn(&dims, std, &mut r),
                Init::Ones => Tensor::full(&dims, 1.0),
                Init::Zeros => Tensor::zeros(&dims),
            };
            lm.params.insert(name, t);
        }
        Ok(lm)
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.config;
        let (d, hd, v) = (c.d_model, c.head_dim(), self.vocab.size());
        let std = c.init_std;
        let out_std = std / (2.0 * c.n_layers as f32).sqrt();
        let mut s = vec![
            ("tok_emb".to_string(), vec![v, d], Init::Normal(std)),
            ("head".to_string(), vec![v, d], Init::Normal(std)),
            ("ln_f.w".to_string(), vec![d], Init::Ones),
            ("ln_f.b".to_string(), vec![d], Init::Zeros),
        ];
        if self.latent_dim > 0 {
            s.push(("cont.w".into(), vec![self.latent_dim, d], Init::Normal(std)));
            s.push(("cont.b".into(), vec![d], Init::Zeros));
            s.push((
                "layer_emb".into(),
                vec![self.vocab.depth, d],
                Init::Normal(std),
            ));
        }
        for l in 0..c.n_layers {
            let p = |n: &str| format!("blk{l}.{n}");
            s.push((p("ln1.w"), vec![d], Init::Ones));
            s.push((p("ln1.b"), vec![d], Init::Zeros));
            s.push((p("attn.q"), vec![d, c.n_heads * hd], Init::Normal(std)));
            s.push((p("attn.k"), vec![d, c.n_kv_heads * hd], Init::Normal(std)));
            s.push((p("attn.v"), vec![d, c.n_kv_heads * hd], Init::Normal(std)));
            s.push((p("attn.o"), vec![c.n_heads * hd, d], Init::Normal(out_std)));
            s.push((p("ln2.w"), vec![d], Init::Ones));
            s.push((p("ln2.b"), vec![d], Init::Zeros));
            s.push((p("ffn.gate"), vec![d, c.d_ffn], Init::Normal(std)));
            s.push((p("ffn.up"), vec![d, c.d_ffn], Init::Normal(std)));
            s.push((p("ffn.down"), vec![c.d_ffn, d], Init::Normal(out_std)));
        }
        s
    }

    /// Parameters whose shapes do not depend on the vocabulary or the input
    /// kind: the transformer blocks and the final norm.
    pub fn trunk_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("blk") || n.starts_with("ln_f."))
            .cloned()
            .collect()
    }

    /// Final-norm hidden states `[B·T, d]` of a padded batch, with `T` the
    /// longest sequence.
    pub fn hidden(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[(&[PositionInput], &AttentionMask)],
    ) -> Result<(Var, usize)> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (inputs, mask) in batch {
            if inputs.is_empty() || inputs.len() > c.max_seq_len {
                return Err(Error::invalid(format!(
                    "sequence length {} outside 1..={}",
                    inputs.len(),
                    c.max_seq_len
                )));
            }
            if mask.len() != inputs.len() {
                return Err(Error::invalid(format!(
                    "mask length {} vs {} inputs",
                    mask.len(),
                    inputs.len()
                )));
            }
        }
        let b = batch.len();
        let t = batch.iter().map(|(x, _)| x.len()).max().unwrap();
        let x = self.embed(g, p, batch, t)?;

        let (h, hkv, hd) = (c.n_heads, c.n_kv_heads, c.head_dim());
        let mut allowed = vec![false; b * h * t * t];
        for (bi, (inputs, mask)) in batch.iter().enumerate() {
            let n = inputs.len();
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for i in 0..n {
                    for j in 0..n {
                        allowed[base + i * t + j] = mask.allowed(i, j);
                    }
                }
            }
        }
        let kv_rows: Vec<usize> = (0..b)
            .flat_map(|bi| (0..h).map(move |hi| bi * hkv + hi / (h / hkv)))
            .collect();
        let positions: Vec<usize> = (0..t).collect();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = x;
        for l in 0..c.n_layers {
            let w = |n: &str| p.get(&format!("blk{l}.{n}"));
            let hn = g.layer_norm(x, w("ln1.w")?, w("ln1.b")?, LN_EPS)?;
            let heads = |g: &mut Graph, proj: Var, n_heads: usize, rope: bool| -> Result<Var> {
                let y = g.reshape(proj, &[b, t, n_heads, hd])?;
                let y = g.permute(y, &[0, 2, 1, 3])?;
                let y = if rope {
                    g.rope(y, &positions, c.rope_base)?
                } else {
                    y
                };
                g.reshape(y, &[b * n_heads, t, hd])
            };
            let q = g.matmul(hn, w("attn.q")?, false)?;
            let q = heads(g, q, h, true)?;
            let k = g.matmul(hn, w("attn.k")?, false)?;
            let mut k = heads(g, k, hkv, true)?;
            let v = g.matmul(hn, w("attn.v")?, false)?;
            let mut v = heads(g, v, hkv, false)?;
            if hkv != h {
                k = g.index_select(k, &kv_rows)?;
                v = g.index_select(v, &kv_rows)?;
            }
            let s = g.bmm(q, k, false, true)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, Some(&allowed))?;
            let o = g.bmm(a, v, false, false)?;
            let o = g.reshape(o, &[b, h, t, hd])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[b * t, h * hd])?;
            let o = g.matmul(o, w("attn.o")?, false)?;
            x = g.add(x, o)?;

            let hn = g.layer_norm(x, w("ln2.w")?, w("ln2.b")?, LN_EPS)?;
            let gate = g.matmul(hn, w("ffn.gate")?, false)?;
            let gate = g.silu(gate)?;
            let up = g.matmul(hn, w("ffn.up")?, false)?;
            let f = g.mul(gate, up)?;
            let f = g.matmul(f, w("ffn.down")?, false)?;
            x = g.add(x, f)?;
        }
        let x = g.layer_norm(x, p.get("ln_f.w")?, p.get("ln_f.b")?, LN_EPS)?;
        Ok((x, t))
    }

    /// Input rows `[B·T, d]`: token embeddings, projected continuous vectors
    /// plus their layer embedding, and zeros at padding.
    fn embed(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[(&[PositionInput], &AttentionMask)],
        t: usize,
    ) -> Result<Var> {
        enum Src {
            Tok(usize),
            Cont(usize),
            Zero,
        }
        let d = self.config.d_model;
        let vocab = self.vocab.size();
        let mut ids = Vec::new();
        let mut cont = Vec::new();
        let mut tags = Vec::new();
        let mut src = Vec::with_capacity(batch.len() * t);
        for (inputs, _) in batch {
            for pos in 0..t {
                match inputs.get(pos) {
                    None => src.push(Src::Zero),
                    Some(PositionInput::Token(id)) => {
                        if *id >= vocab {
                            return Err(Error::invalid(format!("token id {id} >= vocab {vocab}")));
                        }
                        src.push(Src::Tok(ids.len()));
                        ids.push(*id);
                    }
                    Some(PositionInput::Continuous { vector, layer }) => {
                        if self.latent_dim == 0 {
                            return Err(Error::invalid("model takes no continuous inputs"));
                        }
                        if vector.len() != self.latent_dim {
                            return Err(Error::shape(
                                "lm input",
                                format!("continuous dim {} vs {}", vector.len(), self.latent_dim),
                            ));
                        }
                        if *layer >= self.vocab.depth {
                            return Err(Error::invalid(format!(
                                "layer tag {layer} >= depth {}",
                                self.vocab.depth
                            )));
                        }
                        src.push(Src::Cont(tags.len()));
                        cont.extend_from_slice(vector);
                        tags.push(*layer);
                    }
                }
            }
        }
        let mut parts = Vec::new();
        let mut offset = 0;
        let (tok_off, cont_off) = {
            let tok_off = offset;
            if !ids.is_empty() {
                parts.push(g.embedding(p.get("tok_emb")?, &ids)?);
                offset += ids.len();
            }
            let cont_off = offset;
            if !tags.is_empty() {
                let xs = g.input(Tensor::new(vec![tags.len(), self.latent_dim], cont)?)?;
                let y = g.matmul(xs, p.get("cont.w")?, false)?;
                let y = g.add_bias(y, p.get("cont.b")?)?;
                let e = g.embedding(p.get("layer_emb")?, &tags)?;
                parts.push(g.add(y, e)?);
                offset += tags.len();
            }
            (tok_off, cont_off)
        };
        let zero_off = offset;
        if src.iter().any(|s| matches!(s, Src::Zero)) {
            parts.push(g.input(Tensor::zeros(&[1, d]))?);
        }
        let rows = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        let idx: Vec<usize> = src
            .iter()
            .map(|s| match s {
                Src::Tok(i) => tok_off + i,
                Src::Cont(i) => cont_off + i,
                Src::Zero => zero_off,
            })
            .collect();
        g.index_select(rows, &idx)
    }

    /// Full logits `[T, vocab]` of one sequence.
    pub fn forward(&self, inputs: &[PositionInput], mask: &AttentionMask) -> Result<Tensor> {
        self.block_logits(inputs, mask, 0..inputs.len(), 0..self.vocab.size())
    }

    /// Logits of the rows `rows` restricted to the vocabulary block `block`.
    pub fn block_logits(
        &self,
        inputs: &[PositionInput],
        mask: &AttentionMask,
        rows: Range<usize>,
        block: Range<usize>,
    ) -> Result<Tensor> {
        if rows.is_empty()
            || rows.end > inputs.len()
            || block.is_empty()
            || block.end > self.vocab.size()
        {
            return Err(Error::invalid(format!(
                "rows {rows:?} / block {block:?} out of range"
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let (h, _) = self.hidden(&mut g, &p, &[(inputs, mask)])?;
        let h = g.slice(h, 0, rows.start, rows.len())?;
        let w = g.slice(p.get("head")?, 0, block.start, block.len())?;
        let logits = g.matmul(h, w, true)?;
        let out = g.value(logits).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "lm forward" });
        }
        Ok(out)
    }

    /// Per-example mean blocked cross-entropy. Logits are only formed over
    /// each example's loss rows and block, which equals masking everything
    /// else to −∞.
    pub fn example_losses(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[Example<'_>],
    ) -> Result<Vec<Var>> {
        let pairs: Vec<(&[PositionInput], &AttentionMask)> =
            batch.iter().map(|e| (e.inputs, e.mask)).collect();
        let (h, t) = self.hidden(g, p, &pairs)?;
        let head = p.get("head")?;
        let mut heads: HashMap<(usize, usize), Var> = HashMap::new();
        let mut out = Vec::with_capacity(batch.len());
        for (bi, ex) in batch.iter().enumerate() {
            if ex.targets.len() != ex.inputs.len() || ex.loss_mask.len() != ex.inputs.len() {
                return Err(Error::invalid(
                    "targets and loss mask must cover every position",
                ));
            }
            if ex.block.is_empty() || ex.block.end > self.vocab.size() {
                return Err(Error::invalid(format!(
                    "block {:?} outside vocab",
                    ex.block
                )));
            }
            let first = ex
                .loss_mask
                .iter()
                .position(|&m| m)
                .ok_or_else(|| Error::invalid("no loss positions"))?;
            let last = ex.loss_mask.iter().rposition(|&m| m).unwrap();
            let hs = g.slice(h, 0, bi * t + first, last + 1 - first)?;
            let key = (ex.block.start, ex.block.len());
            let w = match heads.get(&key) {
                Some(&w) => w,
                None => {
                    let w = g.slice(head, 0, key.0, key.1)?;
                    heads.insert(key, w);
                    w
                }
            };
            let logits = g.matmul(hs, w, true)?;
            out.push(block_cross_entropy(
                g,
                logits,
                &ex.targets[first..=last],
                &ex.loss_mask[first..=last],
                ex.block.clone(),
            )?);
        }
        Ok(out)
    }

    /// Negative log-likelihood of every masked-in target, as `(position, nll)`
    /// per example, without building gradients.
    pub fn position_nll(&self, batch: &[Example<'_>]) -> Result<Vec<Vec<(usize, f32)>>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let pairs: Vec<(&[PositionInput], &AttentionMask)> =
            batch.iter().map(|e| (e.inputs, e.mask)).collect();
        let (h, t) = self.hidden(&mut g, &p, &pairs)?;
        let head = p.get("head")?;
        let mut out = Vec::with_capacity(batch.len());
        for (bi, ex) in batch.iter().enumerate() {
            let hs = g.slice(h, 0, bi * t, ex.inputs.len())?;
            let w = g.slice(head, 0, ex.block.start, ex.block.len())?;
            let logits = g.matmul(hs, w, true)?;
            let lv = g.value(logits);
            let mut rows = Vec::new();
            for (pos, row) in lv.rows().enumerate() {
                if !ex.loss_mask[pos] {
                    continue;
                }
                let target = ex.targets[pos];
                if !ex.block.contains(&target) {
                    return Err(Error::OutOfBlock {
                        token: target,
                        start: ex.block.start,
                        end: ex.block.end,
                    });
                }
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
                let nll = (lse - row[target - ex.block.start] as f64) as f32;
                if !nll.is_finite() {
                    return Err(Error::NonFinite { op: "position_nll" });
                }
                rows.push((pos, nll));
            }
            out.push(rows);
        }
        Ok(out)
    }

    fn config_text(&self) -> String {
        format!(
            "{}{}input.latent_dim={}\n",
            self.config.canonical(),
            self.vocab.canonical(),
            self.latent_dim
        )
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config_text());
        ck.meta = meta;
        ck.meta.insert("kind".into(), "lm".into());
        for (name, t) in self.params.iter() {
            ck.tensors.insert(name.clone(), t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "lm" {
            return Err(Error::Checkpoint(format!(
                "expected an lm checkpoint, got {}",
                ck.meta("kind")?
            )));
        }
        let parts = split_sections(&ck.config_text)?;
        let part = |k: &str| parts.get(k).cloned().unwrap_or_default();
        let config = LmConfig::from_text(&part("lm"))?;
        let vocab = VocabLayout::from_text(&part("vocab"))?;
        let latent_dim = crate::config::parse_lines(&part("input"))?
            .into_iter()
            .find(|(k, _)| k == "input.latent_dim")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing input.latent_dim".into()))?;
        let mut lm = Lm::init(&config, vocab, latent_dim, 0)?;
        if ck.tensors.len() != lm.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, expected {}",
                ck.tensors.len(),
                lm.params.len()
            )));
        }
        for (name, t) in lm.params.clone().iter() {
            let stored = ck.tensor(name)?;
            if stored.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs {:?}",
                    stored.dims(),
                    t.dims()
                )));
            }
            lm.params.insert(name.clone(), stored.clone());
        }
        if lm.config_text() != ck.config_text {
            return Err(Error::Checkpoint("config text is not canonical".into()));
        }
        Ok(lm)
    }
}

fn block_cross_entropy(
    g: &mut Graph,
    block_logits: Var,
    targets: &[usize],
    loss_mask: &[bool],
    block: Range<usize>,
) -> Result<Var> {
    let mut local = Vec::with_capacity(targets.len());
    for (&t, &m) in targets.iter().zip(loss_mask) {
        if m && !block.contains(&t) {
            return Err(Error::OutOfBlock {
                token: t,
                start: block.start,
                end: block.end,
            });
        }
        local.push(if m { t - block.start } else { 0 });
    }
    let weights: Vec<f32> = loss_mask
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    g.cross_entropy(block_logits, &local, &weights)
}

/// Mean cross-entropy over masked-in rows of `logits [T, vocab]` with every
/// logit outside `block` treated as −∞.
pub fn blocked_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    loss_mask: &[bool],
    block: Range<usize>,
) -> Result<Var> {
    let d = g.dims(logits).to_vec();
    if d.len() != 2 || d[0] != targets.len() || d[0] != loss_mask.len() {
        return Err(Error::shape(
            "blocked_loss",
            format!("logits {d:?}, {} targets", targets.len()),
        ));
    }
    if block.is_empty() || block.end > d[1] {
        return Err(Error::invalid(format!(
            "block {block:?} outside {} logits",
            d[1]
        )));
    }
    let inside = g.slice(logits, 1, block.start, block.len())?;
    block_cross_entropy(g, inside, targets, loss_mask, block)
}

/// Draws one id from a logit row: argmax at temperature 0, otherwise the
/// softmax at `temperature` over the `top_k` largest logits.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f32],
    temperature: f32,
    top_k: usize,
    rng: &mut R,
) -> Result<usize> {
    if logits.is_empty() || top_k == 0 {
        return Err(Error::invalid("sampling needs logits and top_k >= 1"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sample_next" });
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature {temperature}")));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if temperature == 0.0 || top_k == 1 {
        return Ok(order[0]);
    }
    order.truncate(top_k.min(logits.len()));
    let mx = logits[order[0]] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] as f64 - mx) / temperature as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*order.last().unwrap())
}

/// [`sample_next`] over the logits of `block` only; the result is a global id.
pub fn sample_in_block<R: Rng + ?Sized>(
    row: &[f32],
    block: Range<usize>,
    temperature: f32,
    top_k: usize,
    rng: &mut R,
) -> Result<usize> {
    if block.is_empty() || block.end > row.len() {
        return Err(Error::invalid(format!(
            "block {block:?} outside {} logits",
            row.len()
        )));
    }
    Ok(block.start + sample_next(&row[block.clone()], temperature, top_k, rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_kv_heads: usize) -> LmConfig {
        LmConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads,
            d_ffn: 24,
            max_seq_len: 64,
            ..Default::default()
        }
    }

    fn vocab() -> VocabLayout {
        VocabLayout::new(10, 4, 8, 4).unwrap()
    }

    fn toks(ids: &[usize]) -> Vec<PositionInput> {
        ids.iter().map(|&i| PositionInput::Token(i)).collect()
    }

    fn unpadded(kind: MaskKind, n: usize) -> AttentionMask {
        build_mask(kind, n, &[]).unwrap()
    }

    #[test]
    fn mask_examples() {
        let m = unpadded(MaskKind::Causal, 3);
        let allowed: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| m.allowed(i, j))
            .collect();
        assert_eq!(
            allowed,
            vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]
        );
        let f = unpadded(MaskKind::Full, 2);
        assert!((0..2).all(|i| (0..2).all(|j| f.allowed(i, j))));
        let p = build_mask(MaskKind::Full, 3, &[false, true, false]).unwrap();
        assert!((0..3).all(|k| !p.allowed(1, k) && !p.allowed(k, 1)));
        assert!(p.allowed(0, 2));
        assert!(build_mask(MaskKind::Full, 0, &[]).is_err());
        assert!(build_mask(MaskKind::Full, 2, &[true]).is_err());
    }

    #[test]
    fn vocab_blocks_are_disjoint_and_contiguous() {
        let v = vocab();
        let mut ranges = vec![v.text_range(), v.control_range()];
        ranges.extend((0..v.acoustic_blocks).map(|n| v.layer_range(n).unwrap()));
        for w in ranges.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(ranges.last().unwrap().end, v.size());
        assert_eq!(v.size(), 10 + 5 + 32);
        assert_eq!(v.split_acoustic(v.acoustic_id(2, 5).unwrap()), Some((2, 5)));
        assert_eq!(v.split_acoustic(v.eos()), None);
        assert!(v.layer_range(4).is_err());
        assert!(VocabLayout::new(10, 4, 8, 5).is_err());
        let backbone = v.with_blocks(2).unwrap();
        assert_eq!(backbone.layer_range(1).unwrap(), v.layer_range(1).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        assert!(LmConfig::full_scale().validate().is_ok());
        assert!(LmConfig {
            n_kv_heads: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LmConfig {
            n_heads: 5,
            n_kv_heads: 5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn perturbation_delta(kind: MaskKind, at: usize) -> Vec<f32> {
        let lm = Lm::init(&tiny(2), vocab(), 0, 3).unwrap();
        let ids = [0, 3, 16, 20, 17, 40, 22, 9];
        let m = unpadded(kind, ids.len());
        let a = lm.forward(&toks(&ids), &m).unwrap();
        let mut other = ids;
        other[at] = 30;
        let b = lm.forward(&toks(&other), &m).unwrap();
        let n = lm.vocab.size();
        (0..ids.len())
            .map(|t| {
                (0..n)
                    .map(|k| (a.data()[t * n + k] - b.data()[t * n + k]).abs())
                    .fold(0.0, f32::max)
            })
            .collect()
    }

    #[test]
    fn causal_mask_has_exactly_zero_leakage() {
        let d = perturbation_delta(MaskKind::Causal, 5);
        assert!(d[..5].iter().all(|&x| x == 0.0), "{d:?}");
        assert!(d[5] > 0.0);
    }

    #[test]
    fn full_mask_sees_the_future() {
        let d = perturbation_delta(MaskKind::Full, 5);
        assert!(d[..5].iter().all(|&x| x > 0.0), "{d:?}");
    }

    /// Direct f64 transformer forward, written independently of the graph.
    fn slow_forward(lm: &Lm, ids: &[usize], causal: bool) -> Vec<f64> {
        let c = &lm.config;
        let (d, h, hkv, hd) = (c.d_model, c.n_heads, c.n_kv_heads, c.head_dim());
        let p = |n: &str| {
            lm.params
                .get(n)
                .unwrap()
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect::<Vec<f64>>()
        };
        let t = ids.len();
        let emb = p("tok_emb");
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| emb[i * d..(i + 1) * d].to_vec())
            .collect();
        let ln = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
            let r = 1.0 / (var + LN_EPS as f64).sqrt();
            x.iter()
                .zip(w)
                .zip(b)
                .map(|((v, w), b)| (v - mu) * r * w + b)
                .collect()
        };
        let lin = |x: &[f64], w: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * n + j]).sum())
                .collect()
        };
        let rot = |v: &mut [f64], pos: usize| {
            for i in 0..hd / 2 {
                let ang = pos as f64 * (c.rope_base as f64).powf(-2.0 * i as f64 / hd as f64);
                let (a, b) = (v[i], v[i + hd / 2]);
                v[i] = a * ang.cos() - b * ang.sin();
                v[i + hd / 2] = a * ang.sin() + b * ang.cos();
            }
        };
        for l in 0..c.n_layers {
            let w = |n: &str| p(&format!("blk{l}.{n}"));
            let hn: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &w("ln1.w"), &w("ln1.b"))).collect();
            let q: Vec<Vec<f64>> = hn.iter().map(|r| lin(r, &w("attn.q"), h * hd)).collect();
            let k: Vec<Vec<f64>> = hn.iter().map(|r| lin(r, &w("attn.k"), hkv * hd)).collect();
            let v: Vec<Vec<f64>> = hn.iter().map(|r| lin(r, &w("attn.v"), hkv * hd)).collect();
            let mut ctx = vec![vec![0.0; h * hd]; t];
            for head in 0..h {
                let kvh = head * hkv / h;
                for i in 0..t {
                    let mut qi = q[i][head * hd..(head + 1) * hd].to_vec();
                    rot(&mut qi, i);
                    let js: Vec<usize> = (0..t).filter(|&j| !causal || j <= i).collect();
                    let scores: Vec<f64> = js
                        .iter()
                        .map(|&j| {
                            let mut kj = k[j][kvh * hd..(kvh + 1) * hd].to_vec();
                            rot(&mut kj, j);
                            qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (&j, ej) in js.iter().zip(&e) {
                        for u in 0..hd {
                            ctx[i][head * hd + u] += ej / z * v[j][kvh * hd + u];
                        }
                    }
                }
            }
            for i in 0..t {
                let o = lin(&ctx[i], &w("attn.o"), d);
                x[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
                let hn = ln(&x[i], &w("ln2.w"), &w("ln2.b"));
                let gate = lin(&hn, &w("ffn.gate"), c.d_ffn);
                let up = lin(&hn, &w("ffn.up"), c.d_ffn);
                let f: Vec<f64> = gate
                    .iter()
                    .zip(&up)
                    .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                    .collect();
                let f = lin(&f, &w("ffn.down"), d);
                x[i].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            }
        }
        let head = p("head");
        let n = lm.vocab.size();
        let mut out = Vec::with_capacity(t * n);
        for r in &x {
            let r = ln(r, &p("ln_f.w"), &p("ln_f.b"));
            out.extend((0..n).map(|k| {
                r.iter()
                    .zip(&head[k * d..(k + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            }));
        }
        out
    }

    #[test]
    fn matches_slow_reference_attention() {
        for (kv, causal) in [(4, true), (4, false), (2, true), (1, false)] {
            let mut lm = Lm::init(&tiny(kv), vocab(), 0, 11).unwrap();
            // larger weights so attention is far from uniform
            for name in lm.params.names().cloned().collect::<Vec<_>>() {
                if name.contains("attn.q") || name.contains("attn.k") {
                    let t = lm.params.get_mut(&name).unwrap();
                    *t = t.map(|v| v * 20.0);
                }
            }
            let ids = [1, 12, 20, 17, 33, 40, 2];
            let kind = if causal {
                MaskKind::Causal
            } else {
                MaskKind::Full
            };
            let fast = lm.forward(&toks(&ids), &unpadded(kind, ids.len())).unwrap();
            let slow = slow_forward(&lm, &ids, causal);
            let err = fast
                .data()
                .iter()
                .zip(&slow)
                .map(|(&a, &b)| (a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "kv {kv} causal {causal}: {err}");
        }
    }

    #[test]
    fn padding_does_not_change_results() {
        let lm = Lm::init(&tiny(2), vocab(), 4, 5).unwrap();
        let long = toks(&[0, 1, 2, 3, 4, 5]);
        let mut short = toks(&[0, 3]);
        short.push(PositionInput::Continuous {
            vector: vec![0.5, -1.0, 2.0, 0.0],
            layer: 3,
        });
        let (ml, ms) = (unpadded(MaskKind::Causal, 6), unpadded(MaskKind::Full, 3));
        let mut g = Graph::new();
        let p = lm.params.bind_frozen(&mut g).unwrap();
        let (h, t) = lm
            .hidden(&mut g, &p, &[(&long, &ml), (&short, &ms)])
            .unwrap();
        assert_eq!(t, 6);
        let mut g2 = Graph::new();
        let p2 = lm.params.bind_frozen(&mut g2).unwrap();
        let (h2, _) = lm.hidden(&mut g2, &p2, &[(&short, &ms)]).unwrap();
        let d = lm.config.d_model;
        let batched = &g.value(h).data()[6 * d..9 * d];
        let alone = g2.value(h2).data();
        let err = batched
            .iter()
            .zip(alone)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn input_errors() {
        let lm = Lm::init(&tiny(4), vocab(), 4, 5).unwrap();
        let m = unpadded(MaskKind::Full, 1);
        assert!(lm.forward(&toks(&[lm.vocab.size()]), &m).is_err());
        let bad = [PositionInput::Continuous {
            vector: vec![1.0; 3],
            layer: 0,
        }];
        assert!(matches!(lm.forward(&bad, &m), Err(Error::Shape { .. })));
        let tok_only = Lm::init(&tiny(4), vocab(), 0, 5).unwrap();
        let c = [PositionInput::Continuous {
            vector: vec![1.0; 4],
            layer: 0,
        }];
        assert!(tok_only.forward(&c, &m).is_err());
        assert!(lm.forward(&toks(&[1, 2]), &m).is_err());
        let too_long = toks(&vec![1; 65]);
        assert!(lm
            .forward(&too_long, &unpadded(MaskKind::Causal, 65))
            .is_err());
    }

    fn loss_of(
        logits: Vec<f32>,
        cols: usize,
        targets: &[usize],
        block: Range<usize>,
    ) -> Result<f32> {
        let rows = targets.len();
        let mut g = Graph::new();
        let l = g.var(Tensor::new(vec![rows, cols], logits)?)?;
        let loss = blocked_loss(&mut g, l, targets, &vec![true; rows], block)?;
        Ok(g.value(loss).item())
    }

    #[test]
    fn blocked_loss_examples() {
        let uniform = loss_of(vec![0.3; 10], 10, &[5], 4..8).unwrap();
        assert!((uniform - 4f32.ln()).abs() < 1e-6);
        let mut sharp = vec![0.0; 10];
        sharp[6] = 20.0;
        assert!(loss_of(sharp.clone(), 10, &[6], 4..8).unwrap() < 1e-6);
        let mut outside = vec![0.1, 0.2, -0.3, 0.0, 1.0, -1.0, 0.5, 0.25, 0.0, 0.7];
        let base = loss_of(outside.clone(), 10, &[5], 4..8).unwrap();
        outside[9] += 1000.0;
        outside[0] += 1000.0;
        assert_eq!(loss_of(outside, 10, &[5], 4..8).unwrap(), base);
        assert!(matches!(
            loss_of(vec![0.0; 10], 10, &[9], 4..8),
            Err(Error::OutOfBlock { .. })
        ));
    }

    #[test]
    fn blocked_loss_puts_no_gradient_outside_the_block() {
        let mut g = Graph::new();
        let l = g.var(Tensor::randn(&[3, 10], 1.0, &mut rng(1))).unwrap();
        let loss = blocked_loss(&mut g, l, &[4, 0, 7], &[true, false, true], 4..8).unwrap();
        let grad = g.backward(loss).unwrap().wrt(l).unwrap();
        for r in 0..3 {
            for k in (0..4).chain(8..10) {
                assert_eq!(grad.data()[r * 10 + k], 0.0);
            }
        }
        assert!(grad.data()[10..20].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_examples() {
        let mut r = rng(4);
        let row = [0.1, 2.0, -1.0, 1.9];
        assert_eq!(sample_next(&row, 0.0, 4, &mut r).unwrap(), 1);
        assert_eq!(sample_next(&row, 5.0, 1, &mut r).unwrap(), 1);
        let two = [1f32.ln(), 3f32.ln()];
        let ones = (0..10_000)
            .filter(|_| sample_next(&two, 1.0, 2, &mut r).unwrap() == 1)
            .count();
        assert!((ones as f32 / 10_000.0 - 0.75).abs() <= 0.03, "{ones}");
        for _ in 0..200 {
            let id = sample_next(&row, 1.0, 2, &mut r).unwrap();
            assert!(id == 1 || id == 3);
            let b = sample_in_block(&row, 2..4, 3.0, 2, &mut r).unwrap();
            assert!((2..4).contains(&b));
        }
        assert!(sample_next(&[0.0, f32::NAN], 1.0, 2, &mut r).is_err());
        assert!(sample_next(&[0.0, f32::INFINITY], 0.0, 2, &mut r).is_err());
        assert!(sample_next(&row, 1.0, 0, &mut r).is_err());
    }

    #[test]
    fn example_losses_equal_blocked_loss_on_full_logits() {
        let lm = Lm::init(&tiny(2), vocab(), 0, 8).unwrap();
        let ids = [0, 1, 16, 17, 18, 19];
        let inputs = toks(&ids);
        let m = unpadded(MaskKind::Causal, 6);
        let targets = [0, 0, 17, 18, 19, 0];
        let lmask = [false, false, true, true, true, false];
        let block = lm.vocab.layer_range(0).unwrap();
        let mut g = Graph::new();
        let p = lm.params.bind_frozen(&mut g).unwrap();
        let ex = Example {
            inputs: &inputs,
            mask: &m,
            targets: &targets,
            loss_mask: &lmask,
            block: block.clone(),
        };
        let fast = lm.example_losses(&mut g, &p, &[ex]).unwrap()[0];
        let fast = g.value(fast).item();
        let logits = lm.forward(&inputs, &m).unwrap();
        let mut g2 = Graph::new();
        let l = g2.input(logits).unwrap();
        let full = blocked_loss(&mut g2, l, &targets, &lmask, block).unwrap();
        assert!((g2.value(full).item() - fast).abs() < 1e-5);
        let ex = Example {
            inputs: &inputs,
            mask: &m,
            targets: &targets,
            loss_mask: &lmask,
            block: lm.vocab.layer_range(0).unwrap(),
        };
        let rows = lm.position_nll(&[ex]).unwrap();
        assert_eq!(
            rows[0].iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![2, 3, 4]
        );
        let mean = rows[0].iter().map(|r| r.1).sum::<f32>() / 3.0;
        assert!((mean - fast).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = Lm::init(&tiny(2), vocab(), 4, 9).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("role".to_string(), "sr".to_string());
        let ck = lm.to_checkpoint(meta);
        let back =
            Lm::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, lm);
        assert_eq!(
            back.to_checkpoint(ck.meta.clone()).to_bytes().unwrap(),
            ck.to_bytes().unwrap()
        );
    }
}
