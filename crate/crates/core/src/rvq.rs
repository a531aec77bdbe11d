//! Deep residual vector quantization.
//!
//! Layer `n` quantizes the residual left by layers `0..n`; decoding sums the
//! selected codewords of the first `up_to` layers. Codebooks learn by EMA
//! with k-means initialisation and dead-code replacement.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::util::sha256_hex;

/// Floor on EMA counts when normalising sums.
const COUNT_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RvqConfig {
    pub depth: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// EMA decay γ.
    pub gamma: f32,
    /// Minimum assignments per `usage_window` steps for a code to stay alive.
    pub usage_threshold: f32,
    pub usage_window: f32,
    pub kmeans_iters: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            codebook_size: 256,
            dim: 64,
            gamma: 0.99,
            usage_threshold: 2.0,
            usage_window: 100.0,
            kmeans_iters: 10,
        }
    }
}

impl RvqConfig {
    /// EMA count below which a code is dead. EMA counts estimate assignments
    /// per step, so `threshold` per `window` steps becomes `threshold / window`.
    pub fn dead_count(&self) -> f32 {
        self.usage_threshold / self.usage_window
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.codebook_size < 2 || self.dim == 0 {
            return Err(Error::invalid(
                "rvq needs depth ≥ 1, codebook size ≥ 2 and dim ≥ 1",
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!(
                "ema decay must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.usage_window > 0.0) {
            return Err(Error::invalid("usage window must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub layer: usize,
    /// `[K, D]`.
    pub codewords: Tensor,
    pub ema_counts: Vec<f32>,
    /// `[K, D]`.
    pub ema_sums: Tensor,
}

impl Codebook {
    /// Codebook whose EMA state is consistent with `codewords` at count 1.
    pub fn new(layer: usize, codewords: Tensor) -> Result<Self> {
        if codewords.rank() != 2 || codewords.dims()[0] < 2 {
            return Err(Error::invalid(format!(
                "codebook needs [K ≥ 2, D], got {:?}",
                codewords.dims()
            )));
        }
        if !codewords.all_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        let k = codewords.dims()[0];
        Ok(Self {
            layer,
            ema_sums: codewords.clone(),
            codewords,
            ema_counts: vec![1.0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.codewords.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.codewords.dims()[1]
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.codewords.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest codeword under squared L2, lowest index on ties.
    pub fn nearest(&self, x: &[f32]) -> usize {
        nearest(&self.codewords, x)
    }

    /// Fraction of codes with EMA count at or above `min_count`.
    pub fn usage_fraction(&self, min_count: f32) -> f32 {
        self.ema_counts.iter().filter(|&&c| c >= min_count).count() as f32 / self.size() as f32
    }
}

/// Continuous vectors at a frame rate, `[τ, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub vectors: Tensor,
    pub frame_rate: f32,
}

impl LatentSequence {
    pub fn new(vectors: Tensor, frame_rate: f32) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::invalid(format!(
                "latents must be [τ, D], got {:?}",
                vectors.dims()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite { op: "latents" });
        }
        Ok(Self {
            vectors,
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }
}

/// `N × τ` grid of codebook indices, row-major by layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenHierarchy {
    depth: usize,
    length: usize,
    codebook_size: usize,
    indices: Vec<usize>,
}

impl TokenHierarchy {
    pub fn new(
        depth: usize,
        length: usize,
        codebook_size: usize,
        indices: Vec<usize>,
    ) -> Result<Self> {
        if depth == 0 || length == 0 {
            return Err(Error::invalid(
                "token hierarchy needs positive depth and length",
            ));
        }
        if indices.len() != depth * length {
            return Err(Error::invalid(format!(
                "token hierarchy {depth}×{length} given {} indices",
                indices.len()
            )));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::invalid(format!(
                "token {i} outside codebook of size {codebook_size}"
            )));
        }
        Ok(Self {
            depth,
            length,
            codebook_size,
            indices,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn get(&self, n: usize, t: usize) -> usize {
        self.indices[n * self.length + t]
    }

    pub fn layer(&self, n: usize) -> &[usize] {
        &self.indices[n * self.length..(n + 1) * self.length]
    }

    pub fn set_layer(&mut self, n: usize, tokens: &[usize]) -> Result<()> {
        if n >= self.depth || tokens.len() != self.length {
            return Err(Error::invalid(format!(
                "layer {n} of length {} does not fit",
                tokens.len()
            )));
        }
        if let Some(&i) = tokens.iter().find(|&&i| i >= self.codebook_size) {
            return Err(Error::invalid(format!(
                "token {i} outside codebook of size {}",
                self.codebook_size
            )));
        }
        self.indices[n * self.length..(n + 1) * self.length].copy_from_slice(tokens);
        Ok(())
    }

    /// The first `depth` layers.
    pub fn truncated(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.depth {
            return Err(Error::invalid(format!(
                "cannot truncate depth {} to {depth}",
                self.depth
            )));
        }
        Self::new(
            depth,
            self.length,
            self.codebook_size,
            self.indices[..depth * self.length].to_vec(),
        )
    }

    /// Copy with layers `from..` replaced by zeros.
    pub fn extended(&self, depth: usize) -> Result<Self> {
        if depth < self.depth {
            return Err(Error::invalid("extended depth is smaller"));
        }
        let mut idx = self.indices.clone();
        idx.resize(depth * self.length, 0);
        Self::new(depth, self.length, self.codebook_size, idx)
    }

    /// Hex SHA-256 of layer `n` as little-endian u32 tokens.
    pub fn layer_digest(&self, n: usize) -> String {
        let bytes: Vec<u8> = self
            .layer(n)
            .iter()
            .flat_map(|&i| (i as u32).to_le_bytes())
            .collect();
        sha256_hex(&bytes)
    }

    pub fn layer_digests(&self) -> Vec<String> {
        (0..self.depth).map(|n| self.layer_digest(n)).collect()
    }
}

fn nearest(codewords: &Tensor, x: &[f32]) -> usize {
    let mut best = (0, f32::INFINITY);
    for (k, c) in codewords.rows().enumerate() {
        let d: f32 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn check_dim(op: &'static str, rows: &Tensor, cb: &Codebook) -> Result<()> {
    if rows.rank() != 2 || rows.dims()[1] != cb.dim() {
        return Err(Error::shape(
            op,
            format!("rows {:?} vs codebook dim {}", rows.dims(), cb.dim()),
        ));
    }
    Ok(())
}

/// Nearest-codeword indices and codewords for every row of `[T, D]`.
pub fn quantize_rows(rows: &Tensor, cb: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    check_dim("quantize_layer", rows, cb)?;
    let idx: Vec<usize> = rows.rows().map(|r| cb.nearest(r)).collect();
    let mut q = Vec::with_capacity(rows.len());
    for &k in &idx {
        q.extend_from_slice(cb.codeword(k));
    }
    Ok((idx, Tensor::new(rows.dims().to_vec(), q)?))
}

pub fn quantize_layer(
    residual: &LatentSequence,
    cb: &Codebook,
) -> Result<(Vec<usize>, LatentSequence)> {
    let (idx, q) = quantize_rows(&residual.vectors, cb)?;
    Ok((
        idx,
        LatentSequence {
            vectors: q,
            frame_rate: residual.frame_rate,
        },
    ))
}

/// Result of running the residual recursion over rows `[T, D]`.
#[derive(Clone, Debug)]
pub struct RowEncoding {
    /// `indices[n][t]`.
    pub indices: Vec<Vec<usize>>,
    /// Input residual of each layer; `residuals[0]` is `z`.
    pub residuals: Vec<Tensor>,
    /// Σₙ quantizedₙ.
    pub quantized_sum: Tensor,
    pub final_residual: Tensor,
}

pub fn encode_rows(z: &Tensor, codebooks: &[Codebook], n_layers: usize) -> Result<RowEncoding> {
    if n_layers == 0 || n_layers > codebooks.len() {
        return Err(Error::invalid(format!(
            "n_layers {n_layers} outside 1..={}",
            codebooks.len()
        )));
    }
    let mut r = z.clone();
    let mut sum = Tensor::zeros(z.dims());
    let mut indices = Vec::with_capacity(n_layers);
    let mut residuals = Vec::with_capacity(n_layers);
    for cb in &codebooks[..n_layers] {
        let (idx, q) = quantize_rows(&r, cb)?;
        let next: Vec<f32> = r.data().iter().zip(q.data()).map(|(a, b)| a - b).collect();
        sum.add_assign(&q);
        residuals.push(std::mem::replace(
            &mut r,
            Tensor::new(z.dims().to_vec(), next)?,
        ));
        indices.push(idx);
    }
    Ok(RowEncoding {
        indices,
        residuals,
        quantized_sum: sum,
        final_residual: r,
    })
}

/// Encodes `z` with the first `n_layers` codebooks.
pub fn encode(
    z: &LatentSequence,
    codebooks: &[Codebook],
    n_layers: usize,
) -> Result<(TokenHierarchy, LatentSequence)> {
    let enc = encode_rows(&z.vectors, codebooks, n_layers)?;
    let k = codebooks[0].size();
    let h = TokenHierarchy::new(n_layers, z.len(), k, enc.indices.concat())?;
    Ok((
        h,
        LatentSequence {
            vectors: enc.final_residual,
            frame_rate: z.frame_rate,
        },
    ))
}

/// Σ_{n<up_to} codewordsₙ[h[n, t]], `[τ, D]`.
pub fn decode_tensor(h: &TokenHierarchy, codebooks: &[Codebook], up_to: usize) -> Result<Tensor> {
    if up_to > h.depth() || up_to > codebooks.len() {
        return Err(Error::invalid(format!(
            "up_to {up_to} exceeds depth {}",
            h.depth().min(codebooks.len())
        )));
    }
    let d = codebooks
        .first()
        .map(|c| c.dim())
        .ok_or_else(|| Error::invalid("no codebooks"))?;
    let mut out = vec![0.0f32; h.len() * d];
    for (n, cb) in codebooks[..up_to].iter().enumerate() {
        for (t, &k) in h.layer(n).iter().enumerate() {
            if k >= cb.size() {
                return Err(Error::invalid(format!(
                    "token {k} outside codebook {n} of size {}",
                    cb.size()
                )));
            }
            for (o, c) in out[t * d..(t + 1) * d].iter_mut().zip(cb.codeword(k)) {
                *o += c;
            }
        }
    }
    Tensor::new(vec![h.len(), d], out)
}

pub fn decode(
    h: &TokenHierarchy,
    codebooks: &[Codebook],
    up_to: usize,
    frame_rate: f32,
) -> Result<LatentSequence> {
    Ok(LatentSequence {
        vectors: decode_tensor(h, codebooks, up_to)?,
        frame_rate,
    })
}

/// One EMA step from rows `[T, D]` assigned to `indices`.
pub fn ema_update(cb: &mut Codebook, rows: &Tensor, indices: &[usize], gamma: f32) -> Result<()> {
    check_dim("ema_update", rows, cb)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!(
            "ema decay must be in [0, 1), got {gamma}"
        )));
    }
    if indices.len() != rows.dims()[0] {
        return Err(Error::invalid("one index per row required"));
    }
    let (k, d) = (cb.size(), cb.dim());
    let mut counts = vec![0.0f32; k];
    let mut sums = vec![0.0f32; k * d];
    for (&i, r) in indices.iter().zip(rows.rows()) {
        counts[i] += 1.0;
        for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(r) {
            *s += v;
        }
    }
    for c in 0..k {
        cb.ema_counts[c] = gamma * cb.ema_counts[c] + (1.0 - gamma) * counts[c];
        let denom = cb.ema_counts[c].max(COUNT_EPS);
        let es = &mut cb.ema_sums.data_mut()[c * d..(c + 1) * d];
        for (e, s) in es.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
            *e = gamma * *e + (1.0 - gamma) * s;
        }
        let es = cb.ema_sums.data()[c * d..(c + 1) * d].to_vec();
        for (w, e) in cb.codewords.data_mut()[c * d..(c + 1) * d]
            .iter_mut()
            .zip(es)
        {
            *w = e / denom;
        }
    }
    Ok(())
}

/// Replaces every code with EMA count below `min_count` by a uniformly drawn
/// row of `batch` and resets its count to 1. Returns the replaced codes.
pub fn reinit_dead_codes<R: Rng + ?Sized>(
    cb: &mut Codebook,
    min_count: f32,
    batch: &Tensor,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_dim("reinit_dead_codes", batch, cb)?;
    let t = batch.dims()[0];
    let d = cb.dim();
    let dead: Vec<usize> = (0..cb.size())
        .filter(|&k| cb.ema_counts[k] < min_count)
        .collect();
    for &k in &dead {
        let src = rng.gen_range(0..t);
        let v = batch.data()[src * d..(src + 1) * d].to_vec();
        cb.codewords.data_mut()[k * d..(k + 1) * d].copy_from_slice(&v);
        cb.ema_sums.data_mut()[k * d..(k + 1) * d].copy_from_slice(&v);
        cb.ema_counts[k] = 1.0;
    }
    Ok(dead)
}

/// Lloyd k-means on rows `[T, D]`, seeded with `k` distinct random rows
/// (rows are reused when `T < k`). Empty clusters keep their centroid.
pub fn kmeans<R: Rng + ?Sized>(
    rows: &Tensor,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if rows.rank() != 2 || k == 0 {
        return Err(Error::invalid("kmeans needs rows [T, D] and k ≥ 1"));
    }
    let (t, d) = (rows.dims()[0], rows.dims()[1]);
    let mut order: Vec<usize> = (0..t).collect();
    for i in (1..t).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut cent = Vec::with_capacity(k * d);
    for c in 0..k {
        let r = order[c % t];
        cent.extend_from_slice(&rows.data()[r * d..(r + 1) * d]);
    }
    let mut cent = Tensor::new(vec![k, d], cent)?;
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for r in rows.rows() {
            let i = nearest(&cent, r);
            counts[i] += 1;
            for (s, &v) in sums[i * d..(i + 1) * d].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        for c in (0..k).filter(|&c| counts[c] > 0) {
            for j in 0..d {
                cent.data_mut()[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
            }
        }
    }
    Ok(cent)
}

/// Layer-by-layer k-means initialisation: layer `n` clusters the residuals
/// left by the freshly initialised layers `0..n`.
pub fn init_codebooks<R: Rng + ?Sized>(
    z: &Tensor,
    config: &RvqConfig,
    rng: &mut R,
) -> Result<Vec<Codebook>> {
    config.validate()?;
    if z.rank() != 2 || z.dims()[1] != config.dim {
        return Err(Error::shape(
            "init_codebooks",
            format!("{:?} vs dim {}", z.dims(), config.dim),
        ));
    }
    let mut r = z.clone();
    let mut books = Vec::with_capacity(config.depth);
    for n in 0..config.depth {
        let cw = kmeans(&r, config.codebook_size, config.kmeans_iters, rng)?;
        let cb = Codebook::new(n, cw)?;
        let (_, q) = quantize_rows(&r, &cb)?;
        let next = r.data().iter().zip(q.data()).map(|(a, b)| a - b).collect();
        r = Tensor::new(r.dims().to_vec(), next)?;
        books.push(cb);
    }
    Ok(books)
}

/// Forward value `q`, identity gradient to `z`.
pub fn straight_through(g: &mut Graph, z: Var, q: &Tensor) -> Result<Var> {
    g.straight_through(z, q)
}

/// `β · mean((z − sg(q))²)` over all elements.
pub fn commitment_loss(g: &mut Graph, z: Var, q: &Tensor, beta: f32) -> Result<Var> {
    if g.dims(z) != q.dims() {
        return Err(Error::shape(
            "commitment_loss",
            format!("{:?} vs {:?}", g.dims(z), q.dims()),
        ));
    }
    let qv = g.input(q.clone())?;
    let d = g.sub(z, qv)?;
    let d = g.square(d)?;
    let m = g.mean(d)?;
    g.scale(m, beta)
}
