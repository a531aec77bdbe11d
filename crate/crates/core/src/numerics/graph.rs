//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op evaluates eagerly, checks its output for non-finite values and
//! records enough state to run its vector-Jacobian product later. Reductions
//! run sequentially over the last axis so repeated evaluation is bit-identical.

use std::collections::HashMap;
use std::sync::Arc;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the graph only needs the vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Gelu,
    Silu,
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Abs,
    Log,
    Exp,
    Sqrt,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Abs => x.abs(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    AddScalar {
        x: Var,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        rstd: Vec<f32>,
    },
    Embedding {
        w: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        total: f32,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        idx: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Rope {
        x: Var,
        cos: Vec<f32>,
        sin: Vec<f32>,
    },
    StraightThrough {
        z: Var,
    },
    Custom {
        op: Arc<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are immutable once pushed; inputs always precede
/// the nodes that consume them, so the push order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// An anonymous differentiable leaf.
    pub fn var(&mut self, t: Tensor) -> Result<Var> {
        self.push("var", t, Op::Leaf, true)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let v = self.push("param", t, Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Detached copy of `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.input(t)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let name = op.name();
        self.push(
            name,
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a [.., m, k] · b [k, n]`, or `a · bᵀ` with `b [n, k]` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if bd.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("rhs must be 2-D, got {bd:?}"),
            ));
        }
        let k = *ad.last().unwrap();
        let (bk, n) = if transpose_b {
            (bd[1], bd[0])
        } else {
            (bd[0], bd[1])
        };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("{ad:?} x {bd:?} (transpose_b={transpose_b})"),
            ));
        }
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            transpose_b,
            &mut out,
            false,
        );
        let mut od = ad.clone();
        *od.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::new(od, out)?,
            Op::MatMul {
                a,
                b,
                tb: transpose_b,
            },
            rg,
        )
    }

    /// Batched `op(a) · op(b)` over a leading batch axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(Error::shape("bmm", format!("{ad:?} x {bd:?}")));
        }
        let (m, k) = if ta { (ad[2], ad[1]) } else { (ad[1], ad[2]) };
        let (bk, n) = if tb { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        if k != bk {
            return Err(Error::shape(
                "bmm",
                format!("{ad:?} x {bd:?} (ta={ta}, tb={tb})"),
            ));
        }
        let batch = ad[0];
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, ta, tb },
            rg,
        )
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.dims(), bv.dims()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    /// Adds a vector `b` of size `last_dim(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.last_dim();
        if bv.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.dims(), bv.dims()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (r, &bb) in row.iter_mut().zip(bv.data()) {
                *r += bb;
            }
        }
        let t = Tensor::new(xv.dims().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        self.push("add_bias", t, Op::AddBias { x, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push("scale", t, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push("add_scalar", t, Op::AddScalar { x }, rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let t = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(f.name(), t, Op::Unary { x, f }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f32 = v.data().iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, rg)
    }

    // ── normalization & attention pieces ─────────────────────────────

    /// Softmax over the last axis. `mask` (when given) is tiled over the
    /// tensor; `false` entries get probability exactly zero and fully masked
    /// rows yield all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.is_empty() || !xv.len().is_multiple_of(m.len()) || m.len() % n != 0 {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {} vs {:?}", m.len(), xv.dims()),
                ));
            }
        }
        let mut out = vec![0.0f32; xv.len()];
        for (r, (row, orow)) in xv.rows().zip(out.chunks_exact_mut(n)).enumerate() {
            let allowed = |j: usize| match mask {
                Some(m) => m[(r * n + j) % m.len()],
                None => true,
            };
            let mut mx = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f32::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0f32;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - mx).exp();
                    s += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let t = Tensor::new(xv.dims().to_vec(), out)?;
        let rg = self.rg(x);
        self.push("softmax", t, Op::Softmax { x }, rg)
    }

    /// Layer norm over the last axis with affine `w`, `b`.
    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(w).len() != n || self.value(b).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("affine size vs {:?}", xv.dims()),
            ));
        }
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xv.len()];
        let mut rstds = Vec::with_capacity(xv.len() / n);
        for (row, orow) in xv.rows().zip(out.chunks_exact_mut(n)) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                orow[j] = (row[j] - mean) * rstd * wv[j] + bv[j];
            }
            rstds.push(rstd);
        }
        let t = Tensor::new(xv.dims().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                w,
                b,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Rows of `w [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, w: Var, ids: &[usize]) -> Result<Var> {
        let wv = self.value(w);
        if wv.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", wv.dims())));
        }
        let (vocab, d) = (wv.dims()[0], wv.dims()[1]);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(format!(
                    "embedding id {id} >= vocab {vocab}"
                )));
            }
            out.extend_from_slice(&wv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(w);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                w,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits [n, C]`. Rows with zero weight are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.dims()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    lv.dims(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let c = lv.dims()[1];
        let total: f32 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("cross_entropy: all weights are zero"));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0f32;
        for (i, (row, prow)) in lv.rows().zip(probs.chunks_exact_mut(c)).enumerate() {
            if targets[i] >= c {
                return Err(Error::invalid(format!(
                    "target {} >= classes {c}",
                    targets[i]
                )));
            }
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - mx).exp();
                s += *p;
            }
            for p in prow.iter_mut() {
                *p /= s;
            }
            if weights[i] != 0.0 {
                let nll = -(row[targets[i]] - mx - s.ln());
                loss += weights[i] * nll;
            }
        }
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total,
            },
            rg,
        )
    }

    /// Rotary position embedding on `x [.., T, hd]`, rotating the pairs
    /// `(i, i + hd/2)` by `positions[t] · base^(-2i/hd)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f32) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims().to_vec();
        if d.len() < 2 || !d[d.len() - 1].is_multiple_of(2) || d[d.len() - 2] != positions.len() {
            return Err(Error::shape(
                "rope",
                format!("{d:?} with {} positions", positions.len()),
            ));
        }
        let hd = d[d.len() - 1];
        let half = hd / 2;
        let t_len = positions.len();
        let mut cos = vec![0.0; t_len * half];
        let mut sin = vec![0.0; t_len * half];
        for (t, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f32 / hd as f32);
                let ang = p as f32 * freq;
                cos[t * half + i] = ang.cos();
                sin[t * half + i] = ang.sin();
            }
        }
        let mut out = xv.data().to_vec();
        rotate(&mut out, t_len, hd, &cos, &sin, false);
        let t = Tensor::new(d, out)?;
        let rg = self.rg(x);
        self.push("rope", t, Op::Rope { x, cos, sin }, rg)
    }

    // ── convolution ──────────────────────────────────────────────────

    /// `x [B, Cin, L]`, `w [Cout, Cin, K]` → `[B, Cout, (L + 2·pad − K)/stride + 1]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 3 || xd[1] != wd[1] || stride == 0 {
            return Err(Error::shape("conv1d", format!("x {xd:?}, w {wd:?}")));
        }
        let (batch, cin, len) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[0], wd[2]);
        if len + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("input length {len} shorter than kernel {k}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv1d", "bias size"));
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; batch * cout * lout];
        let mut cols = vec![0.0; lout * cin * k];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            im2col(
                &xv[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                k,
                stride,
                pad,
                lout,
                &mut cols,
            );
            gemm(
                cout,
                cin * k,
                lout,
                wv,
                false,
                &cols,
                true,
                &mut out[bi * cout * lout..(bi + 1) * cout * lout],
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for chunk in out.chunks_exact_mut(lout).enumerate() {
                let co = chunk.0 % cout;
                chunk.1.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let t = Tensor::new(vec![batch, cout, lout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            "conv1d",
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x [B, Cin, L]`, `w [Cin, Cout, K]` → `[B, Cout, (L − 1)·stride − 2·pad + K]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 3 || xd[1] != wd[0] || stride == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("x {xd:?}, w {wd:?}"),
            ));
        }
        let (batch, cin, len) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[1], wd[2]);
        let full = (len - 1) * stride + k;
        if full <= 2 * pad {
            return Err(Error::shape(
                "conv_transpose1d",
                "padding consumes the output",
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv_transpose1d", "bias size"));
            }
        }
        let lout = full - 2 * pad;
        let mut out = vec![0.0; batch * cout * lout];
        let mut cols = vec![0.0; len * cout * k];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..batch {
            gemm(
                len,
                cin,
                cout * k,
                &xv[bi * cin * len..(bi + 1) * cin * len],
                true,
                wv,
                false,
                &mut cols,
                false,
            );
            col2im(
                &cols,
                cout,
                lout,
                k,
                stride,
                pad,
                len,
                &mut out[bi * cout * lout..(bi + 1) * cout * lout],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_exact_mut(lout).enumerate() {
                let co = i % cout;
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let t = Tensor::new(vec![batch, cout, lout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            "conv_transpose1d",
            t,
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rank()];
        if perm.len() != xv.rank()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} for {:?}", xv.dims()),
            ));
        }
        let (data, dims) = permute_data(xv.data(), xv.dims(), perm);
        let t = Tensor::new(dims, data)?;
        let rg = self.rg(x);
        self.push(
            "permute",
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(x).rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::shape("transpose", format!("axes {a},{b}")));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims().to_vec();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(Error::shape(
                "slice",
                format!("{d:?} axis {axis} [{start}, {})", start + len),
            ));
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d[axis] * inner;
            data.extend_from_slice(&xv.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut od = d;
        od[axis] = len;
        let t = Tensor::new(od, data)?;
        let rg = self.rg(x);
        self.push("slice", t, Op::Slice { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let d0 = self.dims(xs[0]).to_vec();
        if axis >= d0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {d0:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let d = self.dims(x);
            if d.len() != d0.len()
                || d.iter()
                    .zip(&d0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{d:?} vs {d0:?}")));
            }
            total += d[axis];
        }
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let a = v.dims()[axis];
                data.extend_from_slice(&v.data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut od = d0;
        od[axis] = total;
        let t = Tensor::new(od, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(
            "concat",
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Selects slices along axis 0.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims().to_vec();
        let inner: usize = d[1..].iter().product();
        if idx.is_empty() {
            return Err(Error::shape("index_select", "no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= d[0] {
                return Err(Error::shape(
                    "index_select",
                    format!("index {i} >= {}", d[0]),
                ));
            }
            data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let mut od = d;
        od[0] = idx.len();
        let t = Tensor::new(od, data)?;
        let rg = self.rg(x);
        self.push(
            "index_select",
            t,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Forward value `q`; the backward pass hands the output gradient to `z`
    /// unchanged and nothing to `q`.
    pub fn straight_through(&mut self, z: Var, q: &Tensor) -> Result<Var> {
        if self.dims(z) != q.dims() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.dims(z), q.dims()),
            ));
        }
        let rg = self.rg(z);
        self.push("straight_through", q.clone(), Op::StraightThrough { z }, rg)
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.dims(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            params: self.params.clone(),
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let m = av.len() / k;
                let n = g.last_dim();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), !tb, &mut da, false);
                    acc(grads, *a, Tensor::new(av.dims().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        gemm(n, m, k, gd, true, av.data(), false, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    }
                    acc(grads, *b, Tensor::new(bv.dims().to_vec(), db)?);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gdims = g.dims();
                let (batch, m, n) = (gdims[0], gdims[1], gdims[2]);
                let k = av.len() / (batch * m);
                if self.rg(*a) {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let out = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, bs, *tb, gs, true, out, false);
                        } else {
                            gemm(m, n, k, gs, false, bs, !tb, out, false);
                        }
                    }
                    acc(grads, *a, Tensor::new(av.dims().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, gs, true, as_, *ta, out, false);
                        } else {
                            gemm(k, m, n, as_, !ta, gs, false, out, false);
                        }
                    }
                    acc(grads, *b, Tensor::new(bv.dims().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Tensor::new(av.dims().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Tensor::new(bv.dims().to_vec(), d)?);
                }
            }
            Op::AddBias { x, b } => {
                acc(grads, *x, g.clone());
                if self.rg(*b) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(grads, *b, Tensor::new(self.dims(*b).to_vec(), db)?);
                }
            }
            Op::Scale { x, s } => acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar { x } => acc(grads, *x, g.clone()),
            Op::Unary { x, f } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data().iter().zip(node.value.data()))
                    .map(|(&gv, (&xi, &yi))| gv * f.derivative(xi, yi))
                    .collect();
                acc(grads, *x, Tensor::new(xv.dims().to_vec(), d)?);
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.rows().zip(gd.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(y.dims().to_vec(), dx)?);
            }
            Op::LayerNorm { x, w, b, rstd } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let n = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, (row, grow)) in xv.rows().zip(gd.chunks_exact(n)).enumerate() {
                    let mean = row.iter().sum::<f32>() / n as f32;
                    let rs = rstd[r];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rs;
                        dxhat[j] = grow[j] * wv[j];
                        dw[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / n as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, Tensor::new(xv.dims().to_vec(), dx)?);
                acc(grads, *w, Tensor::new(self.dims(*w).to_vec(), dw)?);
                acc(grads, *b, Tensor::new(self.dims(*b).to_vec(), db)?);
            }
            Op::Embedding { w, ids } => {
                let wd = self.dims(*w).to_vec();
                let d = wd[1];
                let mut dw = vec![0.0; wd[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dw[id * d + j] += gd[r * d + j];
                    }
                }
                acc(grads, *w, Tensor::new(wd, dw)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total,
            } => {
                let ld = self.dims(*logits).to_vec();
                let c = ld[1];
                let scale = gd[0] / total;
                let mut dl = vec![0.0; probs.len()];
                for (i, (prow, drow)) in probs
                    .chunks_exact(c)
                    .zip(dl.chunks_exact_mut(c))
                    .enumerate()
                {
                    let wgt = weights[i];
                    if wgt == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        drow[j] = scale * wgt * prow[j];
                    }
                    drow[targets[i]] -= scale * wgt;
                }
                acc(grads, *logits, Tensor::new(ld, dl)?);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xd = self.dims(*x).to_vec();
                let wd = self.dims(*w).to_vec();
                let (batch, cin, len) = (xd[0], xd[1], xd[2]);
                let (cout, k) = (wd[0], wd[2]);
                let lout = g.dims()[2];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![0.0; lout * cin * k];
                let mut dcols = vec![0.0; lout * cin * k];
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..batch {
                    let gs = &gd[bi * cout * lout..(bi + 1) * cout * lout];
                    if self.rg(*w) {
                        im2col(
                            &xv[bi * cin * len..(bi + 1) * cin * len],
                            cin,
                            len,
                            k,
                            *stride,
                            *pad,
                            lout,
                            &mut cols,
                        );
                        gemm(cout, lout, cin * k, gs, false, &cols, false, &mut dw, true);
                    }
                    if self.rg(*x) {
                        gemm(lout, cout, cin * k, gs, true, wv, false, &mut dcols, false);
                        col2im(
                            &dcols,
                            cin,
                            len,
                            k,
                            *stride,
                            *pad,
                            lout,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                        );
                    }
                }
                acc(grads, *x, Tensor::new(xd, dx)?);
                acc(grads, *w, Tensor::new(wd, dw)?);
                if let Some(b) = b {
                    let mut dbias = vec![0.0; cout];
                    for (i, chunk) in gd.chunks_exact(lout).enumerate() {
                        dbias[i % cout] += chunk.iter().sum::<f32>();
                    }
                    acc(grads, *b, Tensor::new(vec![cout], dbias)?);
                }
            }
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xd = self.dims(*x).to_vec();
                let wd = self.dims(*w).to_vec();
                let (batch, cin, len) = (xd[0], xd[1], xd[2]);
                let (cout, k) = (wd[1], wd[2]);
                let lout = g.dims()[2];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dcols = vec![0.0; len * cout * k];
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..batch {
                    let gs = &gd[bi * cout * lout..(bi + 1) * cout * lout];
                    im2col(gs, cout, lout, k, *stride, *pad, len, &mut dcols);
                    if self.rg(*x) {
                        gemm(
                            cin,
                            cout * k,
                            len,
                            wv,
                            false,
                            &dcols,
                            true,
                            &mut dx[bi * cin * len..(bi + 1) * cin * len],
                            false,
                        );
                    }
                    if self.rg(*w) {
                        gemm(
                            cin,
                            len,
                            cout * k,
                            &xv[bi * cin * len..(bi + 1) * cin * len],
                            false,
                            &dcols,
                            false,
                            &mut dw,
                            true,
                        );
                    }
                }
                acc(grads, *x, Tensor::new(xd, dx)?);
                acc(grads, *w, Tensor::new(wd, dw)?);
                if let Some(b) = b {
                    let mut dbias = vec![0.0; cout];
                    for (i, chunk) in gd.chunks_exact(lout).enumerate() {
                        dbias[i % cout] += chunk.iter().sum::<f32>();
                    }
                    acc(grads, *b, Tensor::new(vec![cout], dbias)?);
                }
            }
            Op::Reshape { x } => {
                let t = g.clone().reshape(self.dims(*x))?;
                acc(grads, *x, t);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (data, dims) = permute_data(gd, g.dims(), &inv);
                acc(grads, *x, Tensor::new(dims, data)?);
            }
            Op::Slice { x, axis, start } => {
                let xd = self.dims(*x).to_vec();
                let len = g.dims()[*axis];
                let outer: usize = xd[..*axis].iter().product();
                let inner: usize = xd[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * xd[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(grads, *x, Tensor::new(xd, dx)?);
            }
            Op::Concat { xs, axis } => {
                let od = g.dims();
                let total = od[*axis];
                let outer: usize = od[..*axis].iter().product();
                let inner: usize = od[axis + 1..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let xd = self.dims(x).to_vec();
                    let a = xd[*axis];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            let s = o * total * inner + offset * inner;
                            dx.extend_from_slice(&gd[s..s + a * inner]);
                        }
                        acc(grads, x, Tensor::new(xd, dx)?);
                    }
                    offset += a;
                }
            }
            Op::IndexSelect { x, idx } => {
                let xd = self.dims(*x).to_vec();
                let inner: usize = xd[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += gd[r * inner + j];
                    }
                }
                acc(grads, *x, Tensor::new(xd, dx)?);
            }
            Op::Sum { x } => {
                acc(grads, *x, Tensor::full(self.dims(*x), gd[0]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f32;
                acc(grads, *x, Tensor::full(self.dims(*x), gd[0] / n));
            }
            Op::Rope { x, cos, sin } => {
                let d = g.dims();
                let hd = d[d.len() - 1];
                let t_len = d[d.len() - 2];
                let mut dx = gd.to_vec();
                rotate(&mut dx, t_len, hd, cos, sin, true);
                acc(grads, *x, Tensor::new(d.to_vec(), dx)?);
            }
            Op::StraightThrough { z } => acc(grads, *z, g.clone()),
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = op.backward(&ins, &node.value, g)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Gradient(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        outs.len(),
                        inputs.len()
                    )));
                }
                for (&v, o) in inputs.iter().zip(outs) {
                    if let Some(t) = o {
                        if t.dims() != self.dims(v) {
                            return Err(Error::shape(
                                op.name(),
                                "gradient shape differs from input",
                            ));
                        }
                        acc(grads, v, t);
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Unary { f, .. } => f.name(),
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvT1d { .. } => "conv_transpose1d",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::IndexSelect { .. } => "index_select",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Rope { .. } => "rope",
        Op::StraightThrough { .. } => "straight_through",
        Op::Custom { op, .. } => op.name(),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    params: Vec<(String, Var)>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`. Nodes that require a gradient but did not
    /// influence the loss get zeros; detached nodes are an error.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Gradient(format!(
                "node {} is detached from the gradient tape",
                v.0
            )));
        }
        Ok(match self.grads.get(v.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(&self.dims[v.0]),
        })
    }

    /// Gradients of all named parameters.
    pub fn params(&self) -> Result<HashMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(n, v)| Ok((n.clone(), self.wrt(*v)?)))
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    cols: &mut [f32],
) {
    let width = cin * k;
    for l in 0..lout {
        let row = &mut cols[l * width..(l + 1) * width];
        for ci in 0..cin {
            for kk in 0..k {
                let pos = (l * stride + kk) as isize - pad as isize;
                row[ci * k + kk] = if pos >= 0 && (pos as usize) < len {
                    x[ci * len + pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]; overwrites `out`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lcols: usize,
    out: &mut [f32],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let width = c * k;
    for l in 0..lcols {
        let row = &cols[l * width..(l + 1) * width];
        for ci in 0..c {
            for kk in 0..k {
                let pos = (l * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    out[ci * len + pos as usize] += row[ci * k + kk];
                }
            }
        }
    }
}

fn rotate(data: &mut [f32], t_len: usize, hd: usize, cos: &[f32], sin: &[f32], inverse: bool) {
    let half = hd / 2;
    for (r, row) in data.chunks_exact_mut(hd).enumerate() {
        let t = r % t_len;
        for i in 0..half {
            let (c, s) = (cos[t * half + i], sin[t * half + i]);
            let s = if inverse { -s } else { s };
            let (a, b) = (row[i], row[i + half]);
            row[i] = a * c - b * s;
            row[i + half] = a * s + b * c;
        }
    }
}

fn permute_data(data: &[f32], dims: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = dims.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let od: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let os: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&os).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < od[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, od)
}
