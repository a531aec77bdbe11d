//! Finite-difference checks for every differentiable op of the tape.
//! Each group returns its outcomes so callers decide how to report them.

use atck::numerics::gradcheck::{self, GradCheck};
use atck::numerics::{Graph, Tensor, Unary, Var};
use atck::util::rng;
use atck::Result;

// At 32-bit precision a 1e-3 step leaves ~1e-4 absolute rounding noise in the
// difference quotient; 1e-2 keeps both rounding and truncation below 1e-4.
const H: f32 = 1e-2;
const FLOOR: f32 = 1e-2;
const TOL: f32 = 1e-3;

fn rand(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, 1.0, &mut rng(seed))
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub max_rel_err: f32,
    pub tol: f32,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn push(out: &mut Vec<Outcome>, name: &str, r: GradCheck, tol: f32) {
    out.push(Outcome {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        tol,
    });
}

fn run<F>(out: &mut Vec<Outcome>, name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = gradcheck::check(inputs, H, FLOOR, f).unwrap();
    push(out, name, r, TOL);
}

pub fn matmul_and_bmm() -> Vec<Outcome> {
    let mut out = Vec::new();
    run(
        &mut out,
        "matmul",
        &[rand(&[2, 3, 4], 1), rand(&[4, 5], 2)],
        |g, v| g.matmul(v[0], v[1], false),
    );
    run(
        &mut out,
        "matmul_t",
        &[rand(&[3, 4], 4), rand(&[5, 4], 5)],
        |g, v| g.matmul(v[0], v[1], true),
    );
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (m, k, n) = (3, 4, 5);
        let a = if ta { [2, k, m] } else { [2, m, k] };
        let b = if tb { [2, n, k] } else { [2, k, n] };
        run(
            &mut out,
            &format!("bmm {ta} {tb}"),
            &[rand(&a, 7), rand(&b, 8)],
            |g, v| g.bmm(v[0], v[1], ta, tb),
        );
    }
    out
}

pub fn elementwise() -> Vec<Outcome> {
    let mut out = Vec::new();
    let a = rand(&[3, 4], 10);
    let b = rand(&[3, 4], 11);
    run(&mut out, "add", &[a.clone(), b.clone()], |g, v| {
        g.add(v[0], v[1])
    });
    run(&mut out, "sub", &[a.clone(), b.clone()], |g, v| {
        g.sub(v[0], v[1])
    });
    run(&mut out, "mul", &[a.clone(), b.clone()], |g, v| {
        g.mul(v[0], v[1])
    });
    run(
        &mut out,
        "add_bias",
        &[a.clone(), rand(&[4], 15)],
        |g, v| g.add_bias(v[0], v[1]),
    );
    run(
        &mut out,
        "scale+add_scalar",
        std::slice::from_ref(&a),
        |g, v| {
            let y = g.scale(v[0], -1.7)?;
            g.add_scalar(y, 0.3)
        },
    );
    run(&mut out, "mean", std::slice::from_ref(&a), |g, v| {
        let y = g.square(v[0])?;
        g.mean(y)
    });
    out
}

pub fn unary_ops() -> Vec<Outcome> {
    let mut out = Vec::new();
    // keep inputs away from the kinks of abs / relu / leaky relu
    let x = rand(&[12], 20).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let pos = x.map(|v| v.abs() + 0.5);
    for f in [
        Unary::Tanh,
        Unary::Gelu,
        Unary::Silu,
        Unary::Relu,
        Unary::LeakyRelu(0.1),
        Unary::Sigmoid,
        Unary::Abs,
        Unary::Exp,
        Unary::Square,
    ] {
        run(
            &mut out,
            &format!("{f:?}"),
            std::slice::from_ref(&x),
            |g, v| g.unary(v[0], f),
        );
    }
    for f in [Unary::Log, Unary::Sqrt] {
        run(
            &mut out,
            &format!("{f:?}"),
            std::slice::from_ref(&pos),
            |g, v| g.unary(v[0], f),
        );
    }
    out
}

pub fn softmax_layer_norm_embedding_ce() -> Vec<Outcome> {
    let mut out = Vec::new();
    run(&mut out, "softmax", &[rand(&[3, 5], 30)], |g, v| {
        g.softmax(v[0], None)
    });
    let mask: Vec<bool> = (0..25).map(|i| (i % 5) <= (i / 5)).collect();
    run(
        &mut out,
        "masked softmax",
        &[rand(&[2, 5, 5], 32)],
        |g, v| g.softmax(v[0], Some(&mask)),
    );
    run(
        &mut out,
        "layer_norm",
        &[rand(&[3, 6], 34), rand(&[6], 35), rand(&[6], 36)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    run(&mut out, "embedding", &[rand(&[5, 3], 38)], |g, v| {
        g.embedding(v[0], &[4, 0, 4, 2])
    });
    run(&mut out, "cross_entropy", &[rand(&[4, 6], 40)], |g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 3], &[1.0, 0.0, 2.0, 0.5])
    });
    out
}

pub fn convolutions() -> Vec<Outcome> {
    let mut out = Vec::new();
    run(
        &mut out,
        "conv1d",
        &[
            rand(&[2, 3, 20], 50),
            rand(&[4, 3, 6], 51).map(|v| v * 0.3),
            rand(&[4], 52),
        ],
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), 3, 2),
    );
    run(
        &mut out,
        "conv_transpose1d",
        &[
            rand(&[2, 3, 7], 54),
            rand(&[3, 2, 6], 55).map(|v| v * 0.3),
            rand(&[2], 56),
        ],
        |g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), 3, 1),
    );
    out
}

pub fn shape_ops_and_rope() -> Vec<Outcome> {
    let mut out = Vec::new();
    run(
        &mut out,
        "reshape+permute",
        &[rand(&[2, 3, 4], 60)],
        |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            g.reshape(y, &[4, 6])
        },
    );
    run(
        &mut out,
        "slice+concat",
        &[rand(&[3, 5], 62), rand(&[3, 2], 63)],
        |g, v| {
            let s = g.slice(v[0], 1, 1, 3)?;
            g.concat(&[s, v[1]], 1)
        },
    );
    run(&mut out, "index_select", &[rand(&[4, 3], 65)], |g, v| {
        g.index_select(v[0], &[3, 3, 0])
    });
    run(&mut out, "rope", &[rand(&[2, 5, 8], 67)], |g, v| {
        g.rope(v[0], &[0, 1, 2, 7, 9], 10000.0)
    });
    out
}

pub fn two_layer_mlp() -> Vec<Outcome> {
    let mut out = Vec::new();
    let inputs = [
        rand(&[4, 5], 70),
        rand(&[5, 8], 71).map(|v| v * 0.5),
        rand(&[8], 72),
        rand(&[8, 3], 73).map(|v| v * 0.5),
    ];
    let mlp = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1], false)?;
        let h = g.add_bias(h, v[2])?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, v[3], false)?;
        g.cross_entropy(o, &[0, 2, 1, 2], &[1.0; 4])
    };
    run(&mut out, "mlp", &inputs, mlp);
    out
}

/// Whole transformer: causal token sequence and a full-mask sequence with
/// continuous inputs in one padded batch, every parameter checked.
pub fn small_transformer() -> Vec<Outcome> {
    use atck::lm::{build_mask, Example, Lm, LmConfig, MaskKind, PositionInput, VocabLayout};
    use atck::numerics::Bound;
    use std::collections::HashMap;

    let mut out = Vec::new();
    let cfg = LmConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        d_ffn: 8,
        max_seq_len: 16,
        init_std: 0.3,
        ..Default::default()
    };
    let vocab = VocabLayout::new(4, 3, 4, 3).unwrap();
    let lm = Lm::init(&cfg, vocab, 2, 5).unwrap();
    let names: Vec<String> = lm.params.names().cloned().collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| lm.params.get(n).unwrap().clone())
        .collect();

    let a_in: Vec<PositionInput> = [0, 1, 7, 8, 9]
        .iter()
        .map(|&i| PositionInput::Token(i))
        .collect();
    let a_mask = build_mask(MaskKind::Causal, 5, &[]).unwrap();
    let a_t = [0, 7, 8, 9, 0];
    let a_l = [false, true, true, true, false];
    let mut b_in = vec![
        PositionInput::Token(2),
        PositionInput::Token(vocab.target_token(1).unwrap()),
    ];
    b_in.push(PositionInput::Continuous {
        vector: vec![0.5, -1.0],
        layer: 1,
    });
    b_in.push(PositionInput::Continuous {
        vector: vec![-0.3, 0.8],
        layer: 1,
    });
    let b_mask = build_mask(MaskKind::Full, 4, &[]).unwrap();
    let b_t = [0, 0, 12, 14];
    let b_l = [false, false, true, true];

    // A 2-layer stack is curved enough that plain differences are
    // truncation-limited at h=1e-2 and rounding-limited below it, so the
    // numeric side is extrapolated and the composite gets a 5e-3 budget.
    let r = gradcheck::check_extrapolated(&inputs, 4e-2, FLOOR, |g: &mut Graph, v: &[Var]| {
        let p = Bound::from_vars(
            names
                .iter()
                .cloned()
                .zip(v.iter().copied())
                .collect::<HashMap<_, _>>(),
        );
        let batch = [
            Example {
                inputs: &a_in,
                mask: &a_mask,
                targets: &a_t,
                loss_mask: &a_l,
                block: vocab.control_range().start..vocab.layer_range(1).unwrap().end,
            },
            Example {
                inputs: &b_in,
                mask: &b_mask,
                targets: &b_t,
                loss_mask: &b_l,
                block: vocab.layer_range(1).unwrap(),
            },
        ];
        let losses = lm.example_losses(g, &p, &batch)?;
        g.add(losses[0], losses[1])
    })
    .unwrap();
    push(&mut out, "transformer", r, 5e-3);
    out
}

/// Direct-DFT Hann magnitude STFT in f64, independent of the FFT path.
fn stft_mag_f64(x: &[f64], n: usize, hop: usize, win: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let frames = (x.len() - win) / hop + 1;
    let mut out = Vec::new();
    for f in 0..frames {
        for k in 0..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..win {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos();
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += w * x[f * hop + i] * a.cos();
                im += w * x[f * hop + i] * a.sin();
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    out
}

fn ms_loss_f64(x: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for n in [78usize, 126, 206, 334, 542, 876, 1418, 2296] {
        if n > x.len() {
            continue;
        }
        let hop = (n as f64 / 4.0).round() as usize;
        let (sx, sy) = (stft_mag_f64(x, n, hop, n), stft_mag_f64(y, n, hop, n));
        let m = sx.len() as f64;
        total += sx.iter().zip(&sy).map(|(a, b)| (a - b).abs()).sum::<f64>() / m;
        total += sx
            .iter()
            .zip(&sy)
            .map(|(a, b)| ((a + 1e-5).ln() - (b + 1e-5).ln()).abs())
            .sum::<f64>()
            / m;
    }
    total
}

/// Analytic tape gradients against central differences of a 64-bit reference.
///
/// At 32-bit precision the rounding of O(1) spectral magnitudes alone leaves
/// ~5e-5 absolute noise in a difference quotient, above what a 1e-3 relative
/// check can absorb, so the numeric side runs in f64.
fn check_against_f64(
    out: &mut Vec<Outcome>,
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    f: impl Fn(&[Vec<f64>]) -> f64,
) {
    const H64: f64 = 1e-5;
    let scale = analytic.iter().map(|t| t.max_abs()).fold(0.0f32, f32::max);
    let floor = 1e-3 * scale;
    let mut xs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut worst = (0.0f32, 0, 0);
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i][j];
            xs[i][j] = orig + H64;
            let p = f(&xs);
            xs[i][j] = orig - H64;
            let m = f(&xs);
            xs[i][j] = orig;
            let numeric = ((p - m) / (2.0 * H64)) as f32;
            let e = gradcheck::rel_err(analytic[i].data()[j], numeric, floor);
            if e > worst.0 {
                worst = (e, i, j);
            }
        }
    }
    out.push(Outcome {
        name: format!("{name} (worst at input {} coord {})", worst.1, worst.2),
        max_rel_err: worst.0,
        tol: TOL,
    });
}

pub fn stft_magnitude_and_multiscale_loss() -> Vec<Outcome> {
    use atck::signal::{multiscale_stft_loss, stft_magnitude};

    let mut out = Vec::new();
    let x = rand(&[2, 100], 80);
    let w = rand(&[2, 10, 17], 81);
    let mut g = Graph::new();
    let xv = g.var(x.clone()).unwrap();
    let s = stft_magnitude(&mut g, xv, 32, 8, 24).unwrap();
    let wv = g.input(w.clone()).unwrap();
    let p = g.mul(s, wv).unwrap();
    let l = g.sum(p).unwrap();
    let grad = g.backward(l).unwrap().wrt(xv).unwrap();
    check_against_f64(&mut out, "stft_magnitude", &[x], &[grad], |xs| {
        xs[0]
            .chunks(100)
            .flat_map(|row| stft_mag_f64(row, 32, 8, 24))
            .zip(w.data())
            .map(|(m, &wk)| m * wk as f64)
            .sum()
    });

    // 300 samples keeps the 78, 126 and 206 scales
    let y = rand(&[1, 300], 82);
    let z = rand(&[1, 300], 83);
    let mut g = Graph::new();
    let (yv, zv) = (g.var(y.clone()).unwrap(), g.var(z.clone()).unwrap());
    let l = multiscale_stft_loss(&mut g, yv, zv).unwrap();
    let grads = g.backward(l).unwrap();
    let analytic = [grads.wrt(yv).unwrap(), grads.wrt(zv).unwrap()];
    let l64 = ms_loss_f64(
        &y.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &z.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    let value_err = ((g.value(l).item() as f64 - l64).abs() / l64) as f32;
    out.push(Outcome {
        name: "multiscale_stft_loss value".into(),
        max_rel_err: value_err,
        tol: 1e-5,
    });
    check_against_f64(&mut out, "multiscale_stft_loss", &[y, z], &analytic, |xs| {
        ms_loss_f64(&xs[0], &xs[1])
    });
    out
}

pub fn all() -> Vec<Outcome> {
    [
        matmul_and_bmm,
        elementwise,
        unary_ops,
        softmax_layer_norm_embedding_ce,
        convolutions,
        shape_ops_and_rope,
        two_layer_mlp,
        small_transformer,
        stft_magnitude_and_multiscale_loss,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
