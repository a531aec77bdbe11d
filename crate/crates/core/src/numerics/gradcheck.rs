//! Central finite-difference checking of reverse-mode gradients.
//!
//! Only forward evaluations feed the numerical side, so the check is
//! independent of every backward rule it validates. Non-scalar outputs are
//! contracted with fixed random weights; the numerical derivative differences
//! the perturbed outputs element by element and accumulates in f64, so
//! outputs a coordinate does not touch cancel exactly.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::util::rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-coordinate relative error over all inputs.
    pub max_rel_err: f32,
    /// Coordinates compared.
    pub checked: usize,
    /// (input, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: (usize, usize, f32, f32),
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is (near) zero from
/// dividing 32-bit rounding noise by a tiny number.
pub fn rel_err(a: f32, n: f32, floor: f32) -> f32 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients of `Σ wₖ·yₖ` (with `y` built by `f`, and
/// `w ≡ 1` for scalar outputs) against central differences with step `h`,
/// for every coordinate of every input.
fn contract(yp: &Tensor, ym: &Tensor, w: &Tensor) -> f64 {
    yp.data()
        .iter()
        .zip(ym.data())
        .zip(w.data())
        .map(|((&a, &b), &wk)| (a - b) as f64 * wk as f64)
        .sum()
}

pub fn check<F>(inputs: &[Tensor], h: f32, floor: f32, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(inputs, h, floor, false, f)
}

/// [`check`] with the numerical side Richardson-extrapolated from steps `h`
/// and `h/2`, `(4·D(h/2) − D(h))/3`, which cancels the `h²` truncation term.
/// For deep compositions whose curvature makes plain central differences at
/// 32-bit precision either truncation- or rounding-limited.
pub fn check_extrapolated<F>(inputs: &[Tensor], h: f32, floor: f32, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(inputs, h, floor, true, f)
}

fn check_with<F>(
    inputs: &[Tensor],
    h: f32,
    floor: f32,
    extrapolate: bool,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.var(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let weights = if g.value(out).len() == 1 {
        Tensor::full(g.dims(out), 1.0)
    } else {
        Tensor::randn(g.dims(out), 1.0, &mut rng(0x6772_6164))
    };
    let w = g.input(weights.clone())?;
    let p = g.mul(out, w)?;
    let loss = g.sum(p)?;
    let grads = g.backward(loss)?;
    let analytic = vars
        .iter()
        .map(|&v| grads.wrt(v))
        .collect::<Result<Vec<_>>>()?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            let mut central = |step: f32| -> Result<f64> {
                let (xp, xm) = (orig + step, orig - step);
                xs[i].data_mut()[j] = xp;
                let yp = eval(&xs)?;
                xs[i].data_mut()[j] = xm;
                let ym = eval(&xs)?;
                xs[i].data_mut()[j] = orig;
                // the representable step, not the nominal 2h
                Ok(contract(&yp, &ym, &weights) / (xp as f64 - xm as f64))
            };
            let numeric = if extrapolate {
                let (d1, d2) = (central(h)?, central(0.5 * h)?);
                ((4.0 * d2 - d1) / 3.0) as f32
            } else {
                central(h)? as f32
            };
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric, floor);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j, a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
