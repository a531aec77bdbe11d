use super::stft::stft_magnitude;
use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// FFT sizes of the multi-scale spectral loss; window = FFT size and
/// hop = round(FFT size / 4).
pub const STFT_SCALES: [usize; 8] = [78, 126, 206, 334, 542, 876, 1418, 2296];

const LOG_EPS: f32 = 1e-5;

/// `(fft, hop)` of every scale that fits a signal of `len` samples. Larger
/// scales are dropped; a signal shorter than the smallest scale is an error.
pub fn stft_scales(len: usize) -> Result<Vec<(usize, usize)>> {
    let scales: Vec<_> = STFT_SCALES
        .iter()
        .filter(|&&n| n <= len)
        .map(|&n| (n, (n as f32 / 4.0).round() as usize))
        .collect();
    if scales.is_empty() {
        return Err(Error::invalid(format!(
            "signal of {len} samples is shorter than the smallest STFT scale {}",
            STFT_SCALES[0]
        )));
    }
    Ok(scales)
}

/// Σ over scales of `mean|S(x) − S(y)| + mean|log(S(x)+ε) − log(S(y)+ε)|`
/// for `x, y : [B, L]`.
pub fn multiscale_stft_loss(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.dims(x) != g.dims(y) {
        return Err(Error::invalid(format!(
            "stft loss length mismatch: {:?} vs {:?}",
            g.dims(x),
            g.dims(y)
        )));
    }
    let len = *g
        .dims(x)
        .last()
        .ok_or_else(|| Error::invalid("stft loss of a scalar"))?;
    let mut total: Option<Var> = None;
    for (n, hop) in stft_scales(len)? {
        let sx = stft_magnitude(g, x, n, hop, n)?;
        let sy = stft_magnitude(g, y, n, hop, n)?;
        let d = g.sub(sx, sy)?;
        let d = g.abs(d)?;
        let lin = g.mean(d)?;
        let lx = g.add_scalar(sx, LOG_EPS)?;
        let lx = g.log(lx)?;
        let ly = g.add_scalar(sy, LOG_EPS)?;
        let ly = g.log(ly)?;
        let d = g.sub(lx, ly)?;
        let d = g.abs(d)?;
        let lg = g.mean(d)?;
        let term = g.add(lin, lg)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Loss value for two waveforms.
pub fn multiscale_stft_loss_value(x: &Waveform, y: &Waveform) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "stft loss length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let mut g = Graph::new();
    let a = g.input(Tensor::new(vec![1, x.len()], x.samples().to_vec())?)?;
    let b = g.input(Tensor::new(vec![1, y.len()], y.samples().to_vec())?)?;
    let l = multiscale_stft_loss(&mut g, a, b)?;
    Ok(g.value(l).item())
}
