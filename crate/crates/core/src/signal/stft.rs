use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, usize, usize), Arc<StftPlan>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// Hann-windowed magnitude STFT at one resolution, computed in f64.
///
/// Frame `f` covers samples `[f·hop, f·hop + window)`, zero-padded to
/// `fft_size`. Bins `0..=fft_size/2` are kept.
pub struct StftPlan {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn get(fft_size: usize, hop: usize, window: usize) -> Result<Arc<StftPlan>> {
        if fft_size < 2 || hop == 0 || window == 0 || window > fft_size {
            return Err(Error::invalid(format!(
                "stft: need 0 < window <= fft_size and hop > 0 (fft {fft_size}, hop {hop}, window {window})"
            )));
        }
        Ok(PLANS.with(|p| {
            let (planner, cache) = &mut *p.borrow_mut();
            cache
                .entry((fft_size, hop, window))
                .or_insert_with(|| {
                    // periodic Hann
                    let w = (0..window)
                        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
                        .collect();
                    Arc::new(StftPlan {
                        fft_size,
                        hop,
                        window: w,
                        forward: planner.plan_fft_forward(fft_size),
                        inverse: planner.plan_fft_inverse(fft_size),
                    })
                })
                .clone()
        }))
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.window.len() {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than one {}-sample window",
                self.window.len()
            )));
        }
        Ok((len - self.window.len()) / self.hop + 1)
    }

    /// Complex spectra of every frame, `frames × bins`.
    fn spectra(&self, x: &[f32]) -> Result<Vec<Complex64>> {
        let frames = self.frames(x.len())?;
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for f in 0..frames {
            let start = f * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, &w) in self.window.iter().enumerate() {
                buf[i].re = x[start + i] as f64 * w;
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    pub fn magnitudes(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.spectra(x)?.iter().map(|c| c.norm() as f32).collect())
    }

    /// Vector-Jacobian product of [`Self::magnitudes`]: the input gradient
    /// given `grad` over `frames × bins` magnitudes.
    fn magnitude_vjp(&self, x: &[f32], grad: &[f32]) -> Result<Vec<f32>> {
        let spectra = self.spectra(x)?;
        let bins = self.bins();
        let mut dx = vec![0.0f64; x.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for (f, (spec, g)) in spectra
            .chunks_exact(bins)
            .zip(grad.chunks_exact(bins))
            .enumerate()
        {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for k in 0..bins {
                let m = spec[k].norm();
                if m > 0.0 {
                    // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|
                    buf[k] = spec[k] * (g[k] as f64 / m);
                }
            }
            // dx_i = w_i · Re Σ_k G_k e^{+2πi·ki/n}, an unnormalized inverse DFT
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for (i, &w) in self.window.iter().enumerate() {
                dx[start + i] += w * buf[i].re;
            }
        }
        Ok(dx.into_iter().map(|v| v as f32).collect())
    }
}

/// Magnitude spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// Row-major `frames × bins`.
    pub magnitudes: Vec<f32>,
    pub frames: usize,
    pub bins: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
}

impl Spectrogram {
    pub fn frame(&self, f: usize) -> &[f32] {
        &self.magnitudes[f * self.bins..(f + 1) * self.bins]
    }

    /// Magnitudes summed over frames.
    pub fn summed(&self) -> Vec<f32> {
        let mut acc = vec![0.0; self.bins];
        for f in 0..self.frames {
            for (a, m) in acc.iter_mut().zip(self.frame(f)) {
                *a += m;
            }
        }
        acc
    }

    pub fn bin_hz(&self, bin: usize, sample_rate: u32) -> f32 {
        bin as f32 * sample_rate as f32 / self.fft_size as f32
    }
}

/// Hann-windowed magnitude STFT of `w`.
pub fn stft(w: &Waveform, fft_size: usize, hop: usize, window: usize) -> Result<Spectrogram> {
    if fft_size > w.len() {
        return Err(Error::invalid(format!(
            "fft size {fft_size} exceeds signal length {}",
            w.len()
        )));
    }
    let plan = StftPlan::get(fft_size, hop, window)?;
    let frames = plan.frames(w.len())?;
    Ok(Spectrogram {
        magnitudes: plan.magnitudes(w.samples())?,
        frames,
        bins: plan.bins(),
        fft_size,
        hop,
        window,
    })
}

struct StftMagOp {
    plan: Arc<StftPlan>,
}

impl CustomOp for StftMagOp {
    fn name(&self) -> &'static str {
        "stft_magnitude"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let len = x.last_dim();
        let per = output.len() / (x.len() / len);
        let mut dx = Vec::with_capacity(x.len());
        for (row, g) in x.rows().zip(grad.data().chunks_exact(per)) {
            dx.extend(self.plan.magnitude_vjp(row, g)?);
        }
        Ok(vec![Some(Tensor::new(x.dims().to_vec(), dx)?)])
    }
}

/// Differentiable magnitude STFT of each row of `x [B, L]` → `[B, frames, bins]`.
pub fn stft_magnitude(
    g: &mut Graph,
    x: Var,
    fft_size: usize,
    hop: usize,
    window: usize,
) -> Result<Var> {
    let plan = StftPlan::get(fft_size, hop, window)?;
    let xv = g.value(x);
    if xv.rank() != 2 {
        return Err(Error::shape(
            "stft_magnitude",
            format!("expected [B, L], got {:?}", xv.dims()),
        ));
    }
    let (batch, len) = (xv.dims()[0], xv.dims()[1]);
    if fft_size > len {
        return Err(Error::invalid(format!(
            "fft size {fft_size} exceeds signal length {len}"
        )));
    }
    let frames = plan.frames(len)?;
    let mut data = Vec::with_capacity(batch * frames * plan.bins());
    for row in xv.rows() {
        data.extend(plan.magnitudes(row)?);
    }
    let value = Tensor::new(vec![batch, frames, plan.bins()], data)?;
    g.custom(Arc::new(StftMagOp { plan }), &[x], value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_magnitudes() {
        let w = Waveform::new(vec![0.0; 512], 16000).unwrap();
        let s = stft(&w, 128, 32, 128).unwrap();
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
        assert_eq!(s.bins, 65);
        assert_eq!(s.frames, (512 - 128) / 32 + 1);
    }

    #[test]
    fn bin_centred_sinusoid_concentrates_energy() {
        // Hann leakage: a bin-centred tone puts 1/1.5 of its window energy in the
        // centre bin and 1/6 in each neighbour, i.e. all of it within k±1.
        let n = 256;
        let k = 19;
        let x: Vec<f32> = (0..2048)
            .map(|i| (2.0 * PI * (k * i) as f64 / n as f64).sin() as f32)
            .collect();
        let s = stft(&Waveform::new(x, 16000).unwrap(), n, 64, n).unwrap();
        for f in 0..s.frames {
            let fr = s.frame(f);
            let total: f32 = fr.iter().map(|m| m * m).sum();
            let near: f32 = fr[k - 1..=k + 1].iter().map(|m| m * m).sum();
            assert!(near / total >= 0.9, "frame {f}: {}", near / total);
        }
    }

    #[test]
    fn magnitude_is_linear_in_gain() {
        let x: Vec<f32> = (0..1000)
            .map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5)
            .collect();
        let a = stft(&Waveform::new(x.clone(), 16000).unwrap(), 206, 52, 206).unwrap();
        let b = stft(
            &Waveform::new(x.iter().map(|v| 2.0 * v).collect(), 16000).unwrap(),
            206,
            52,
            206,
        )
        .unwrap();
        for (ma, mb) in a.magnitudes.iter().zip(&b.magnitudes) {
            assert!((mb - 2.0 * ma).abs() <= 1e-5 * mb.abs().max(1e-3));
        }
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let w = Waveform::new(vec![0.1; 50], 16000).unwrap();
        assert!(stft(&w, 78, 20, 78).is_err());
    }
}
