use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrameSpec, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Windowed DFT of one frame plus its adjoint.
///
/// The adjoint takes a complex cotangent `G` on the one-sided spectrum
/// (`dL/dRe X + i dL/dIm X`) and returns `dL/dx` for the frame samples.
pub struct StftPlan<T: Real> {
    spec: FrameSpec,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> Clone for StftPlan<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            window: self.window.clone(),
            forward: Arc::clone(&self.forward),
            inverse: Arc::clone(&self.inverse),
        }
    }
}

impl<T: Real> std::fmt::Debug for StftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("spec", &self.spec).finish()
    }
}

impl<T: Real> StftPlan<T> {
    pub fn new(spec: FrameSpec) -> Result<Self> {
        spec.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            spec,
            window: spec.window.coefficients(spec.frame_length),
            forward: planner.plan_fft_forward(spec.fft_size),
            inverse: planner.plan_fft_inverse(spec.fft_size),
        })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Spectrum of one frame (`frame.len() == frame_length`) into `out`
    /// (`n_bins` long). `buf` is scratch of any size.
    pub fn frame_spectrum(&self, frame: &[T], buf: &mut Vec<Complex<T>>, out: &mut [Complex<T>]) {
        debug_assert_eq!(frame.len(), self.spec.frame_length);
        buf.clear();
        buf.extend(
            frame
                .iter()
                .zip(&self.window)
                .map(|(&s, &w)| Complex::new(s * w, T::zero())),
        );
        buf.resize(self.spec.fft_size, Complex::new(T::zero(), T::zero()));
        self.forward.process(buf);
        out.copy_from_slice(&buf[..self.spec.n_bins()]);
    }

    /// Adds the adjoint of [`Self::frame_spectrum`] applied to `cot` into `out`.
    pub fn frame_adjoint(&self, cot: &[Complex<T>], buf: &mut Vec<Complex<T>>, out: &mut [T]) {
        debug_assert_eq!(cot.len(), self.spec.n_bins());
        buf.clear();
        buf.extend_from_slice(cot);
        buf.resize(self.spec.fft_size, Complex::new(T::zero(), T::zero()));
        // unnormalized inverse: sum_k G_k exp(+2 pi i k n / N)
        self.inverse.process(buf);
        for ((o, b), &w) in out.iter_mut().zip(buf.iter()).zip(&self.window) {
            *o = *o + w * b.re;
        }
    }

    pub fn analyze(&self, samples: &[T]) -> Result<Spectrogram<T>> {
        let n_frames = self.spec.n_frames(samples.len())?;
        let f = self.spec.n_bins();
        let mut bins = vec![Complex::new(T::zero(), T::zero()); n_frames * f];
        let mut buf = Vec::with_capacity(self.spec.fft_size);
        for (t, row) in bins.chunks_exact_mut(f).enumerate() {
            let start = self.spec.frame_start(t);
            self.frame_spectrum(&samples[start..start + self.spec.frame_length], &mut buf, row);
        }
        Ok(Spectrogram {
            bins,
            n_frames,
            spec: self.spec,
        })
    }

    pub fn adjoint(&self, cot: &Spectrogram<T>, len: usize) -> Result<Vec<T>> {
        let n_frames = self.spec.n_frames(len)?;
        if cot.n_frames != n_frames || cot.spec.n_bins() != self.spec.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "cotangent has {} frames x {} bins, signal of {len} samples needs {n_frames} x {}",
                cot.n_frames,
                cot.spec.n_bins(),
                self.spec.n_bins()
            )));
        }
        let mut grad = vec![T::zero(); len];
        let mut buf = Vec::with_capacity(self.spec.fft_size);
        for t in 0..n_frames {
            let start = self.spec.frame_start(t);
            self.frame_adjoint(
                cot.frame(t),
                &mut buf,
                &mut grad[start..start + self.spec.frame_length],
            );
        }
        Ok(grad)
    }
}

/// Complex short-time spectrum, `n_frames x n_bins`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T: Real = f64> {
    bins: Vec<Complex<T>>,
    n_frames: usize,
    spec: FrameSpec,
}

impl<T: Real> Spectrogram<T> {
    pub fn from_bins(bins: Vec<Complex<T>>, n_frames: usize, spec: FrameSpec) -> Result<Self> {
        if bins.len() != n_frames * spec.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} bins cannot form {n_frames} frames of {}",
                bins.len(),
                spec.n_bins()
            )));
        }
        Ok(Self {
            bins,
            n_frames,
            spec,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.spec.n_bins()
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn bins(&self) -> &[Complex<T>] {
        &self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex<T>] {
        let f = self.n_bins();
        &self.bins[t * f..(t + 1) * f]
    }

    /// `|X|^2` for every bin.
    pub fn power(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Short-time Fourier transform of a waveform.
pub fn stft<T: Real>(w: &Waveform<T>, spec: &FrameSpec) -> Result<Spectrogram<T>> {
    StftPlan::new(*spec)?.analyze(w.samples())
}

/// Adjoint of [`stft`] for a signal of `len` samples.
pub fn stft_adjoint<T: Real>(cot: &Spectrogram<T>, len: usize) -> Result<Vec<T>> {
    StftPlan::new(*cot.spec())?.adjoint(cot, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Window;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
        Waveform::new((0..n).map(|_| rng.random_range(-0.9..0.9)).collect(), 8000).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_bins() {
        let spec = FrameSpec::new(16, 8).unwrap();
        let s = stft(&Waveform::new(vec![0.0; 64], 8000).unwrap(), &spec).unwrap();
        assert_eq!(s.n_frames(), 7);
        assert!(s.bins().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn exact_bin_sinusoid_concentrates_energy() {
        let spec = FrameSpec::with_fft(32, 32, 32, Window::Rectangular).unwrap();
        let k = 5;
        let x: Vec<f64> = (0..64)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * k as f64 * n as f64 / 32.0).cos())
            .collect();
        let s = stft(&Waveform::new(x, 8000).unwrap(), &spec).unwrap();
        let p = s.power();
        for t in 0..s.n_frames() {
            let row = &p[t * 17..(t + 1) * 17];
            let total: f64 = row.iter().sum();
            assert!(row[k] / total > 1.0 - 1e-12);
        }
    }

    #[test]
    fn too_short_is_rejected() {
        let spec = FrameSpec::new(16, 8).unwrap();
        let w = Waveform::new(vec![0.0; 10], 8000).unwrap();
        assert!(matches!(stft(&w, &spec), Err(Error::TooShort { .. })));
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = FrameSpec::new(24, 10).unwrap();
        let x = random_wave(&mut rng, 80);
        let y = random_wave(&mut rng, 80);
        let (a, b) = (0.37, -0.61);
        let z: Vec<f64> = x.samples().iter().zip(y.samples()).map(|(p, q)| (a * p + b * q) / 2.0).collect();
        let sz = stft(&Waveform::new(z, 8000).unwrap(), &spec).unwrap();
        let sx = stft(&x, &spec).unwrap();
        let sy = stft(&y, &spec).unwrap();
        for ((cz, cx), cy) in sz.bins().iter().zip(sx.bins()).zip(sy.bins()) {
            assert!((cz * 2.0 - (cx * a + cy * b)).norm() < 1e-9);
        }
    }

    #[test]
    fn adjoint_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = FrameSpec::new(16, 8).unwrap();
        let len = 16 + 3 * 8;
        let x = random_wave(&mut rng, len);
        let n_bins = spec.n_bins();
        let cot: Vec<Complex<f64>> = (0..4 * n_bins)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let cot = Spectrogram::from_bins(cot, 4, spec).unwrap();
        let scalar = |s: &[f64]| -> f64 {
            let sp = StftPlan::new(spec).unwrap().analyze(s).unwrap();
            sp.bins().iter().zip(cot.bins()).map(|(a, g)| a.re * g.re + a.im * g.im).sum()
        };
        let grad = stft_adjoint(&cot, len).unwrap();
        let h = 1e-4;
        let mut fd = vec![0.0; len];
        for i in 0..len {
            let mut p = x.samples().to_vec();
            let mut m = x.samples().to_vec();
            p[i] += h;
            m[i] -= h;
            fd[i] = (scalar(&p) - scalar(&m)) / (2.0 * h);
        }
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-6, "relative error {}", num / den);
    }
}
