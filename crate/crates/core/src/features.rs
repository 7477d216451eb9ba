//! Log-mel filterbank front end with an exact vector-Jacobian product.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audio::{FrameSpec, StftPlan, Waveform, Window};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndConfig {
    pub frame: FrameSpec,
    pub n_mels: usize,
    pub sample_rate: u32,
    /// Added to mel energies before the log.
    pub log_floor: f64,
}

impl FrontEndConfig {
    /// 32 ms frames, 16 ms shift, zero-padded to twice the frame length.
    pub fn for_rate(sample_rate: u32) -> Self {
        let frame_length = (sample_rate as usize * 32 / 1000).next_power_of_two();
        Self {
            frame: FrameSpec {
                frame_length,
                frame_shift: frame_length / 2,
                fft_size: frame_length * 2,
                window: Window::Hann,
            },
            n_mels: 64,
            sample_rate,
            log_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.n_mels == 0 || self.sample_rate == 0 || !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "front end needs n_mels > 0, a sample rate and a positive log floor".into(),
            ));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone)]
pub struct MelBank<T: Real> {
    /// `(first bin, weights)` per filter.
    filters: Vec<(usize, Vec<T>)>,
    n_bins: usize,
}

impl<T: Real> MelBank<T> {
    pub fn new(n_mels: usize, n_bins: usize, fft_size: usize, sample_rate: u32) -> Self {
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => (start, weights.iter().map(|&(_, w)| T::lit(w)).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        Self { filters, n_bins }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Weight of bin `k` in filter `m`.
    pub fn weight(&self, m: usize, k: usize) -> T {
        let (start, w) = &self.filters[m];
        if k >= *start && k < start + w.len() {
            w[k - start]
        } else {
            T::zero()
        }
    }

    pub fn apply(&self, power: &[T], out: &mut [T]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = crate::scalar::dot(w, &power[*start..*start + w.len()]);
        }
    }

    /// Adds `M^T cot` into `out`.
    pub fn apply_transpose(&self, cot: &[T], out: &mut [T]) {
        for ((start, w), &c) in self.filters.iter().zip(cot) {
            crate::scalar::axpy(c, w, &mut out[*start..*start + w.len()]);
        }
    }
}

/// Intermediate values of one analysed frame.
#[derive(Debug, Clone)]
pub struct FrameCache<T: Real> {
    spectrum: Vec<Complex<T>>,
    energies: Vec<T>,
}

/// Front-end output for a whole signal plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FrontPass<T: Real> {
    /// `n_frames x n_mels` log energies.
    pub rows: Vec<T>,
    pub caches: Vec<FrameCache<T>>,
    pub n_mels: usize,
}

impl<T: Real> FrontPass<T> {
    pub fn n_frames(&self) -> usize {
        self.caches.len()
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.rows[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// Log-mel analysis: window, DFT, power, mel filterbank, `ln(e + floor)`.
#[derive(Debug, Clone)]
pub struct FrontEnd<T: Real> {
    config: FrontEndConfig,
    plan: StftPlan<T>,
    mel: MelBank<T>,
    floor: T,
}

impl<T: Real> FrontEnd<T> {
    pub fn new(config: &FrontEndConfig) -> Result<Self> {
        config.validate()?;
        let plan = StftPlan::new(config.frame)?;
        let mel = MelBank::new(
            config.n_mels,
            config.frame.n_bins(),
            config.frame.fft_size,
            config.sample_rate,
        );
        Ok(Self {
            config: config.clone(),
            plan,
            mel,
            floor: T::lit(config.log_floor),
        })
    }

    pub fn config(&self) -> &FrontEndConfig {
        &self.config
    }

    pub fn frame_spec(&self) -> &FrameSpec {
        &self.config.frame
    }

    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }

    pub fn n_frames(&self, len: usize) -> Result<usize> {
        self.config.frame.n_frames(len)
    }

    /// Analyses one frame of `frame_length` samples, writing its log-mel row.
    pub fn forward_frame(&self, frame: &[T], buf: &mut Vec<Complex<T>>, row: &mut [T]) -> FrameCache<T> {
        let mut spectrum = vec![Complex::new(T::zero(), T::zero()); self.config.frame.n_bins()];
        self.plan.frame_spectrum(frame, buf, &mut spectrum);
        let power: Vec<T> = spectrum.iter().map(|c| c.norm_sqr()).collect();
        let mut energies = vec![T::zero(); self.config.n_mels];
        self.mel.apply(&power, &mut energies);
        for (r, &e) in row.iter_mut().zip(&energies) {
            *r = (e + self.floor).ln();
        }
        FrameCache { spectrum, energies }
    }

    /// Adds the frame's sample gradient for log-mel cotangent `row_cot` into `out`.
    pub fn backward_frame(&self, cache: &FrameCache<T>, row_cot: &[T], buf: &mut Vec<Complex<T>>, out: &mut [T]) {
        let energy_cot: Vec<T> = row_cot
            .iter()
            .zip(&cache.energies)
            .map(|(&c, &e)| c / (e + self.floor))
            .collect();
        let mut power_cot = vec![T::zero(); cache.spectrum.len()];
        self.mel.apply_transpose(&energy_cot, &mut power_cot);
        let two = T::lit(2.0);
        let spec_cot: Vec<Complex<T>> = cache
            .spectrum
            .iter()
            .zip(&power_cot)
            .map(|(x, &g)| x * (two * g))
            .collect();
        self.plan.frame_adjoint(&spec_cot, buf, out);
    }

    pub fn forward(&self, samples: &[T]) -> Result<FrontPass<T>> {
        let n_frames = self.n_frames(samples.len())?;
        let (l, m) = (self.config.frame.frame_length, self.config.n_mels);
        let mut rows = vec![T::zero(); n_frames * m];
        let mut buf = Vec::with_capacity(self.config.frame.fft_size);
        let caches = rows
            .chunks_exact_mut(m)
            .enumerate()
            .map(|(t, row)| {
                let start = self.config.frame.frame_start(t);
                self.forward_frame(&samples[start..start + l], &mut buf, row)
            })
            .collect();
        Ok(FrontPass {
            rows,
            caches,
            n_mels: m,
        })
    }

    /// Adds the sample gradient for row cotangents `cot` (`n_frames x n_mels`) into `grad`.
    pub fn backward_into(&self, pass: &FrontPass<T>, cot: &[T], grad: &mut [T]) {
        let (l, m) = (self.config.frame.frame_length, self.config.n_mels);
        let mut buf = Vec::with_capacity(self.config.frame.fft_size);
        for (t, cache) in pass.caches.iter().enumerate() {
            let c = &cot[t * m..(t + 1) * m];
            if c.iter().all(|v| v.is_zero()) {
                continue;
            }
            let start = self.config.frame.frame_start(t);
            self.backward_frame(cache, c, &mut buf, &mut grad[start..start + l]);
        }
    }
}

/// Feature matrix: one row per analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T: Real = f64> {
    values: Vec<T>,
    dim: usize,
}

impl<T: Real> FeatureSequence<T> {
    pub fn new(values: Vec<T>, dim: usize) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        Ok(Self { values, dim })
    }

    pub fn n_frames(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim)
    }
}

/// Low-level acoustic features: log-mel filterbank energies.
pub fn acoustic_features<T: Real>(w: &Waveform<T>, config: &FrontEndConfig) -> Result<FeatureSequence<T>> {
    let pass = FrontEnd::new(config)?.forward(w.samples())?;
    FeatureSequence::new(pass.rows, config.n_mels)
}

/// Vector-Jacobian product of [`acoustic_features`].
pub fn acoustic_features_vjp<T: Real>(
    w: &Waveform<T>,
    config: &FrontEndConfig,
    cotangent: &FeatureSequence<T>,
) -> Result<Vec<T>> {
    let fe = FrontEnd::new(config)?;
    let pass = fe.forward(w.samples())?;
    if cotangent.values().len() != pass.rows.len() {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {}x{} vs features {}x{}",
            cotangent.n_frames(),
            cotangent.dim(),
            pass.n_frames(),
            config.n_mels
        )));
    }
    let mut grad = vec![T::zero(); w.len()];
    fe.backward_into(&pass, cotangent.values(), &mut grad);
    Ok(grad)
}
