//! Waveforms, songs, framing and short-time spectral analysis.

mod stft;
mod wav;

pub use stft::{stft, stft_adjoint, Spectrogram, StftPlan};
pub use wav::{load_song, load_waveform, save_waveform, SampleFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mono signal normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T: Real = f64> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    /// Builds a waveform, rejecting non-finite or out-of-range samples.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio("waveform has no samples".into()));
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > T::one())
        {
            return Err(Error::InvalidConfig(format!(
                "sample {i} is outside [-1, 1]: {}",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a waveform by clipping every sample into `[-1, 1]`.
    /// Non-finite samples become zero.
    pub fn from_clipped(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let samples = samples.into_iter().map(clip_unit).collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean-square power.
    pub fn power(&self) -> T {
        self.samples.iter().map(|&s| s * s).sum::<T>() / T::from_usize_lossy(self.len())
    }

    /// Converts the sample type.
    pub fn cast<U: Real>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|s| U::lit(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Crops or cyclically extends to exactly `len` samples.
    pub fn fit_to_length(&self, len: usize) -> Self {
        let samples = self.samples.iter().copied().cycle().take(len).collect();
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[inline]
pub(crate) fn clip_unit<T: Real>(s: T) -> T {
    if s.is_nan() {
        T::zero()
    } else {
        s.max(-T::one()).min(T::one())
    }
}

/// A singing voice paired with its backing track.
#[derive(Debug, Clone, PartialEq)]
pub struct Song<T: Real = f64> {
    pub voice: Waveform<T>,
    pub backing: Waveform<T>,
}

impl<T: Real> Song<T> {
    /// Pairs the channels, cropping or looping the backing to the voice length.
    pub fn new(voice: Waveform<T>, backing: Waveform<T>) -> Result<Self> {
        if voice.sample_rate() != backing.sample_rate() {
            return Err(Error::SampleRateMismatch(
                voice.sample_rate(),
                backing.sample_rate(),
            ));
        }
        let backing = backing.fit_to_length(voice.len());
        Ok(Self { voice, backing })
    }

    /// Replaces the voice channel, keeping the backing.
    pub fn with_voice(&self, voice: Waveform<T>) -> Result<Self> {
        Self::new(voice, self.backing.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann.
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    pub fn coefficients<T: Real>(self, len: usize) -> Vec<T> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / n;
                let w = match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rectangular => 1.0,
                };
                T::lit(w)
            })
            .collect()
    }
}

/// Frame length, shift and transform size, all in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub frame_length: usize,
    pub frame_shift: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: Window,
}

impl FrameSpec {
    /// Hann-windowed spec with the transform size rounded up to a power of two.
    pub fn new(frame_length: usize, frame_shift: usize) -> Result<Self> {
        Self::with_fft(
            frame_length,
            frame_shift,
            frame_length.max(1).next_power_of_two(),
            Window::Hann,
        )
    }

    pub fn with_fft(
        frame_length: usize,
        frame_shift: usize,
        fft_size: usize,
        window: Window,
    ) -> Result<Self> {
        let spec = Self {
            frame_length,
            frame_shift,
            fft_size,
            window,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_shift == 0
            || self.frame_shift > self.frame_length
            || self.frame_length > self.fft_size
        {
            return Err(Error::InvalidConfig(format!(
                "frame spec needs 0 < shift <= length <= fft size, got shift {} length {} fft {}",
                self.frame_shift, self.frame_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// Number of frequency bins of a one-sided spectrum.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of complete frames in a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_length {
            return Err(Error::TooShort {
                len,
                frame_length: self.frame_length,
            });
        }
        Ok((len - self.frame_length) / self.frame_shift + 1)
    }

    pub fn frame_start(&self, index: usize) -> usize {
        index * self.frame_shift
    }

    /// Indices of complete frames overlapping the sample range `[start, end)`.
    pub fn frames_touching(&self, n_frames: usize, start: usize, end: usize) -> std::ops::Range<usize> {
        if start >= end || n_frames == 0 {
            return 0..0;
        }
        // frame t covers [t*s, t*s + l); it overlaps iff t*s < end and t*s + l > start
        let first = if start + 1 > self.frame_length {
            (start + 1 - self.frame_length).div_ceil(self.frame_shift)
        } else {
            0
        };
        let last = ((end - 1) / self.frame_shift).min(n_frames - 1);
        if first > last {
            0..0
        } else {
            first..last + 1
        }
    }

    pub fn bin_frequency(&self, bin: usize, sample_rate: u32) -> f64 {
        bin as f64 * sample_rate as f64 / self.fft_size as f64
    }
}

/// Boundaries of the frames tiling a signal of `len` samples.
///
/// The `i`-th pair is `(i * shift, i * shift + length)`, with the last
/// frames clipped to `len`.
pub fn frame_boundaries(len: usize, spec: &FrameSpec) -> Vec<(usize, usize)> {
    (0..)
        .map(|i| i * spec.frame_shift)
        .take_while(|&start| start < len)
        .map(|start| (start, (start + spec.frame_length).min(len)))
        .collect()
}

/// Sample-wise sum of voice and backing, clipped to `[-1, 1]`.
pub fn mix_to_mono<T: Real>(song: &Song<T>) -> Waveform<T> {
    let samples = song
        .voice
        .samples()
        .iter()
        .zip(song.backing.samples())
        .map(|(&v, &b)| clip_unit(v + b))
        .collect();
    Waveform {
        samples,
        sample_rate: song.voice.sample_rate(),
    }
}
