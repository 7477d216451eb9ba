use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

use super::{clip_unit, Song, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// On-disk PCM encodings supported for mono WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Int16,
    Float32,
}

const MIN_RATE: u32 = 8_000;
const MAX_RATE: u32 = 48_000;
const INT16_SCALE: f64 = 32768.0;

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads a mono 16-bit or 32-bit-float WAV file.
///
/// Integer samples are divided by 32768, so 32767 maps to 0.99997.
pub fn load_waveform<T: Real>(path: impl AsRef<Path>) -> Result<(Waveform<T>, SampleFormat)> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if !(MIN_RATE..=MAX_RATE).contains(&spec.sample_rate) {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample rate {} outside {MIN_RATE}..={MAX_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let (samples, format): (Vec<T>, _) = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Int, 16) => (
            reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| T::lit(v as f64 / INT16_SCALE)))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            SampleFormat::Int16,
        ),
        (HoundFormat::Float, 32) => (
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| clip_unit(T::lit(v as f64))))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?,
            SampleFormat::Float32,
        ),
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.display().to_string()));
    }
    Ok((Waveform::new(samples, spec.sample_rate)?, format))
}

/// Writes a mono WAV file. 16-bit output rounds `x * 32768` and saturates.
pub fn save_waveform<T: Real>(path: impl AsRef<Path>, w: &Waveform<T>, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        SampleFormat::Int16 => (16, HoundFormat::Int),
        SampleFormat::Float32 => (32, HoundFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in w.samples() {
        let s = s.as_f64();
        match format {
            SampleFormat::Int16 => {
                let v = (s * INT16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)
            }
            SampleFormat::Float32 => writer.write_sample(s as f32),
        }
        .map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Loads a voice and a backing track as a length-aligned song.
pub fn load_song<T: Real>(voice_path: impl AsRef<Path>, backing_path: impl AsRef<Path>) -> Result<Song<T>> {
    let (voice, _) = load_waveform(voice_path)?;
    let (backing, _) = load_waveform(backing_path)?;
    Song::new(voice, backing)
}
