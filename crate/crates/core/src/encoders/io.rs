//! Versioned flat binary encoder files.
//!
//! Layout (little endian): magic, version u32, kind u8, held_out u8,
//! seed u64, id (u32 length + UTF-8), front end (frame length, shift, FFT
//! size as u32, window u8, mel count u32, sample rate u32, log floor f64),
//! layer widths (u32 count + u32 each), parameters (u64 count + f64 each).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{EncoderHandle, EncoderKind};
use crate::audio::{FrameSpec, Window};
use crate::error::{Error, Result};
use crate::features::FrontEndConfig;
use crate::nn::Mlp;
use crate::scalar::Real;

pub const ENCODER_MAGIC: &[u8; 8] = b"SSHLDENC";
pub const ENCODER_VERSION: u32 = 1;

fn kind_code(k: EncoderKind) -> u8 {
    match k {
        EncoderKind::Identity => 0,
        EncoderKind::Lyric => 1,
        EncoderKind::Acoustic => 2,
    }
}

fn window_code(w: Window) -> u8 {
    match w {
        Window::Hann => 0,
        Window::Hamming => 1,
        Window::Rectangular => 2,
    }
}

pub fn encode<T: Real>(h: &EncoderHandle<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(ENCODER_MAGIC);
    out.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
    out.push(kind_code(h.kind()));
    out.push(h.is_held_out() as u8);
    out.extend_from_slice(&h.seed().to_le_bytes());
    u32le(&mut out, h.id().len());
    out.extend_from_slice(h.id().as_bytes());
    let fc = h.front_config();
    u32le(&mut out, fc.frame.frame_length);
    u32le(&mut out, fc.frame.frame_shift);
    u32le(&mut out, fc.frame.fft_size);
    out.push(window_code(fc.frame.window));
    u32le(&mut out, fc.n_mels);
    out.extend_from_slice(&fc.sample_rate.to_le_bytes());
    out.extend_from_slice(&fc.log_floor.to_le_bytes());
    let (sizes, params) = h
        .net()
        .map(|n| (n.sizes(), n.flat_params()))
        .unwrap_or_default();
    u32le(&mut out, sizes.len());
    sizes.iter().for_each(|&s| u32le(&mut out, s));
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated encoder file".into()))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn decode<T: Real>(data: &[u8]) -> Result<EncoderHandle<T>> {
    let mut r = Reader(Cursor::new(data));
    if &r.bytes::<8>()? != ENCODER_MAGIC {
        return Err(Error::Format("not an encoder file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != ENCODER_VERSION as usize {
        return Err(Error::Format(format!("unsupported encoder file version {version}")));
    }
    let kind = match r.u8()? {
        0 => EncoderKind::Identity,
        1 => EncoderKind::Lyric,
        2 => EncoderKind::Acoustic,
        k => return Err(Error::Format(format!("unknown encoder kind {k}"))),
    };
    let held_out = r.u8()? != 0;
    let seed = r.u64()?;
    let id_len = r.u32()?;
    if id_len > 4096 {
        return Err(Error::Format("encoder id too long".into()));
    }
    let mut id = vec![0u8; id_len];
    r.0.read_exact(&mut id)
        .map_err(|_| Error::Format("truncated encoder file".into()))?;
    let id = String::from_utf8(id).map_err(|_| Error::Format("encoder id is not UTF-8".into()))?;
    let frame_length = r.u32()?;
    let frame_shift = r.u32()?;
    let fft_size = r.u32()?;
    let window = match r.u8()? {
        0 => Window::Hann,
        1 => Window::Hamming,
        2 => Window::Rectangular,
        w => return Err(Error::Format(format!("unknown window code {w}"))),
    };
    let front = FrontEndConfig {
        frame: FrameSpec {
            frame_length,
            frame_shift,
            fft_size,
            window,
        },
        n_mels: r.u32()?,
        sample_rate: r.u32()? as u32,
        log_floor: r.f64()?,
    };
    let n_sizes = r.u32()?;
    if n_sizes > 64 {
        return Err(Error::Format("too many layers".into()));
    }
    let sizes = (0..n_sizes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_params = r.u64()? as usize;
    let remaining = data.len() - r.0.position() as usize;
    if n_params.checked_mul(8) != Some(remaining) {
        return Err(Error::Format(format!(
            "header promises {n_params} parameters but {remaining} bytes follow"
        )));
    }
    let params = (0..n_params)
        .map(|_| r.f64().map(T::lit))
        .collect::<Result<Vec<T>>>()?;
    let net = if sizes.is_empty() {
        None
    } else {
        Some(Mlp::from_flat(&sizes, &params)?)
    };
    EncoderHandle::new(id, kind, held_out, seed, &front, net).map_err(|e| match e {
        Error::InvalidConfig(m) | Error::ShapeMismatch(m) => Error::Format(m),
        other => other,
    })
}

pub fn write_encoder<T: Real>(path: impl AsRef<Path>, h: &EncoderHandle<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(h)).map_err(|e| Error::io(path, e))
}

pub fn read_encoder<T: Real>(path: impl AsRef<Path>) -> Result<EncoderHandle<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
