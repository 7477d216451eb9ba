//! Differentiable toy encoders over the shared log-mel front end.
//!
//! Identity encoders mean-pool a per-frame network into one embedding,
//! lyric encoders keep the per-frame outputs, and the acoustic "encoder" is
//! the front end itself.

mod io;
pub(crate) mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{read_encoder, write_encoder, ENCODER_MAGIC, ENCODER_VERSION};
pub use train::{train_toy, train_toy_with, TrainConfig, TrainEntry, TrainReport};

use crate::audio::Waveform;
use crate::corpus::Gender;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FrontEnd, FrontEndConfig, FrontPass};
use crate::nn::{Mlp, RowCache};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    Lyric,
    Acoustic,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Identity => "identity",
            EncoderKind::Lyric => "lyric",
            EncoderKind::Acoustic => "acoustic",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed-dimension identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Real = f64> {
    values: Vec<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ShapeMismatch("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Element-wise mean of equally sized embeddings.
    pub fn mean(items: &[Embedding<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("mean of no embeddings".into()))?;
        let mut acc = vec![T::zero(); first.dim()];
        for e in items {
            if e.dim() != acc.len() {
                return Err(Error::ShapeMismatch(format!("embedding dims {} vs {}", e.dim(), acc.len())));
            }
            acc.iter_mut().zip(&e.values).for_each(|(a, &v)| *a = *a + v);
        }
        let n = T::from_usize_lossy(items.len());
        Embedding::new(acc.into_iter().map(|v| v / n).collect())
    }
}

/// A trained (or parameter-free) encoder.
#[derive(Debug, Clone)]
pub struct EncoderHandle<T: Real = f64> {
    id: String,
    kind: EncoderKind,
    held_out: bool,
    seed: u64,
    front: FrontEnd<T>,
    net: Option<Mlp<T>>,
}

impl<T: Real> EncoderHandle<T> {
    pub fn new(
        id: impl Into<String>,
        kind: EncoderKind,
        held_out: bool,
        seed: u64,
        front: &FrontEndConfig,
        net: Option<Mlp<T>>,
    ) -> Result<Self> {
        let front = FrontEnd::new(front)?;
        match (&net, kind) {
            (None, EncoderKind::Acoustic) => {}
            (Some(n), EncoderKind::Identity | EncoderKind::Lyric) if n.n_in() == front.n_mels() => {}
            (Some(n), EncoderKind::Identity | EncoderKind::Lyric) => {
                return Err(Error::ShapeMismatch(format!(
                    "network input {} vs {} mel bands",
                    n.n_in(),
                    front.n_mels()
                )))
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{kind} encoder {}",
                    if net.is_some() { "cannot carry a network" } else { "needs a network" }
                )))
            }
        }
        Ok(Self {
            id: id.into(),
            kind,
            held_out,
            seed,
            front,
            net,
        })
    }

    /// The log-mel front end as a feature extractor.
    pub fn acoustic(front: &FrontEndConfig) -> Result<Self> {
        Self::new("acoustic", EncoderKind::Acoustic, false, 0, front, None)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn is_held_out(&self) -> bool {
        self.held_out
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn front_end(&self) -> &FrontEnd<T> {
        &self.front
    }

    pub fn front_config(&self) -> &FrontEndConfig {
        self.front.config()
    }

    pub fn net(&self) -> Option<&Mlp<T>> {
        self.net.as_ref()
    }

    /// Width of one output row (embedding size for identity encoders).
    pub fn output_dim(&self) -> usize {
        self.net.as_ref().map_or(self.front.n_mels(), |n| n.n_out())
    }

    pub fn cast<U: Real>(&self) -> EncoderHandle<U> {
        EncoderHandle {
            id: self.id.clone(),
            kind: self.kind,
            held_out: self.held_out,
            seed: self.seed,
            front: FrontEnd::new(self.front.config()).expect("validated config"),
            net: self.net.as_ref().map(|n| n.cast()),
        }
    }

    pub(crate) fn with_net(&self, net: Mlp<T>, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            net: Some(net),
            front: self.front.clone(),
            ..*self
        }
    }

    fn expect(&self, kind: EncoderKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.name(),
                actual: self.kind.name(),
            })
        }
    }

    pub fn front_pass(&self, w: &Waveform<T>) -> Result<FrontPass<T>> {
        self.front.forward(w.samples())
    }

    /// Per-frame network pass on one log-mel row.
    pub fn encode_row(&self, row: &[T]) -> RowCache<T> {
        match &self.net {
            Some(n) => n.forward_row(row),
            None => RowCache::passthrough(row.to_vec()),
        }
    }

    pub fn encode_pass(&self, pass: &FrontPass<T>) -> Vec<RowCache<T>> {
        (0..pass.n_frames()).map(|t| self.encode_row(pass.row(t))).collect()
    }

    /// Adds the log-mel cotangent for output cotangent `out_cot` into `mel_cot`.
    pub fn backward_row(&self, cache: &RowCache<T>, out_cot: &[T], mel_cot: &mut [T]) {
        match &self.net {
            Some(n) => n.backward_row(cache, out_cot, Some(mel_cot), None),
            None => mel_cot.iter_mut().zip(out_cot).for_each(|(m, &c)| *m = *m + c),
        }
    }

    /// Per-frame outputs of a lyric or acoustic encoder (or the unpooled
    /// frames of an identity encoder).
    pub fn frame_outputs(&self, w: &Waveform<T>) -> Result<FeatureSequence<T>> {
        let pass = self.front_pass(w)?;
        let values = self
            .encode_pass(&pass)
            .iter()
            .flat_map(|c| c.output().to_vec())
            .collect();
        FeatureSequence::new(values, self.output_dim())
    }

    /// Vector-Jacobian product w.r.t. the input samples. The cotangent has
    /// the embedding's shape for identity encoders and `n_frames x dim`
    /// otherwise.
    pub fn input_gradient(&self, w: &Waveform<T>, cotangent: &[T]) -> Result<Vec<T>> {
        let pass = self.front_pass(w)?;
        let (n, d) = (pass.n_frames(), self.output_dim());
        let expected = if self.kind == EncoderKind::Identity { d } else { n * d };
        if cotangent.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cotangent of length {} for a {} output of size {expected}",
                cotangent.len(),
                self.kind
            )));
        }
        let identity = self.kind == EncoderKind::Identity;
        // pooling spreads the embedding cotangent evenly over frames
        let pooled: Vec<T> = if identity {
            let inv = T::one() / T::from_usize_lossy(n);
            cotangent.iter().map(|&c| c * inv).collect()
        } else {
            Vec::new()
        };
        let m = pass.n_mels;
        let mut mel_cot = vec![T::zero(); n * m];
        for t in 0..n {
            let cache = self.encode_row(pass.row(t));
            let c = if identity { &pooled[..] } else { &cotangent[t * d..(t + 1) * d] };
            self.backward_row(&cache, c, &mut mel_cot[t * m..(t + 1) * m]);
        }
        let mut grad = vec![T::zero(); w.len()];
        self.front.backward_into(&pass, &mel_cot, &mut grad);
        Ok(grad)
    }
}

/// Mean-pooled embedding of an identity encoder.
pub fn identity_embed<T: Real>(h: &EncoderHandle<T>, w: &Waveform<T>) -> Result<Embedding<T>> {
    h.expect(EncoderKind::Identity)?;
    let f = h.frame_outputs(w)?;
    let n = T::from_usize_lossy(f.n_frames());
    let mut acc = vec![T::zero(); f.dim()];
    for row in f.rows() {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
    }
    Embedding::new(acc.into_iter().map(|v| v / n).collect())
}

/// Per-frame lyric features.
pub fn lyric_features<T: Real>(h: &EncoderHandle<T>, w: &Waveform<T>) -> Result<FeatureSequence<T>> {
    h.expect(EncoderKind::Lyric)?;
    h.frame_outputs(w)
}

pub fn input_gradient<T: Real>(h: &EncoderHandle<T>, w: &Waveform<T>, cotangent: &[T]) -> Result<Vec<T>> {
    h.input_gradient(w, cotangent)
}

/// Averages per-encoder `(loss, gradient)` pairs over `handles`.
pub fn ensemble<T, F>(handles: &[&EncoderHandle<T>], mut loss: F) -> Result<(T, Vec<T>)>
where
    T: Real,
    F: FnMut(&EncoderHandle<T>) -> Result<(T, Vec<T>)>,
{
    let first = handles
        .first()
        .ok_or_else(|| Error::InvalidConfig("ensemble of no encoders".into()))?;
    if let Some(h) = handles.iter().find(|h| h.kind != first.kind) {
        return Err(Error::KindMismatch {
            expected: first.kind.name(),
            actual: h.kind.name(),
        });
    }
    let parts = handles.iter().map(|h| loss(h)).collect::<Result<Vec<_>>>()?;
    ensemble_mean(parts)
}

/// Arithmetic mean of loss values and gradients.
pub fn ensemble_mean<T: Real>(parts: Vec<(T, Vec<T>)>) -> Result<(T, Vec<T>)> {
    let m = parts.len();
    let mut it = parts.into_iter();
    let (mut value, mut grad) = it
        .next()
        .ok_or_else(|| Error::InvalidConfig("ensemble of no encoders".into()))?;
    for (v, g) in it {
        if g.len() != grad.len() {
            return Err(Error::ShapeMismatch("ensemble gradients differ in length".into()));
        }
        value = value + v;
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
    }
    let n = T::from_usize_lossy(m);
    grad.iter_mut().for_each(|g| *g = *g / n);
    Ok((value / n, grad))
}

/// A singer's voices and their centroid embedding under one identity encoder.
#[derive(Debug, Clone)]
pub struct SingerProfile<T: Real = f64> {
    pub id: String,
    pub gender: Gender,
    pub voices: Vec<Waveform<T>>,
    pub centroid: Embedding<T>,
    /// Encoder the centroid was computed with.
    pub encoder: String,
}

impl<T: Real> SingerProfile<T> {
    pub fn build(id: impl Into<String>, gender: Gender, voices: Vec<Waveform<T>>, h: &EncoderHandle<T>) -> Result<Self> {
        let embs = voices.iter().map(|v| identity_embed(h, v)).collect::<Result<Vec<_>>>()?;
        let centroid = Embedding::mean(&embs)
            .map_err(|_| Error::InvalidConfig("singer profile needs at least one voice".into()))?;
        Ok(Self {
            id: id.into(),
            gender,
            voices,
            centroid,
            encoder: h.id().to_string(),
        })
    }

    /// Same voices, centroid recomputed under another encoder.
    pub fn under(&self, h: &EncoderHandle<T>) -> Result<Self> {
        Self::build(self.id.clone(), self.gender, self.voices.clone(), h)
    }
}

/// All encoders of a run. Protection ensembles are drawn from here and can
/// never include a held-out encoder.
#[derive(Debug, Clone)]
pub struct EncoderSet<T: Real = f64> {
    encoders: Vec<EncoderHandle<T>>,
    acoustic: EncoderHandle<T>,
}

impl<T: Real> EncoderSet<T> {
    pub fn new(encoders: Vec<EncoderHandle<T>>) -> Result<Self> {
        let first = encoders
            .iter()
            .find(|e| e.kind != EncoderKind::Acoustic)
            .ok_or_else(|| Error::InvalidConfig("no trained encoders".into()))?;
        let front = first.front_config().clone();
        for (i, e) in encoders.iter().enumerate() {
            if e.front_config() != &front {
                return Err(Error::InvalidConfig(format!("encoder {} uses a different front end", e.id)));
            }
            if encoders[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::InvalidConfig(format!("duplicate encoder id {}", e.id)));
            }
        }
        let acoustic = EncoderHandle::acoustic(&front)?;
        Ok(Self {
            encoders: encoders.into_iter().filter(|e| e.kind != EncoderKind::Acoustic).collect(),
            acoustic,
        })
    }

    pub fn all(&self) -> &[EncoderHandle<T>] {
        &self.encoders
    }

    pub fn front_config(&self) -> &FrontEndConfig {
        self.acoustic.front_config()
    }

    pub fn acoustic(&self) -> &EncoderHandle<T> {
        &self.acoustic
    }

    pub fn get(&self, id: &str) -> Result<&EncoderHandle<T>> {
        self.encoders
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown encoder {id}")))
    }

    /// Ids of the protection-eligible encoders of `kind`.
    pub fn ensemble_ids(&self, kind: EncoderKind) -> Vec<String> {
        self.encoders
            .iter()
            .filter(|e| e.kind == kind && !e.held_out)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Protection ensemble of `kind`; an empty `ids` selects every eligible encoder.
    pub fn ensemble(&self, kind: EncoderKind, ids: &[String]) -> Result<Vec<&EncoderHandle<T>>> {
        let chosen: Vec<&EncoderHandle<T>> = if ids.is_empty() {
            self.encoders.iter().filter(|e| e.kind == kind && !e.held_out).collect()
        } else {
            ids.iter()
                .map(|id| self.get(id))
                .filter(|e| e.as_ref().map_or(true, |e| e.kind == kind))
                .collect::<Result<_>>()?
        };
        if let Some(h) = chosen.iter().find(|e| e.held_out) {
            return Err(Error::HeldOut(h.id.clone()));
        }
        if chosen.is_empty() {
            return Err(Error::InvalidConfig(format!("no {kind} encoders selected")));
        }
        Ok(chosen)
    }

    /// The evaluation-only encoder of `kind`.
    pub fn held_out(&self, kind: EncoderKind) -> Result<&EncoderHandle<T>> {
        self.encoders
            .iter()
            .find(|e| e.kind == kind && e.held_out)
            .ok_or_else(|| Error::InvalidConfig(format!("no held-out {kind} encoder")))
    }

    pub fn cast<U: Real>(&self) -> EncoderSet<U> {
        EncoderSet {
            encoders: self.encoders.iter().map(|e| e.cast()).collect(),
            acoustic: self.acoustic.cast(),
        }
    }

    /// Writes one `<id>.enc` file per encoder.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoders
            .iter()
            .map(|e| {
                let p = dir.join(format!("{}.enc", e.id));
                write_encoder(&p, e)?;
                Ok(p)
            })
            .collect()
    }

    /// Loads every `*.enc` file in `dir`, sorted by file name.
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "enc"))
            .collect();
        paths.sort();
        Self::new(paths.iter().map(read_encoder).collect::<Result<_>>()?)
    }
}
