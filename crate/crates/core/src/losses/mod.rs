//! Prevention and transferability losses.
//!
//! The free functions here evaluate every loss directly from waveforms and
//! are the reference the optimizer's incremental [`LossEngine`] is tested
//! against.

mod engine;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use engine::{Evaluation, LossEngine, LossSetup};

use crate::audio::Waveform;
use crate::corpus::Gender;
use crate::encoders::{identity_embed, EncoderHandle, EncoderKind, Embedding, SingerProfile};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::scalar::{dot, Real};

/// The seven losses, in the order the optimizer visits them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    IdentityUntargeted,
    IdentityTargeted,
    LyricHigh,
    LyricLow,
    Utility,
    FlirIdentity,
    FlirLyric,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::IdentityUntargeted,
        LossKind::IdentityTargeted,
        LossKind::LyricHigh,
        LossKind::LyricLow,
        LossKind::Utility,
        LossKind::FlirIdentity,
        LossKind::FlirLyric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::IdentityUntargeted => "identity_untargeted",
            LossKind::IdentityTargeted => "identity_targeted",
            LossKind::LyricHigh => "lyric_high",
            LossKind::LyricLow => "lyric_low",
            LossKind::Utility => "utility",
            LossKind::FlirIdentity => "flir_identity",
            LossKind::FlirLyric => "flir_lyric",
        }
    }

    pub fn index(self) -> usize {
        LossKind::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cosine similarity. Bit-identical inputs give exactly 1.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(cosine_and_grad(a, b)?.0)
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_and_grad<T: Real>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na.is_zero() || nb.is_zero() {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    let ab = dot(a, b);
    let c = if a == b {
        T::one()
    } else {
        (ab / (na * nb)).max(-T::one()).min(T::one())
    };
    let inv = T::one() / (na * nb);
    let k = ab / (na * na * na * nb);
    let g = a.iter().zip(b).map(|(&x, &y)| y * inv - x * k).collect();
    Ok((c, g))
}

/// Mean `1 - cos` over aligned frames, truncated to the shorter sequence.
pub fn seq_dist<T: Real>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> Result<T> {
    Ok(seq_dist_and_grad(a, b)?.0)
}

/// [`seq_dist`] and its gradient with respect to every value of `a`.
pub fn seq_dist_and_grad<T: Real>(a: &FeatureSequence<T>, b: &FeatureSequence<T>) -> Result<(T, Vec<T>)> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    let n = a.n_frames().min(b.n_frames());
    let inv = T::one() / T::from_usize_lossy(n);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); a.values().len()];
    for t in 0..n {
        let (c, g) = cosine_and_grad(a.row(t), b.row(t))?;
        total = total + (T::one() - c);
        let d = a.dim();
        for (o, gv) in grad[t * d..(t + 1) * d].iter_mut().zip(g) {
            *o = -gv * inv;
        }
    }
    Ok((total * inv, grad))
}

fn embed_and_grad_of<T: Real>(
    x: &Waveform<T>,
    h: &EncoderHandle<T>,
    f: impl FnOnce(&Embedding<T>) -> Result<(T, Vec<T>)>,
) -> Result<(T, Vec<T>)> {
    let e = identity_embed(h, x)?;
    let (v, cot) = f(&e)?;
    Ok((v, h.input_gradient(x, &cot)?))
}

/// Identity similarity to the unperturbed voice.
pub fn untargeted_identity_loss<T: Real>(x: &Waveform<T>, x0: &Waveform<T>, h: &EncoderHandle<T>) -> Result<T> {
    cosine_sim(identity_embed(h, x)?.values(), identity_embed(h, x0)?.values())
}

pub fn untargeted_identity_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    h: &EncoderHandle<T>,
) -> Result<(T, Vec<T>)> {
    let e0 = identity_embed(h, x0)?;
    embed_and_grad_of(x, h, |e| cosine_and_grad(e.values(), e0.values()))
}

/// Negative similarity to the destination singer's centroid.
pub fn targeted_identity_loss<T: Real>(x: &Waveform<T>, dest: &DestinationSinger<T>, h: &EncoderHandle<T>) -> Result<T> {
    Ok(-cosine_sim(identity_embed(h, x)?.values(), dest.centroid_under(h)?.values())?)
}

pub fn targeted_identity_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    dest: &DestinationSinger<T>,
    h: &EncoderHandle<T>,
) -> Result<(T, Vec<T>)> {
    let c = dest.centroid_under(h)?;
    embed_and_grad_of(x, h, |e| {
        let (v, g) = cosine_and_grad(e.values(), c.values())?;
        Ok((-v, g.into_iter().map(|x| -x).collect()))
    })
}

/// The untargeted and targeted components, kept separate so the optimizer
/// can normalize them independently.
pub fn gender_transformation_loss<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    dest: &DestinationSinger<T>,
    h: &EncoderHandle<T>,
) -> Result<(T, T)> {
    Ok((untargeted_identity_loss(x, x0, h)?, targeted_identity_loss(x, dest, h)?))
}

fn multi_target_and_grad<T: Real>(
    x: &Waveform<T>,
    h: &EncoderHandle<T>,
    targets: &[FeatureSequence<T>],
) -> Result<(T, Vec<T>)> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("empty lyric target set".into()));
    }
    let feats = h.frame_outputs(x)?;
    let inv = T::one() / T::from_usize_lossy(targets.len());
    let mut value = T::zero();
    let mut cot = vec![T::zero(); feats.values().len()];
    for t in targets {
        let (v, g) = seq_dist_and_grad(&feats, t)?;
        value = value + v * inv;
        crate::scalar::axpy(inv, &g, &mut cot);
    }
    Ok((value, h.input_gradient(x, &cot)?))
}

/// Mean lyric-feature distance to the K targets.
pub fn high_hierarchy_loss<T: Real>(x: &Waveform<T>, targets: &LyricTargetSet<T>, h: &EncoderHandle<T>) -> Result<T> {
    Ok(high_hierarchy_loss_and_grad(x, targets, h)?.0)
}

pub fn high_hierarchy_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    targets: &LyricTargetSet<T>,
    h: &EncoderHandle<T>,
) -> Result<(T, Vec<T>)> {
    if h.kind() != EncoderKind::Lyric {
        return Err(Error::KindMismatch {
            expected: "lyric",
            actual: h.kind().name(),
        });
    }
    multi_target_and_grad(x, h, &targets.features_for(h)?)
}

/// Mean acoustic-feature distance to the K targets; `acoustic` is the
/// front-end handle.
pub fn low_hierarchy_loss<T: Real>(
    x: &Waveform<T>,
    targets: &LyricTargetSet<T>,
    acoustic: &EncoderHandle<T>,
) -> Result<T> {
    Ok(low_hierarchy_loss_and_grad(x, targets, acoustic)?.0)
}

pub fn low_hierarchy_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    targets: &LyricTargetSet<T>,
    acoustic: &EncoderHandle<T>,
) -> Result<(T, Vec<T>)> {
    if acoustic.kind() != EncoderKind::Acoustic {
        return Err(Error::KindMismatch {
            expected: "acoustic",
            actual: acoustic.kind().name(),
        });
    }
    multi_target_and_grad(x, acoustic, &targets.features_for(acoustic)?)
}

/// Frame layout of the interaction-reduction losses: frames of
/// `len / length_divisor` samples every `len / shift_divisor` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlirConfig {
    /// Frames sampled (without replacement) per evaluation.
    pub samples: usize,
    pub length_divisor: usize,
    pub shift_divisor: usize,
}

impl Default for FlirConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            length_divisor: 200,
            shift_divisor: 200,
        }
    }
}

impl FlirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.length_divisor == 0 || self.shift_divisor == 0 {
            return Err(Error::InvalidConfig("FL-IR samples and divisors must be at least 1".into()));
        }
        Ok(())
    }

    /// `[start, end)` of every frame of a signal of `len` samples.
    pub fn frames(&self, len: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let wl = (len / self.length_divisor).max(1);
        let ws = (len / self.shift_divisor).max(1);
        if len < wl {
            return Err(Error::TooShort { len, frame_length: wl });
        }
        Ok((0..(len - wl) / ws + 1).map(|i| (i * ws, i * ws + wl)).collect())
    }

    /// Frame indices for one evaluation: `min(samples, n)` distinct frames.
    pub fn sample(&self, n_frames: usize, rng: &mut impl Rng) -> Vec<usize> {
        index::sample(rng, n_frames, self.samples.min(n_frames)).into_vec()
    }
}

/// `x` with `[a, b)` taken from `x0` (`keep_x_inside = false`), or `x0`
/// with `[a, b)` taken from `x`.
pub fn frame_variant<T: Real>(x: &[T], x0: &[T], (a, b): (usize, usize), keep_x_inside: bool) -> Vec<T> {
    let (outer, inner) = if keep_x_inside { (x0, x) } else { (x, x0) };
    let mut v = outer.to_vec();
    v[a..b].copy_from_slice(&inner[a..b]);
    v
}

fn mask_add<T: Real>(grad: &mut [T], g: &[T], (a, b): (usize, usize), inside: bool, scale: T) {
    for (j, (o, &v)) in grad.iter_mut().zip(g).enumerate() {
        if (a..b).contains(&j) == inside {
            *o = *o + scale * v;
        }
    }
}

/// Shared shape of both interaction-reduction losses, evaluated by building
/// each variant waveform in full. `base_x0` is `f(x0)`.
fn flir_reference<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    cfg: &FlirConfig,
    rng: &mut impl Rng,
    base_x0: T,
    f: impl Fn(&Waveform<T>) -> Result<(T, Vec<T>)>,
) -> Result<(T, Vec<T>)> {
    if x.len() != x0.len() {
        return Err(Error::ShapeMismatch("x and x0 differ in length".into()));
    }
    let frames = cfg.frames(x.len())?;
    let chosen = cfg.sample(frames.len(), rng);
    let (fx, gx) = f(x)?;
    let inv = T::one() / T::from_usize_lossy(chosen.len());
    let mut value = T::zero();
    let mut grad = gx;
    let sr = x.sample_rate();
    for &i in &chosen {
        let r = frames[i];
        let pi = Waveform::from_clipped(frame_variant(x.samples(), x0.samples(), r, false), sr)?;
        let phi = Waveform::from_clipped(frame_variant(x.samples(), x0.samples(), r, true), sr)?;
        let (fp, gp) = f(&pi)?;
        let (ff, gf) = f(&phi)?;
        value = value + ((fx - fp) + (base_x0 - ff)) * inv;
        mask_add(&mut grad, &gp, r, false, -inv);
        mask_add(&mut grad, &gf, r, true, -inv);
    }
    Ok((value, grad))
}

/// Frame-level interaction reduction on the untargeted identity loss.
pub fn flir_identity_loss<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    h: &EncoderHandle<T>,
    cfg: &FlirConfig,
    rng: &mut impl Rng,
) -> Result<T> {
    Ok(flir_identity_loss_and_grad(x, x0, h, cfg, rng)?.0)
}

pub fn flir_identity_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    h: &EncoderHandle<T>,
    cfg: &FlirConfig,
    rng: &mut impl Rng,
) -> Result<(T, Vec<T>)> {
    flir_reference(x, x0, cfg, rng, T::one(), |v| untargeted_identity_loss_and_grad(v, x0, h))
}

/// Frame-level interaction reduction on the high-hierarchy lyric loss.
pub fn flir_lyric_loss<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    targets: &LyricTargetSet<T>,
    h: &EncoderHandle<T>,
    cfg: &FlirConfig,
    rng: &mut impl Rng,
) -> Result<T> {
    Ok(flir_lyric_loss_and_grad(x, x0, targets, h, cfg, rng)?.0)
}

pub fn flir_lyric_loss_and_grad<T: Real>(
    x: &Waveform<T>,
    x0: &Waveform<T>,
    targets: &LyricTargetSet<T>,
    h: &EncoderHandle<T>,
    cfg: &FlirConfig,
    rng: &mut impl Rng,
) -> Result<(T, Vec<T>)> {
    let base = high_hierarchy_loss(x0, targets, h)?;
    flir_reference(x, x0, cfg, rng, base, |v| high_hierarchy_loss_and_grad(v, targets, h))
}

/// The auxiliary singer whose identity the protected voice is pushed towards.
#[derive(Debug, Clone)]
pub struct DestinationSinger<T: Real = f64> {
    pub profile: SingerProfile<T>,
    pub centroid: Embedding<T>,
}

impl<T: Real> DestinationSinger<T> {
    /// Centroid of the destination's voices under another identity encoder.
    pub fn centroid_under(&self, h: &EncoderHandle<T>) -> Result<Embedding<T>> {
        if h.id() == self.profile.encoder {
            return Ok(self.centroid.clone());
        }
        Ok(self.profile.under(h)?.centroid)
    }
}

/// The opposite-gender pool singer least similar to `target`; ties go to
/// the lexicographically smallest id.
pub fn select_destination<T: Real>(
    target: &SingerProfile<T>,
    pool: &[SingerProfile<T>],
    h: &EncoderHandle<T>,
) -> Result<DestinationSinger<T>> {
    if pool.is_empty() {
        return Err(Error::InvalidConfig("empty destination pool".into()));
    }
    if let Some(p) = pool.iter().find(|p| p.gender == target.gender) {
        return Err(Error::InvalidConfig(format!(
            "destination candidate {} has the protected singer's gender {}",
            p.id, p.gender
        )));
    }
    let under = |p: &SingerProfile<T>| -> Result<Embedding<T>> {
        if p.encoder == h.id() {
            Ok(p.centroid.clone())
        } else {
            Ok(p.under(h)?.centroid)
        }
    };
    let tc = under(target)?;
    let mut best: Option<(T, &SingerProfile<T>, Embedding<T>)> = None;
    for p in pool {
        let c = under(p)?;
        let s = cosine_sim(c.values(), tc.values())?;
        let better = match &best {
            None => true,
            Some((bs, bp, _)) => s < *bs || (s == *bs && p.id < bp.id),
        };
        if better {
            best = Some((s, p, c));
        }
    }
    let (_, p, centroid) = best.expect("non-empty pool");
    let mut profile = p.clone();
    if profile.encoder != h.id() {
        profile.centroid = centroid.clone();
        profile.encoder = h.id().to_string();
    }
    Ok(DestinationSinger { profile, centroid })
}

/// A clip whose lyrics the protected voice is pulled towards.
#[derive(Debug, Clone)]
pub struct LyricTarget<T: Real = f64> {
    pub clip: String,
    pub singer: String,
    pub symbols: Vec<usize>,
    pub voice: Waveform<T>,
}

/// K lyric targets plus their cached features per encoder id.
#[derive(Debug, Clone)]
pub struct LyricTargetSet<T: Real = f64> {
    targets: Vec<LyricTarget<T>>,
    features: BTreeMap<String, Vec<FeatureSequence<T>>>,
}

impl<T: Real> LyricTargetSet<T> {
    pub fn new(targets: Vec<LyricTarget<T>>, source_symbols: &[usize]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("lyric target set needs K >= 1".into()));
        }
        if let Some(t) = targets.iter().find(|t| t.symbols == source_symbols) {
            return Err(Error::InvalidConfig(format!(
                "lyric target {} sings the protected voice's own lyrics",
                t.clip
            )));
        }
        Ok(Self {
            targets,
            features: BTreeMap::new(),
        })
    }

    /// Draws `k` distinct candidates whose lyrics differ from the source's.
    pub fn select(candidates: &[LyricTarget<T>], source_symbols: &[usize], k: usize, seed: u64) -> Result<Self> {
        let eligible: Vec<&LyricTarget<T>> = candidates.iter().filter(|c| c.symbols != source_symbols).collect();
        if k == 0 || eligible.len() < k {
            return Err(Error::InvalidConfig(format!(
                "need {k} lyric targets, only {} candidates differ from the source lyrics",
                eligible.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, eligible.len(), k).into_vec();
        picks.sort_unstable();
        Self::new(picks.into_iter().map(|i| eligible[i].clone()).collect(), source_symbols)
    }

    pub fn targets(&self) -> &[LyricTarget<T>] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Computes and caches target features for every handle.
    pub fn cache_features(&mut self, handles: &[&EncoderHandle<T>]) -> Result<()> {
        for h in handles {
            if self.features.contains_key(h.id()) {
                continue;
            }
            let f = self
                .targets
                .iter()
                .map(|t| h.frame_outputs(&t.voice))
                .collect::<Result<Vec<_>>>()?;
            self.features.insert(h.id().to_string(), f);
        }
        Ok(())
    }

    /// Cached features under `h`, computed on the fly when missing.
    pub fn features_for(&self, h: &EncoderHandle<T>) -> Result<std::borrow::Cow<'_, [FeatureSequence<T>]>> {
        match self.features.get(h.id()) {
            Some(f) => Ok(std::borrow::Cow::Borrowed(f)),
            None => Ok(std::borrow::Cow::Owned(
                self.targets
                    .iter()
                    .map(|t| h.frame_outputs(&t.voice))
                    .collect::<Result<Vec<_>>>()?,
            )),
        }
    }
}

/// Every profile whose gender differs from the protected singer's: the
/// destination pool.
pub fn destination_pool<T: Real>(profiles: &[SingerProfile<T>], protected: Gender) -> Vec<SingerProfile<T>> {
    profiles.iter().filter(|p| p.gender != protected).cloned().collect()
}

#[cfg(test)]
mod tests;
