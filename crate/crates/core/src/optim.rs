//! Normalization-balanced multi-loss protection.
//!
//! Each iteration evaluates the enabled losses, standardizes every one
//! against its own running mean and variance, sums them and takes one
//! clip-projected Adam step on the voice waveform.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{clip_unit, mix_to_mono, FrameSpec, Song, Waveform};
use crate::encoders::{EncoderKind, EncoderSet};
use crate::error::{Error, Result};
use crate::losses::{DestinationSinger, FlirConfig, LossEngine, LossKind, LossSetup, LyricTargetSet};
use crate::metrics::snr;
use crate::psycho::{MaskingParams, UtilityLoss};
use crate::scalar::Real;

/// Floor under the square root of the running variance. At `n = 1` the
/// variance is exactly zero.
pub const NORM_EPS: f64 = 1e-8;

/// Running per-loss mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossStats<T: Real = f64> {
    mean: [T; 7],
    var: [T; 7],
    pub eps: T,
}

impl<T: Real> Default for LossStats<T> {
    fn default() -> Self {
        Self {
            mean: [T::zero(); 7],
            var: [T::one(); 7],
            eps: T::lit(NORM_EPS),
        }
    }
}

impl<T: Real> LossStats<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mean(&self, k: LossKind) -> T {
        self.mean[k.index()]
    }

    pub fn var(&self, k: LossKind) -> T {
        self.var[k.index()]
    }

    /// Gradient scale of the normalized loss: `1 / sqrt(var + eps)`.
    pub fn weight(&self, k: LossKind) -> T {
        T::one() / (self.var(k) + self.eps).sqrt()
    }

    /// Folds the `n`-th observation `f` into the statistics of `k` and
    /// returns the standardized value. The mean is updated first and the
    /// variance update uses the new mean.
    pub fn normalize(&mut self, k: LossKind, f: T, n: usize) -> T {
        let i = k.index();
        let n = T::from_usize_lossy(n.max(1));
        self.mean[i] = self.mean[i] + (f - self.mean[i]) / n;
        let dev = f - self.mean[i];
        self.var[i] = self.var[i] + (dev * dev - self.var[i]) / n;
        dev / (self.var[i] + self.eps).sqrt()
    }
}

/// Free-function form of [`LossStats::normalize`].
pub fn normalize_loss<T: Real>(stats: &mut LossStats<T>, k: LossKind, f: T, n: usize) -> T {
    stats.normalize(k, f, n)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f64> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: T, n: usize) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state has {} entries, params {}, gradient {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// How the standardized losses are weighted before summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// Every factor is 1: normalization alone balances the losses.
    #[default]
    Auto,
    /// Per-loss factors; missing entries default to 1.
    Explicit(BTreeMap<LossKind, f64>),
}

impl Balance {
    pub fn factor(&self, k: LossKind) -> f64 {
        match self {
            Balance::Auto => 1.0,
            Balance::Explicit(m) => m.get(&k).copied().unwrap_or(1.0),
        }
    }
}

/// Which masking threshold the utility loss hides the perturbation under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMode {
    /// Voice only.
    Basic,
    /// Voice and backing track jointly.
    #[default]
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtectionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub protect_target: bool,
    pub protect_source: bool,
    pub transfer_identity: bool,
    pub transfer_lyric: bool,
    /// Number of lyric targets.
    pub n_targets: usize,
    pub flir: FlirConfig,
    /// Framing of the masking threshold and utility loss.
    pub utility_frame: FrameSpec,
    pub utility: UtilityMode,
    pub masking: MaskingParams,
    pub seed: u64,
    /// Identity encoders to ensemble; empty means every non-held-out one.
    pub identity_encoders: Vec<String>,
    pub lyric_encoders: Vec<String>,
    pub balance: Balance,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.001,
            protect_target: true,
            protect_source: true,
            transfer_identity: false,
            transfer_lyric: false,
            n_targets: 10,
            flir: FlirConfig::default(),
            utility_frame: FrameSpec::new(256, 128).expect("valid default frame"),
            utility: UtilityMode::Refined,
            masking: MaskingParams::default(),
            seed: 0,
            identity_encoders: Vec::new(),
            lyric_encoders: Vec::new(),
            balance: Balance::Auto,
        }
    }
}

impl ProtectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.n_targets == 0 {
            return Err(Error::InvalidConfig("need at least one lyric target".into()));
        }
        if let Balance::Explicit(m) = &self.balance {
            if let Some((k, v)) = m.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidConfig(format!("balance factor for {k} is {v}")));
            }
        }
        self.flir.validate()?;
        self.utility_frame.validate()
    }

    /// Losses switched on by the flags, in canonical order.
    pub fn enabled_losses(&self) -> Vec<LossKind> {
        let mut out = Vec::new();
        if self.protect_target {
            out.extend([LossKind::IdentityUntargeted, LossKind::IdentityTargeted]);
        }
        if self.protect_source {
            out.extend([LossKind::LyricHigh, LossKind::LyricLow]);
        }
        out.push(LossKind::Utility);
        if self.transfer_identity {
            out.push(LossKind::FlirIdentity);
        }
        if self.transfer_lyric {
            out.push(LossKind::FlirLyric);
        }
        out
    }

    pub fn needs_destination(&self) -> bool {
        self.protect_target
    }

    pub fn needs_targets(&self) -> bool {
        self.protect_source || self.transfer_lyric
    }
}

/// Everything `protect` needs besides the song.
#[derive(Debug, Clone, Copy)]
pub struct ProtectionContext<'a, T: Real = f64> {
    pub encoders: &'a EncoderSet<T>,
    pub destination: Option<&'a DestinationSinger<T>>,
    pub targets: Option<&'a LyricTargetSet<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: LossKind,
    pub raw: f64,
    pub normalized: f64,
}

/// Per-iteration values of the enabled losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<LossKind> {
        let mut ks: Vec<_> = self.rows.iter().map(|r| r.loss).collect();
        ks.sort();
        ks.dedup();
        ks
    }

    /// Raw values of one loss, by iteration.
    pub fn raw(&self, k: LossKind) -> Vec<f64> {
        self.rows.iter().filter(|r| r.loss == k).map(|r| r.raw).collect()
    }

    pub fn normalized(&self, k: LossKind) -> Vec<f64> {
        self.rows.iter().filter(|r| r.loss == k).map(|r| r.normalized).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("trace", e))?;
        Ok(())
    }

    /// One row per iteration, one raw-value column per enabled loss.
    pub fn write_wide_csv<W: Write>(&self, out: W) -> Result<()> {
        let ks = self.losses();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend(ks.iter().map(|k| k.name().to_string()));
        w.write_record(&header)?;
        let cols: Vec<Vec<f64>> = ks.iter().map(|&k| self.raw(k)).collect();
        let n = cols.iter().map(Vec::len).min().unwrap_or(0);
        for i in 0..n {
            let mut rec = vec![i.to_string()];
            rec.extend(cols.iter().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("trace", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionSummary {
    pub iterations: usize,
    pub enabled: Vec<LossKind>,
    /// Raw loss values at the start (`x0`) and after the last step.
    pub initial: Vec<(LossKind, f64)>,
    pub final_values: Vec<(LossKind, f64)>,
    pub snr_voice_db: f64,
    pub snr_mix_db: f64,
    pub mean_iteration_secs: f64,
}

impl fmt::Display for ProtectionSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations: {}", self.iterations)?;
        let names: Vec<_> = self.enabled.iter().map(|k| k.name()).collect();
        writeln!(f, "enabled: {}", names.join(","))?;
        writeln!(f, "snr_voice_db: {:.3}", self.snr_voice_db)?;
        writeln!(f, "snr_mix_db: {:.3}", self.snr_mix_db)?;
        writeln!(f, "mean_iteration_secs: {:.6}", self.mean_iteration_secs)?;
        for ((k, a), (_, b)) in self.initial.iter().zip(&self.final_values) {
            writeln!(f, "{}: {a:.6} -> {b:.6}", k.name())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProtectionResult<T: Real = f64> {
    pub protected: Waveform<T>,
    pub traces: LossTrace,
    pub summary: ProtectionSummary,
}

/// Builds the loss engine for one song.
pub fn build_engine<'a, T: Real>(
    song: &'a Song<T>,
    ctx: &ProtectionContext<'a, T>,
    cfg: &ProtectionConfig,
) -> Result<LossEngine<'a, T>> {
    let x0 = &song.voice;
    let utility = match cfg.utility {
        UtilityMode::Basic => UtilityLoss::basic(x0, &cfg.utility_frame, &cfg.masking)?,
        UtilityMode::Refined => UtilityLoss::refined(x0, &song.backing, &cfg.utility_frame, &cfg.masking)?,
    };
    let identity = if cfg.protect_target || cfg.transfer_identity {
        ctx.encoders.ensemble(EncoderKind::Identity, &cfg.identity_encoders)?
    } else {
        Vec::new()
    };
    let lyric = if cfg.protect_source || cfg.transfer_lyric {
        ctx.encoders.ensemble(EncoderKind::Lyric, &cfg.lyric_encoders)?
    } else {
        Vec::new()
    };
    LossEngine::new(LossSetup {
        x0,
        utility,
        identity,
        lyric,
        acoustic: Some(ctx.encoders.acoustic()),
        destination: ctx.destination,
        targets: ctx.targets,
        enabled: cfg.enabled_losses(),
        flir: cfg.flir,
    })
}

/// Runs the protection loop on the voice channel of `song`.
pub fn protect<T: Real>(song: &Song<T>, ctx: &ProtectionContext<'_, T>, cfg: &ProtectionConfig) -> Result<ProtectionResult<T>> {
    cfg.validate()?;
    if !cfg.protect_target && !cfg.protect_source {
        log::warn!("neither protect_target nor protect_source is set; only the utility loss is active");
    }
    let engine = build_engine(song, ctx, cfg)?;
    let enabled = engine.enabled().to_vec();
    let weights: Vec<(LossKind, T)> = enabled.iter().map(|&k| (k, T::lit(cfg.balance.factor(k)))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = LossStats::<T>::new();
    let mut adam = Adam::new(T::lit(cfg.learning_rate), song.voice.len());
    let mut x = song.voice.samples().to_vec();
    let mut trace = LossTrace {
        rows: Vec::with_capacity(cfg.iterations * enabled.len()),
    };
    let mut initial = Vec::new();
    let started = Instant::now();
    for n in 1..=cfg.iterations {
        let ev = engine.evaluate(&x, &mut rng)?;
        if n == 1 {
            initial = ev.values.iter().map(|&(k, v)| (k, v.as_f64())).collect();
        }
        let mut step_weights = Vec::with_capacity(weights.len());
        for &(k, lambda) in &weights {
            let raw = ev.value(k).expect("enabled loss evaluated");
            if !raw.is_finite() {
                return Err(Error::NonFinite(format!("{k} at iteration {n}")));
            }
            let normalized = stats.normalize(k, raw, n);
            trace.rows.push(TraceRow {
                iteration: n,
                loss: k,
                raw: raw.as_f64(),
                normalized: normalized.as_f64(),
            });
            step_weights.push((k, lambda * stats.weight(k)));
        }
        let grad = engine.gradient(&ev, &step_weights);
        adam.step(&mut x, &grad)?;
        x.iter_mut().for_each(|s| *s = clip_unit(*s));
        log::trace!("iteration {n} done");
    }
    let mean_iteration_secs = started.elapsed().as_secs_f64() / cfg.iterations as f64;
    let final_ev = engine.evaluate(&x, &mut rng)?;
    let protected = Waveform::new(x, song.voice.sample_rate())?;
    let mixed = song.with_voice(protected.clone())?;
    let summary = ProtectionSummary {
        iterations: cfg.iterations,
        enabled,
        initial,
        final_values: final_ev.values.iter().map(|&(k, v)| (k, v.as_f64())).collect(),
        snr_voice_db: snr(&song.voice, &protected)?,
        snr_mix_db: snr(&mix_to_mono(song), &mix_to_mono(&mixed))?,
        mean_iteration_secs,
    };
    Ok(ProtectionResult {
        protected,
        traces: trace,
        summary,
    })
}
