//! Adaptive adversaries against protected songs: signal transforms, a
//! score-only NES attack that runs protection in reverse, and fine-tuning
//! of an encoder on (clean, protected) pairs.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{clip_unit, FrameSpec, Song, Waveform};
use crate::encoders::train::{softmax_ce, Head};
use crate::encoders::{EncoderHandle, EncoderKind};
use crate::error::{Error, Result};
use crate::losses::{cosine_and_grad, seq_dist_and_grad, LossKind};
use crate::metrics::EvalReport;
use crate::nn::{Mlp, MlpGrads};
use crate::optim::{Adam, LossStats};
use crate::psycho::{MaskingParams, UtilityLoss};
use crate::scalar::{axpy, Real};

/// Gaussian noise scaled so that `10 log10(P_w / P_noise)` equals
/// `target_snr_db` exactly, before any clipping.
pub fn gaussian_noise<T: Real>(w: &Waveform<T>, target_snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if !target_snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!("target SNR must be finite, got {target_snr_db}")));
    }
    let p = w.power().as_f64();
    if p == 0.0 {
        return Err(Error::ZeroNorm("noise reference signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let scale = (p / (pn * 10f64.powf(target_snr_db / 10.0))).sqrt();
    noise.iter_mut().for_each(|v| *v *= scale);
    Ok(noise)
}

/// Adds white Gaussian noise at `target_snr_db` and clips to `[-1, 1]`.
pub fn gaussian_at<T: Real>(w: &Waveform<T>, target_snr_db: f64, seed: u64) -> Result<Waveform<T>> {
    let noise = gaussian_noise(w, target_snr_db, seed)?;
    let samples = w.samples().iter().zip(noise).map(|(&s, n)| s + T::lit(n)).collect();
    Waveform::from_clipped(samples, w.sample_rate())
}

/// Rounds every sample to the grid of step `2^(1 - bits)` on `[-1, 1]`.
pub fn requantize<T: Real>(w: &Waveform<T>, bits: u32) -> Result<Waveform<T>> {
    if !(4..=16).contains(&bits) {
        return Err(Error::InvalidConfig(format!("requantization needs 4..=16 bits, got {bits}")));
    }
    let levels = T::lit(2f64.powi(bits as i32 - 1));
    let samples = w
        .samples()
        .iter()
        .map(|&s| clip_unit((s * levels).round() / levels))
        .collect();
    Waveform::new(samples, w.sample_rate())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NesConfig {
    /// Oracle queries per gradient estimate; even, as samples come in
    /// antithetic pairs.
    pub samples_per_draw: usize,
    pub iterations: usize,
    pub sigma: f64,
    /// Adam learning rate of the adversary's own updates.
    pub step_size: f64,
    /// Largest change the adversary may make to any sample.
    pub max_change: f64,
    /// Frames and masking model of the adversary's own utility loss.
    pub utility_frame: FrameSpec,
    pub masking: MaskingParams,
    /// Hard cap on oracle calls; `None` means `samples_per_draw * iterations`.
    pub query_budget: Option<usize>,
}

impl Default for NesConfig {
    fn default() -> Self {
        Self {
            samples_per_draw: 50,
            iterations: 1000,
            sigma: 1e-3,
            step_size: 1e-3,
            max_change: 1.0,
            utility_frame: FrameSpec::new(256, 128).expect("valid frame spec"),
            masking: MaskingParams::default(),
            query_budget: None,
        }
    }
}

impl NesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_draw < 2 || self.samples_per_draw % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "samples_per_draw must be even and at least 2, got {}",
                self.samples_per_draw
            )));
        }
        for (name, v) in [("sigma", self.sigma), ("step_size", self.step_size), ("max_change", self.max_change)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.query_budget.unwrap_or(self.samples_per_draw * self.iterations)
    }
}

/// Score-only oracle that counts its calls and refuses to exceed a budget.
pub struct CountingOracle<F> {
    f: F,
    calls: usize,
    budget: usize,
}

impl<F: FnMut(&[f64]) -> Result<f64>> CountingOracle<F> {
    pub fn new(f: F, budget: usize) -> Self {
        Self { f, calls: 0, budget }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.calls
    }

    pub fn query(&mut self, x: &[f64]) -> Result<f64> {
        if self.calls >= self.budget {
            return Err(Error::BudgetExhausted(self.budget));
        }
        self.calls += 1;
        let v = (self.f)(x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("oracle score at call {}", self.calls)));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesEstimate {
    pub grad: Vec<f64>,
    /// Mean score over all queries of the draw, a free estimate of `f(x)`.
    pub mean_score: f64,
}

/// One antithetic NES gradient estimate using exactly
/// `cfg.samples_per_draw` oracle calls. Fails up front, without querying,
/// when fewer calls remain.
pub fn nes_gradient<F: FnMut(&[f64]) -> Result<f64>>(
    oracle: &mut CountingOracle<F>,
    x: &[f64],
    cfg: &NesConfig,
    rng: &mut impl Rng,
) -> Result<NesEstimate> {
    cfg.validate()?;
    if oracle.remaining() < cfg.samples_per_draw {
        return Err(Error::BudgetExhausted(oracle.budget()));
    }
    let pairs = cfg.samples_per_draw / 2;
    let mut grad = vec![0.0; x.len()];
    let mut probe = vec![0.0; x.len()];
    let mut total = 0.0;
    for _ in 0..pairs {
        let u: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        for ((p, &xi), &ui) in probe.iter_mut().zip(x).zip(&u) {
            *p = xi + cfg.sigma * ui;
        }
        let plus = oracle.query(&probe)?;
        for ((p, &xi), &ui) in probe.iter_mut().zip(x).zip(&u) {
            *p = xi - cfg.sigma * ui;
        }
        let minus = oracle.query(&probe)?;
        total += plus + minus;
        axpy(plus - minus, &u, &mut grad);
    }
    let k = 1.0 / (cfg.sigma * cfg.samples_per_draw as f64);
    grad.iter_mut().for_each(|g| *g *= k);
    Ok(NesEstimate {
        grad,
        mean_score: total / cfg.samples_per_draw as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversaryStep {
    pub iteration: usize,
    pub oracle_score: f64,
    pub lyric_loss: f64,
    pub utility_loss: f64,
    pub queries: usize,
}

#[derive(Debug, Clone)]
pub struct AdversaryRun {
    pub song: Song,
    pub trace: Vec<AdversaryStep>,
    pub queries: usize,
    pub budget: usize,
    pub exhausted: bool,
}

impl AdversaryRun {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("adversary trace", e))?;
        Ok(())
    }
}

/// Runs protection in reverse on the voice of `protected`: raises the
/// black-box `speaker_oracle` score through NES estimates, pulls the lyric
/// features (white-box, through `lyric_encoders`) towards
/// `expected_lyric_voice`, and keeps its own change inaudible with the
/// masking-threshold utility loss relative to `protected`. The three terms
/// are balanced by running normalization, as in protection. Running out of
/// oracle budget ends the run early and is reported in the result.
pub fn optimization_adversary<F>(
    protected: &Song,
    expected_lyric_voice: &Waveform,
    speaker_oracle: F,
    lyric_encoders: &[&EncoderHandle],
    cfg: &NesConfig,
    seed: u64,
) -> Result<AdversaryRun>
where
    F: FnMut(&Waveform) -> Result<f64>,
{
    cfg.validate()?;
    if let Some(h) = lyric_encoders.iter().find(|h| h.kind() != EncoderKind::Lyric) {
        return Err(Error::KindMismatch {
            expected: "lyric",
            actual: h.kind().name(),
        });
    }
    let rate = protected.voice.sample_rate();
    let mut speaker_oracle = speaker_oracle;
    let mut oracle = CountingOracle::new(
        |x: &[f64]| speaker_oracle(&Waveform::from_clipped(x.to_vec(), rate)?),
        cfg.budget(),
    );
    let expected = lyric_encoders
        .iter()
        .map(|h| h.frame_outputs(expected_lyric_voice))
        .collect::<Result<Vec<_>>>()?;
    let utility = UtilityLoss::refined(&protected.voice, &protected.backing, &cfg.utility_frame, &cfg.masking)?;
    let x0 = protected.voice.samples().to_vec();
    let mut x = x0.clone();
    let mut adam = Adam::new(cfg.step_size, x.len());
    let mut stats = LossStats::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut exhausted = false;
    for iteration in 0..cfg.iterations {
        let n = iteration + 1;
        let est = match nes_gradient(&mut oracle, &x, cfg, &mut rng) {
            Ok(e) => e,
            Err(Error::BudgetExhausted(b)) => {
                log::warn!("adversary stopped at iteration {iteration}: budget of {b} queries spent");
                exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        // the speaker term is minimized as the negated score
        stats.normalize(SPEAKER, -est.mean_score, n);
        let mut g: Vec<f64> = est.grad.iter().map(|v| -v * stats.weight(SPEAKER)).collect();
        let mut lyric_loss = 0.0;
        if !lyric_encoders.is_empty() {
            let w = Waveform::new(x.clone(), rate)?;
            let mut gl = vec![0.0; x.len()];
            let inv = 1.0 / lyric_encoders.len() as f64;
            for (h, target) in lyric_encoders.iter().zip(&expected) {
                let (l, cot) = seq_dist_and_grad(&h.frame_outputs(&w)?, target)?;
                lyric_loss += l * inv;
                axpy(inv, &h.input_gradient(&w, &cot)?, &mut gl);
            }
            stats.normalize(LYRIC, lyric_loss, n);
            axpy(stats.weight(LYRIC), &gl, &mut g);
        }
        let (utility_loss, gu) = utility.value_and_grad(&x)?;
        stats.normalize(LossKind::Utility, utility_loss, n);
        axpy(stats.weight(LossKind::Utility), &gu, &mut g);
        adam.step(&mut x, &g)?;
        for (v, &o) in x.iter_mut().zip(&x0) {
            *v = clip_unit(v.clamp(o - cfg.max_change, o + cfg.max_change));
        }
        trace.push(AdversaryStep {
            iteration,
            oracle_score: est.mean_score,
            lyric_loss,
            utility_loss,
            queries: oracle.calls(),
        });
    }
    let queries = oracle.calls();
    log::info!("optimization adversary used {queries} of {} oracle queries", cfg.budget());
    Ok(AdversaryRun {
        song: protected.with_voice(Waveform::new(x, rate)?)?,
        trace,
        queries,
        budget: cfg.budget(),
        exhausted,
    })
}

// Statistic slots the adversary's terms are normalized in.
const SPEAKER: LossKind = LossKind::IdentityUntargeted;
const LYRIC: LossKind = LossKind::LyricHigh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneLoss {
    /// Only pull protected embeddings towards their clean counterparts.
    F1,
    /// Additionally keep the encoder's classification loss low.
    F1PlusF2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub loss_mode: FinetuneLoss,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Re-derive the conversion proxy's singer centroids with the
    /// fine-tuned encoder instead of the original one.
    pub retrain_decoder_analog: bool,
    /// Epochs used to refit the classification head behind `f2`.
    pub head_epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            loss_mode: FinetuneLoss::F1PlusF2,
            epochs: 50,
            learning_rate: 0.1,
            retrain_decoder_analog: true,
            head_epochs: 300,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fine-tuning learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub f1_before: f64,
    pub f1_after: f64,
    /// Classification loss and accuracy under the refitted head; `NaN`
    /// without labelled clips.
    pub f2_before: f64,
    pub f2_after: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

struct Rows {
    rows: Vec<f64>,
    n_frames: usize,
}

fn rows_of(h: &EncoderHandle, w: &Waveform) -> Result<Rows> {
    let pass = h.front_pass(w)?;
    Ok(Rows {
        n_frames: pass.n_frames(),
        rows: pass.rows,
    })
}

fn pooled(net: &Mlp<f64>, r: &Rows, n_mels: usize) -> (Vec<crate::nn::RowCache<f64>>, Vec<f64>) {
    let caches: Vec<_> = r.rows.chunks_exact(n_mels).map(|row| net.forward_row(row)).collect();
    let mut e = vec![0.0; net.n_out()];
    let inv = 1.0 / r.n_frames as f64;
    for c in &caches {
        axpy(inv, c.output(), &mut e);
    }
    (caches, e)
}

fn backprop_pooled(net: &Mlp<f64>, caches: &[crate::nn::RowCache<f64>], de: &[f64], grads: &mut MlpGrads<f64>) {
    let inv = 1.0 / caches.len() as f64;
    let de: Vec<f64> = de.iter().map(|v| v * inv).collect();
    for c in caches {
        net.backward_row(c, &de, None, Some(grads));
    }
}

/// Mean `1 - cos` over pairs, with gradients accumulated into `grads`
/// when given.
fn f1_pass(net: &Mlp<f64>, pairs: &[(Rows, Rows)], n_mels: usize, mut grads: Option<&mut MlpGrads<f64>>) -> Result<f64> {
    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for (a, b) in pairs {
        let (ca, ea) = pooled(net, a, n_mels);
        let (cb, eb) = pooled(net, b, n_mels);
        let (c, ga) = cosine_and_grad(&ea, &eb)?;
        total += (1.0 - c) * inv;
        if let Some(g) = grads.as_deref_mut() {
            let (_, gb) = cosine_and_grad(&eb, &ea)?;
            let da: Vec<f64> = ga.iter().map(|v| -v * inv).collect();
            let db: Vec<f64> = gb.iter().map(|v| -v * inv).collect();
            backprop_pooled(net, &ca, &da, g);
            backprop_pooled(net, &cb, &db, g);
        }
    }
    Ok(total)
}

/// Mean cross-entropy and accuracy under a frozen head.
fn f2_pass(net: &Mlp<f64>, head: &Head, labelled: &[(Rows, usize)], n_mels: usize, mut grads: Option<&mut MlpGrads<f64>>) -> (f64, f64) {
    let inv = 1.0 / labelled.len() as f64;
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut scratch = vec![0.0; head.w.len()];
    for (r, label) in labelled {
        let (caches, e) = pooled(net, r, n_mels);
        let logits = head.logits(&e);
        let mut dl = vec![0.0; logits.len()];
        let (l, ok) = softmax_ce(&logits, *label, &mut dl);
        loss += l * inv;
        correct += ok as usize;
        if let Some(g) = grads.as_deref_mut() {
            dl.iter_mut().for_each(|d| *d *= inv);
            let de = head.backward(&e, &dl, &mut scratch);
            backprop_pooled(net, &caches, &de, g);
        }
    }
    (loss, correct as f64 * inv)
}

/// Fits a bias-free softmax head on the frozen encoder's pooled embeddings.
fn refit_head(net: &Mlp<f64>, labelled: &[(Rows, usize)], n_mels: usize, epochs: usize, seed: u64) -> Head {
    let n_class = labelled.iter().map(|(_, l)| l + 1).max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = Head::new(n_class, net.n_out(), &mut rng);
    let embs: Vec<Vec<f64>> = labelled.iter().map(|(r, _)| pooled(net, r, n_mels).1).collect();
    let inv = 1.0 / labelled.len() as f64;
    for _ in 0..epochs {
        let mut grad = vec![0.0; head.w.len()];
        for (e, (_, label)) in embs.iter().zip(labelled) {
            let logits = head.logits(e);
            let mut dl = vec![0.0; n_class];
            softmax_ce(&logits, *label, &mut dl);
            dl.iter_mut().for_each(|d| *d *= inv);
            head.backward(e, &dl, &mut grad);
        }
        axpy(-0.5, &grad, &mut head.w);
    }
    head
}

/// Fine-tunes an identity encoder so protected clips embed like their
/// clean originals (`f1`), optionally while keeping the singer
/// classification loss (`f2`) on `labelled` clean clips low. `f2` uses a
/// head refitted on the frozen original encoder, since the toy encoders
/// discard their training heads.
pub fn finetune_encoder(
    h: &EncoderHandle,
    pairs: &[(&Waveform, &Waveform)],
    labelled: &[(&Waveform, usize)],
    cfg: &FinetuneConfig,
) -> Result<(EncoderHandle, FinetuneReport)> {
    cfg.validate()?;
    if h.kind() != EncoderKind::Identity {
        return Err(Error::KindMismatch {
            expected: "identity",
            actual: h.kind().name(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning needs at least one (clean, protected) pair".into()));
    }
    if cfg.loss_mode == FinetuneLoss::F1PlusF2 && labelled.is_empty() {
        return Err(Error::InvalidConfig("f1_plus_f2 fine-tuning needs labelled clips".into()));
    }
    let mut net = h.net().expect("identity encoders carry a network").clone();
    let n_mels = net.n_in();
    let pair_rows = pairs
        .iter()
        .map(|(a, b)| Ok((rows_of(h, a)?, rows_of(h, b)?)))
        .collect::<Result<Vec<_>>>()?;
    let lab_rows = labelled
        .iter()
        .map(|(w, l)| Ok((rows_of(h, w)?, *l)))
        .collect::<Result<Vec<_>>>()?;
    let head = (!lab_rows.is_empty()).then(|| refit_head(&net, &lab_rows, n_mels, cfg.head_epochs, cfg.seed));
    let measure = |net: &Mlp<f64>| -> Result<(f64, f64, f64)> {
        let f1 = f1_pass(net, &pair_rows, n_mels, None)?;
        let (f2, acc) = head.as_ref().map_or((f64::NAN, f64::NAN), |hd| f2_pass(net, hd, &lab_rows, n_mels, None));
        Ok((f1, f2, acc))
    };
    let before = measure(&net)?;
    for epoch in 0..cfg.epochs {
        let mut grads = MlpGrads::zeros_like(&net);
        let f1 = f1_pass(&net, &pair_rows, n_mels, Some(&mut grads))?;
        let f2 = match (cfg.loss_mode, head.as_ref()) {
            (FinetuneLoss::F1PlusF2, Some(hd)) => f2_pass(&net, hd, &lab_rows, n_mels, Some(&mut grads)).0,
            _ => 0.0,
        };
        if !(f1 + f2).is_finite() || !grads.norm().is_finite() {
            return Err(Error::Training(format!("fine-tuning diverged at epoch {epoch}")));
        }
        net.descend(&grads, cfg.learning_rate);
    }
    let after = measure(&net)?;
    let report = FinetuneReport {
        f1_before: before.0,
        f1_after: after.0,
        f2_before: before.1,
        f2_after: after.1,
        accuracy_before: before.2,
        accuracy_after: after.2,
    };
    Ok((h.with_net(net, format!("{}-ft", h.id())), report))
}

/// One row of the before/after robustness table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub adversary: String,
    pub parameters: String,
    pub srr_i: f64,
    pub srr_l: f64,
    pub srr_t: f64,
    pub is_defended: f64,
    pub wer_defended: f64,
    pub queries: usize,
}

impl AttackRow {
    pub fn from_report(adversary: impl Into<String>, parameters: impl Into<String>, r: &EvalReport, queries: usize) -> Self {
        Self {
            adversary: adversary.into(),
            parameters: parameters.into(),
            srr_i: r.srr.identity,
            srr_l: r.srr.lyric,
            srr_t: r.srr.both,
            is_defended: r.mean_is_defended(),
            wer_defended: r.mean_wer_defended(),
            queries,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("attack report", e))?;
        Ok(())
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:<28} {:>6} {:>6} {:>6} {:>7} {:>6} {:>8}", "adversary", "parameters", "SRR-I", "SRR-L", "SRR-T", "IS", "WER", "queries")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:<28} {:>6.3} {:>6.3} {:>6.3} {:>7.3} {:>6.3} {:>8}",
                r.adversary, r.parameters, r.srr_i, r.srr_l, r.srr_t, r.is_defended, r.wer_defended, r.queries
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
