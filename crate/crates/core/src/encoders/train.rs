//! Training recipe for the toy encoders: full-batch gradient descent on a
//! classification head that is discarded afterwards.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderHandle, EncoderKind, EncoderSet};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::features::{FrontEnd, FrontEndConfig};
use crate::nn::{Mlp, MlpGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub identity_epochs: usize,
    pub lyric_epochs: usize,
    pub learning_rate: f64,
    /// Protection-eligible encoders per kind; one held-out encoder is added.
    pub ensemble_size: usize,
    /// Share of each singer's clips an encoder trains on.
    pub train_fraction: f64,
    pub accuracy_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            out_dim: 32,
            identity_epochs: 60,
            lyric_epochs: 150,
            learning_rate: 0.5,
            ensemble_size: 3,
            train_fraction: 0.8,
            accuracy_floor: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 || self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("layer widths and ensemble size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig("learning rate must be positive, train fraction in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainEntry {
    pub id: String,
    pub kind: EncoderKind,
    pub held_out: bool,
    pub seed: u64,
    pub train_clips: usize,
    pub accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub entries: Vec<TrainEntry>,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "id,kind,held_out,seed,train_clips,accuracy,final_loss")?;
        for e in &self.entries {
            writeln!(
                f,
                "{},{},{},{},{},{:.4},{:.6}",
                e.id, e.kind, e.held_out, e.seed, e.train_clips, e.accuracy, e.final_loss
            )?;
        }
        Ok(())
    }
}

/// Log-mel rows of one clip plus its labels.
struct Example {
    rows: Vec<f64>,
    singer: usize,
    /// `None` for frames straddling a symbol boundary.
    frame_labels: Vec<Option<usize>>,
}

pub(crate) fn softmax_ce(logits: &[f64], label: usize, dlogits: &mut [f64]) -> (f64, bool) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    for (d, l) in dlogits.iter_mut().zip(logits) {
        *d = (l - max).exp() / z;
    }
    let loss = -(dlogits[label].max(1e-300)).ln();
    dlogits[label] -= 1.0;
    let argmax = logits
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > logits[b] { i } else { b });
    (loss, argmax == label)
}

/// Classification head without bias, `n_class x dim`.
pub(crate) struct Head {
    pub(crate) w: Vec<f64>,
    dim: usize,
}

impl Head {
    pub(crate) fn new(n_class: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_class + dim) as f64).sqrt();
        Self {
            w: (0..n_class * dim).map(|_| rng.random_range(-a..a)).collect(),
            dim,
        }
    }

    pub(crate) fn logits(&self, e: &[f64]) -> Vec<f64> {
        self.w.chunks_exact(self.dim).map(|r| crate::scalar::dot(r, e)).collect()
    }

    /// Accumulates the head gradient and returns the embedding cotangent.
    pub(crate) fn backward(&self, e: &[f64], dlogits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut de = vec![0.0; self.dim];
        for (c, &d) in dlogits.iter().enumerate() {
            let r = c * self.dim..(c + 1) * self.dim;
            crate::scalar::axpy(d, e, &mut grad[r.clone()]);
            crate::scalar::axpy(d, &self.w[r], &mut de);
        }
        de
    }
}

fn standardize(net: &mut Mlp<f64>, examples: &[&Example], n_mels: usize) {
    let mut sum = vec![0.0; n_mels];
    let mut sq = vec![0.0; n_mels];
    let mut n = 0usize;
    for ex in examples {
        for row in ex.rows.chunks_exact(n_mels) {
            n += 1;
            for (k, &v) in row.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
    }
    let n = n.max(1) as f64;
    for k in 0..n_mels {
        let mean = sum[k] / n;
        let var = (sq[k] / n - mean * mean).max(0.0);
        net.input_shift[k] = mean;
        net.input_scale[k] = 1.0 / (var.sqrt() + 1e-3);
    }
}

struct Outcome {
    net: Mlp<f64>,
    accuracy: f64,
    loss: f64,
}

fn train_identity(
    examples: &[&Example],
    n_class: usize,
    sizes: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome> {
    let n_mels = sizes[0];
    let dim = *sizes.last().expect("sizes");
    let mut net = Mlp::new(sizes, rng)?;
    standardize(&mut net, examples, n_mels);
    let mut head = Head::new(n_class, dim, rng);
    let inv_n = 1.0 / examples.len() as f64;
    let mut last = (0.0, 0.0);
    for epoch in 0..=cfg.identity_epochs {
        let mut grads = MlpGrads::zeros_like(&net);
        let mut hgrad = vec![0.0; head.w.len()];
        let (mut loss, mut correct) = (0.0, 0usize);
        for ex in examples {
            let caches: Vec<_> = ex.rows.chunks_exact(n_mels).map(|r| net.forward_row(r)).collect();
            let inv_t = 1.0 / caches.len() as f64;
            let mut e = vec![0.0; dim];
            for c in &caches {
                crate::scalar::axpy(inv_t, c.output(), &mut e);
            }
            let logits = head.logits(&e);
            let mut dl = vec![0.0; n_class];
            let (l, ok) = softmax_ce(&logits, ex.singer, &mut dl);
            loss += l * inv_n;
            correct += ok as usize;
            if epoch == cfg.identity_epochs {
                continue;
            }
            dl.iter_mut().for_each(|d| *d *= inv_n);
            let de: Vec<f64> = head.backward(&e, &dl, &mut hgrad).iter().map(|v| v * inv_t).collect();
            for c in &caches {
                net.backward_row(c, &de, None, Some(&mut grads));
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("identity loss diverged at epoch {epoch}")));
        }
        last = (correct as f64 * inv_n, loss);
        if epoch < cfg.identity_epochs {
            net.descend(&grads, cfg.learning_rate);
            crate::scalar::axpy(-cfg.learning_rate, &hgrad, &mut head.w);
        }
    }
    Ok(Outcome {
        net,
        accuracy: last.0,
        loss: last.1,
    })
}

fn train_lyric(
    examples: &[&Example],
    n_class: usize,
    sizes: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome> {
    let n_mels = sizes[0];
    let dim = *sizes.last().expect("sizes");
    let mut net = Mlp::new(sizes, rng)?;
    standardize(&mut net, examples, n_mels);
    let mut head = Head::new(n_class, dim, rng);
    let n_frames: usize = examples.iter().map(|e| e.frame_labels.iter().flatten().count()).sum();
    let inv_n = 1.0 / n_frames as f64;
    let mut last = (0.0, 0.0);
    for epoch in 0..=cfg.lyric_epochs {
        let mut grads = MlpGrads::zeros_like(&net);
        let mut hgrad = vec![0.0; head.w.len()];
        let (mut loss, mut correct) = (0.0, 0usize);
        let mut dl = vec![0.0; n_class];
        for ex in examples {
            for (row, label) in ex.rows.chunks_exact(n_mels).zip(&ex.frame_labels) {
                let Some(label) = *label else { continue };
                let cache = net.forward_row(row);
                let logits = head.logits(cache.output());
                let (l, ok) = softmax_ce(&logits, label, &mut dl);
                loss += l * inv_n;
                correct += ok as usize;
                if epoch == cfg.lyric_epochs {
                    continue;
                }
                dl.iter_mut().for_each(|d| *d *= inv_n);
                let de = head.backward(cache.output(), &dl, &mut hgrad);
                net.backward_row(&cache, &de, None, Some(&mut grads));
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("lyric loss diverged at epoch {epoch}")));
        }
        last = (correct as f64 * inv_n, loss);
        if epoch < cfg.lyric_epochs {
            net.descend(&grads, cfg.learning_rate);
            crate::scalar::axpy(-cfg.learning_rate, &hgrad, &mut head.w);
        }
    }
    Ok(Outcome {
        net,
        accuracy: last.0,
        loss: last.1,
    })
}

/// Per-singer random subset of clip indices.
fn split(singers: &[Vec<usize>], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for clips in singers {
        let mut c = clips.clone();
        c.shuffle(rng);
        let k = ((c.len() as f64 * fraction).ceil() as usize).clamp(1, c.len());
        out.extend_from_slice(&c[..k]);
    }
    out.sort_unstable();
    out
}

pub fn train_toy(corpus: &Corpus, seed: u64) -> Result<(EncoderSet<f64>, TrainReport)> {
    train_toy_with(corpus, &TrainConfig::default(), seed)
}

/// Trains `ensemble_size` identity and lyric encoders plus one held-out
/// encoder of each kind. Fails if any encoder misses the accuracy floor.
pub fn train_toy_with(corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<(EncoderSet<f64>, TrainReport)> {
    cfg.validate()?;
    corpus.config.validate()?;
    let front_cfg = FrontEndConfig::for_rate(corpus.config.sample_rate);
    let front = FrontEnd::<f64>::new(&front_cfg)?;
    let singer_ids = corpus.singer_ids();
    let examples = corpus
        .clips
        .iter()
        .map(|clip| {
            let pass = front.forward(clip.voice.samples())?;
            Ok(Example {
                rows: pass.rows,
                singer: singer_ids.iter().position(|s| *s == clip.singer).expect("listed singer"),
                frame_labels: corpus.steady_frame_labels(
                    clip,
                    front_cfg.frame.frame_length,
                    front_cfg.frame.frame_shift,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let by_singer: Vec<Vec<usize>> = singer_ids
        .iter()
        .map(|s| (0..corpus.clips.len()).filter(|&i| corpus.clips[i].singer == *s).collect())
        .collect();
    let sizes = [front_cfg.n_mels, cfg.hidden, cfg.hidden, cfg.out_dim];

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut handles = Vec::new();
    let mut report = TrainReport::default();
    for kind in [EncoderKind::Identity, EncoderKind::Lyric] {
        for i in 0..=cfg.ensemble_size {
            let held_out = i == cfg.ensemble_size;
            let enc_seed: u64 = master.random();
            let id = if held_out {
                format!("{kind}-eval")
            } else {
                format!("{kind}-{i}")
            };
            let mut rng = ChaCha8Rng::seed_from_u64(enc_seed);
            let chosen = split(&by_singer, cfg.train_fraction, &mut rng);
            let subset: Vec<&Example> = chosen.iter().map(|&i| &examples[i]).collect();
            let outcome = match kind {
                EncoderKind::Identity => train_identity(&subset, singer_ids.len(), &sizes, cfg, &mut rng)?,
                _ => train_lyric(&subset, corpus.symbols.len(), &sizes, cfg, &mut rng)?,
            };
            log::info!("trained {id}: accuracy {:.3}, loss {:.4}", outcome.accuracy, outcome.loss);
            report.entries.push(TrainEntry {
                id: id.clone(),
                kind,
                held_out,
                seed: enc_seed,
                train_clips: chosen.len(),
                accuracy: outcome.accuracy,
                final_loss: outcome.loss,
            });
            if outcome.accuracy < cfg.accuracy_floor {
                return Err(Error::Training(format!(
                    "{id} reached {:.3} training accuracy, below the floor {:.3}",
                    outcome.accuracy, cfg.accuracy_floor
                )));
            }
            handles.push(EncoderHandle::new(id, kind, held_out, enc_seed, &front_cfg, Some(outcome.net))?);
        }
    }
    Ok((EncoderSet::new(handles)?, report))
}
