//! Incremental evaluation of all enabled losses for one optimizer step.
//!
//! Every encoder reads the same log-mel front end, so one front-end pass
//! of `x` serves all of them and the weighted output cotangents of all
//! losses go through a single backward pass. Interaction-reduction variants
//! differ from `x` (or `x0`) only inside one short frame, so only the
//! front-end frames overlapping that frame are recomputed.

use std::ops::Range;

use rand::Rng;
use rustfft::num_complex::Complex;

use super::{cosine_and_grad, DestinationSinger, FlirConfig, LossKind, LyricTargetSet};
use crate::audio::Waveform;
use crate::encoders::{EncoderHandle, EncoderKind};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FrameCache, FrontEnd, FrontPass};
use crate::nn::RowCache;
use crate::psycho::UtilityLoss;
use crate::scalar::{axpy, Real};

/// Everything a protection run needs to evaluate its losses.
pub struct LossSetup<'a, T: Real> {
    pub x0: &'a Waveform<T>,
    pub utility: UtilityLoss<T>,
    pub identity: Vec<&'a EncoderHandle<T>>,
    pub lyric: Vec<&'a EncoderHandle<T>>,
    pub acoustic: Option<&'a EncoderHandle<T>>,
    pub destination: Option<&'a DestinationSinger<T>>,
    pub targets: Option<&'a LyricTargetSet<T>>,
    pub enabled: Vec<LossKind>,
    pub flir: FlirConfig,
}

struct IdentitySlot<'a, T: Real> {
    h: &'a EncoderHandle<T>,
    /// Per-frame outputs on `x0`, `n_frames x d`.
    out0: Vec<T>,
    emb0: Vec<T>,
    dest: Option<Vec<T>>,
}

struct SequenceSlot<'a, T: Real> {
    h: &'a EncoderHandle<T>,
    out0: Vec<T>,
    targets: Vec<FeatureSequence<T>>,
}

pub struct LossEngine<'a, T: Real> {
    x0: Vec<T>,
    front: Option<FrontEnd<T>>,
    n_frames: usize,
    identity: Vec<IdentitySlot<'a, T>>,
    lyric: Vec<SequenceSlot<'a, T>>,
    acoustic: Option<SequenceSlot<'a, T>>,
    utility: UtilityLoss<T>,
    enabled: Vec<LossKind>,
    flir: FlirConfig,
    flir_frames: Vec<(usize, usize)>,
}

/// One variant frame for the interaction terms: front-end frames `frames`
/// recomputed with `range` swapped.
struct Variant<T: Real> {
    range: (usize, usize),
    /// True for `x0` with `x` inside the range; false for `x` with `x0` inside.
    x_inside: bool,
    frames: Range<usize>,
    fcaches: Vec<FrameCache<T>>,
    /// Encoder caches per slot (`None` when the slot is not involved).
    enc: Vec<Option<Vec<RowCache<T>>>>,
    /// `(loss, slot, |frames| x d cotangent)`.
    cots: Vec<(LossKind, usize, Vec<T>)>,
}

/// Forward results of one step, ready for [`LossEngine::gradient`].
pub struct Evaluation<T: Real> {
    pub values: Vec<(LossKind, T)>,
    pass: Option<FrontPass<T>>,
    /// Encoder caches on `x` per slot.
    caches: Vec<Option<Vec<RowCache<T>>>>,
    /// Output cotangents on `x` per loss and slot, `n_frames x d`.
    x_cots: Vec<(LossKind, usize, Vec<T>)>,
    variants: Vec<Variant<T>>,
    utility_grad: Option<Vec<T>>,
}

impl<T: Real> Evaluation<T> {
    pub fn value(&self, kind: LossKind) -> Option<T> {
        self.values.iter().find(|(k, _)| *k == kind).map(|&(_, v)| v)
    }
}

/// Per-frame term of the multi-target sequence distance at frame `t` and
/// its gradient. `n_frames` is the length of the evaluated sequence.
fn frame_term<T: Real>(o: &[T], t: usize, n_frames: usize, targets: &[FeatureSequence<T>]) -> Result<(T, Vec<T>)> {
    let inv_k = T::one() / T::from_usize_lossy(targets.len());
    let mut v = T::zero();
    let mut g = vec![T::zero(); o.len()];
    for target in targets {
        let n = n_frames.min(target.n_frames());
        if t >= n {
            continue;
        }
        let w = inv_k / T::from_usize_lossy(n);
        let (c, cg) = cosine_and_grad(o, target.row(t))?;
        v = v + w * (T::one() - c);
        axpy(-w, &cg, &mut g);
    }
    Ok((v, g))
}

impl<'a, T: Real> LossEngine<'a, T> {
    pub fn new(setup: LossSetup<'a, T>) -> Result<Self> {
        let LossSetup {
            x0,
            utility,
            identity,
            lyric,
            acoustic,
            destination,
            targets,
            mut enabled,
            flir,
        } = setup;
        enabled.sort();
        enabled.dedup();
        let on = |k: LossKind| enabled.contains(&k);
        let need_identity = on(LossKind::IdentityUntargeted) || on(LossKind::IdentityTargeted) || on(LossKind::FlirIdentity);
        let need_lyric = on(LossKind::LyricHigh) || on(LossKind::FlirLyric);
        let need_acoustic = on(LossKind::LyricLow);
        if need_identity && identity.is_empty() {
            return Err(Error::InvalidConfig("identity losses enabled without identity encoders".into()));
        }
        if need_lyric && lyric.is_empty() {
            return Err(Error::InvalidConfig("lyric losses enabled without lyric encoders".into()));
        }
        if on(LossKind::IdentityTargeted) && destination.is_none() {
            return Err(Error::InvalidConfig("targeted identity loss needs a destination singer".into()));
        }
        if (need_lyric || need_acoustic) && targets.is_none() {
            return Err(Error::InvalidConfig("lyric losses need a lyric target set".into()));
        }
        if need_acoustic && acoustic.is_none() {
            return Err(Error::InvalidConfig("low-hierarchy loss needs the acoustic front end".into()));
        }
        for h in identity.iter() {
            if h.kind() != EncoderKind::Identity {
                return Err(Error::KindMismatch {
                    expected: "identity",
                    actual: h.kind().name(),
                });
            }
        }
        for h in lyric.iter() {
            if h.kind() != EncoderKind::Lyric {
                return Err(Error::KindMismatch {
                    expected: "lyric",
                    actual: h.kind().name(),
                });
            }
        }
        let used: Vec<&EncoderHandle<T>> = identity
            .iter()
            .filter(|_| need_identity)
            .chain(lyric.iter().filter(|_| need_lyric))
            .chain(acoustic.iter().filter(|_| need_acoustic))
            .copied()
            .collect();
        if let Some(h) = used.iter().find(|h| h.is_held_out()) {
            return Err(Error::HeldOut(format!("{} cannot take part in protection", h.id())));
        }
        let front = used.first().map(|h| h.front_end().clone());
        if let Some(f) = &front {
            if let Some(h) = used.iter().find(|h| h.front_config() != f.config()) {
                return Err(Error::InvalidConfig(format!("encoder {} uses a different front end", h.id())));
            }
        }
        let pass0 = front.as_ref().map(|f| f.forward(x0.samples())).transpose()?;
        let n_frames = pass0.as_ref().map_or(0, |p| p.n_frames());
        let outputs = |h: &EncoderHandle<T>| -> Vec<T> {
            let p = pass0.as_ref().expect("front end present");
            h.encode_pass(p).iter().flat_map(|c| c.output().to_vec()).collect()
        };
        let identity_slots = if need_identity {
            identity
                .iter()
                .map(|&h| {
                    let out0 = outputs(h);
                    let emb0 = mean_rows(&out0, h.output_dim());
                    let dest = match destination {
                        Some(d) if on(LossKind::IdentityTargeted) => Some(d.centroid_under(h)?.values().to_vec()),
                        _ => None,
                    };
                    Ok(IdentitySlot { h, out0, emb0, dest })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let sequence_slot = |h: &'a EncoderHandle<T>| -> Result<SequenceSlot<'a, T>> {
            let out0 = outputs(h);
            let targets = targets.expect("checked").features_for(h)?.into_owned();
            Ok(SequenceSlot { h, out0, targets })
        };
        let lyric_slots = if need_lyric {
            lyric.iter().map(|&h| sequence_slot(h)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let acoustic_slot = if need_acoustic {
            Some(sequence_slot(acoustic.expect("checked"))?)
        } else {
            None
        };
        let flir_frames = if on(LossKind::FlirIdentity) || on(LossKind::FlirLyric) {
            flir.frames(x0.len())?
        } else {
            Vec::new()
        };
        Ok(Self {
            x0: x0.samples().to_vec(),
            front,
            n_frames,
            identity: identity_slots,
            lyric: lyric_slots,
            acoustic: acoustic_slot,
            utility,
            enabled,
            flir,
            flir_frames,
        })
    }

    pub fn enabled(&self) -> &[LossKind] {
        &self.enabled
    }

    fn n_slots(&self) -> usize {
        self.identity.len() + self.lyric.len() + self.acoustic.is_some() as usize
    }

    fn slot_handle(&self, s: usize) -> &EncoderHandle<T> {
        let ni = self.identity.len();
        if s < ni {
            self.identity[s].h
        } else if s < ni + self.lyric.len() {
            self.lyric[s - ni].h
        } else {
            self.acoustic.as_ref().expect("slot exists").h
        }
    }

    fn on(&self, k: LossKind) -> bool {
        self.enabled.contains(&k)
    }

    /// Builds the variant of `x` (or `x0`) around FL-IR frame `range` and
    /// runs the slots in `slots` on the affected front-end frames.
    fn variant(&self, x: &[T], range: (usize, usize), x_inside: bool, slots: Range<usize>) -> Variant<T> {
        let front = self.front.as_ref().expect("front end present");
        let spec = front.frame_spec();
        let frames = spec.frames_touching(self.n_frames, range.0, range.1);
        let (l, m) = (spec.frame_length, front.n_mels());
        let mut buf = Vec::with_capacity(spec.fft_size);
        let mut rows = vec![T::zero(); frames.len() * m];
        let mut window = vec![T::zero(); l];
        let fcaches: Vec<FrameCache<T>> = frames
            .clone()
            .zip(rows.chunks_exact_mut(m))
            .map(|(t, row)| {
                let start = spec.frame_start(t);
                for (j, w) in window.iter_mut().enumerate() {
                    let s = start + j;
                    let inside = (range.0..range.1).contains(&s);
                    *w = if inside == x_inside { x[s] } else { self.x0[s] };
                }
                front.forward_frame(&window, &mut buf, row)
            })
            .collect();
        let enc = (0..self.n_slots())
            .map(|s| {
                slots.contains(&s).then(|| {
                    let h = self.slot_handle(s);
                    rows.chunks_exact(m).map(|r| h.encode_row(r)).collect()
                })
            })
            .collect();
        Variant {
            range,
            x_inside,
            frames,
            fcaches,
            enc,
            cots: Vec::new(),
        }
    }

    /// Forward pass of every enabled loss at `x`. `rng` drives the FL-IR
    /// frame sampling (identity terms draw first).
    pub fn evaluate(&self, x: &[T], rng: &mut impl Rng) -> Result<Evaluation<T>> {
        if x.len() != self.x0.len() {
            return Err(Error::ShapeMismatch(format!("signal has {} samples, x0 {}", x.len(), self.x0.len())));
        }
        let pass = self.front.as_ref().map(|f| f.forward(x)).transpose()?;
        let n = self.n_frames;
        let ni = self.identity.len();
        let nl = self.lyric.len();
        let caches: Vec<Option<Vec<RowCache<T>>>> = (0..self.n_slots())
            .map(|s| pass.as_ref().map(|p| self.slot_handle(s).encode_pass(p)))
            .collect();
        let out_rows = |s: usize| -> Vec<T> {
            caches[s]
                .as_ref()
                .expect("slot evaluated")
                .iter()
                .flat_map(|c| c.output().to_vec())
                .collect()
        };
        let mut ev = Evaluation {
            values: Vec::new(),
            pass: None,
            caches: Vec::new(),
            x_cots: Vec::new(),
            variants: Vec::new(),
            utility_grad: None,
        };
        let inv_n = if n > 0 { T::one() / T::from_usize_lossy(n) } else { T::zero() };

        // identity embeddings of x and the untargeted similarity per slot
        let id_rows: Vec<Vec<T>> = (0..ni).map(out_rows).collect();
        let id_emb: Vec<Vec<T>> = id_rows
            .iter()
            .zip(&self.identity)
            .map(|(r, s)| mean_rows(r, s.h.output_dim()))
            .collect();
        let id_ut: Vec<(T, Vec<T>)> = id_emb
            .iter()
            .zip(&self.identity)
            .map(|(e, s)| cosine_and_grad(e, &s.emb0))
            .collect::<Result<_>>()?;
        let inv_mi = if ni > 0 { T::one() / T::from_usize_lossy(ni) } else { T::zero() };
        let spread = |g: &[T], scale: T| -> Vec<T> {
            let mut rows = Vec::with_capacity(n * g.len());
            for _ in 0..n {
                rows.extend(g.iter().map(|&v| v * scale));
            }
            rows
        };

        if self.on(LossKind::IdentityUntargeted) {
            let mut value = T::zero();
            for (s, (c, g)) in id_ut.iter().enumerate() {
                value = value + *c * inv_mi;
                ev.x_cots.push((LossKind::IdentityUntargeted, s, spread(g, inv_mi * inv_n)));
            }
            ev.values.push((LossKind::IdentityUntargeted, value));
        }
        if self.on(LossKind::IdentityTargeted) {
            let mut value = T::zero();
            for (s, slot) in self.identity.iter().enumerate() {
                let dest = slot.dest.as_ref().expect("checked at construction");
                let (c, g) = cosine_and_grad(&id_emb[s], dest)?;
                value = value - c * inv_mi;
                ev.x_cots.push((LossKind::IdentityTargeted, s, spread(&g, -inv_mi * inv_n)));
            }
            ev.values.push((LossKind::IdentityTargeted, value));
        }

        // per-frame sequence terms of x for lyric and acoustic slots
        let seq_terms = |slot: &SequenceSlot<'a, T>, rows: &[T]| -> Result<(T, Vec<T>)> {
            let d = slot.h.output_dim();
            let mut v = T::zero();
            let mut cot = vec![T::zero(); rows.len()];
            for t in 0..n {
                let (tv, tg) = frame_term(&rows[t * d..(t + 1) * d], t, n, &slot.targets)?;
                v = v + tv;
                cot[t * d..(t + 1) * d].copy_from_slice(&tg);
            }
            Ok((v, cot))
        };
        let ly_rows: Vec<Vec<T>> = (ni..ni + nl).map(out_rows).collect();
        let ly_terms: Vec<(T, Vec<T>)> = self
            .lyric
            .iter()
            .zip(&ly_rows)
            .map(|(s, r)| seq_terms(s, r))
            .collect::<Result<_>>()?;
        let inv_ml = if nl > 0 { T::one() / T::from_usize_lossy(nl) } else { T::zero() };
        if self.on(LossKind::LyricHigh) {
            let mut value = T::zero();
            for (j, (v, cot)) in ly_terms.iter().enumerate() {
                value = value + *v * inv_ml;
                ev.x_cots.push((LossKind::LyricHigh, ni + j, cot.iter().map(|&c| c * inv_ml).collect()));
            }
            ev.values.push((LossKind::LyricHigh, value));
        }
        if let Some(slot) = self.acoustic.as_ref().filter(|_| self.on(LossKind::LyricLow)) {
            let (v, cot) = seq_terms(slot, &out_rows(ni + nl))?;
            ev.x_cots.push((LossKind::LyricLow, ni + nl, cot));
            ev.values.push((LossKind::LyricLow, v));
        }
        if self.on(LossKind::Utility) {
            let (v, g) = self.utility.value_and_grad(x)?;
            ev.values.push((LossKind::Utility, v));
            ev.utility_grad = Some(g);
        }

        if self.on(LossKind::FlirIdentity) {
            let chosen = self.flir.sample(self.flir_frames.len(), rng);
            let inv_r = T::one() / T::from_usize_lossy(chosen.len());
            let w = inv_mi * inv_r;
            let mut value = T::zero();
            // f(x) appears once per sampled frame; averaged over R it keeps weight 1
            let mut x_cot: Vec<Vec<T>> = id_ut.iter().map(|(_, g)| spread(g, inv_mi * inv_n)).collect();
            for &i in &chosen {
                let range = self.flir_frames[i];
                let mut pi = self.variant(x, range, false, 0..ni);
                let mut phi = self.variant(x, range, true, 0..ni);
                for (s, slot) in self.identity.iter().enumerate() {
                    let d = slot.h.output_dim();
                    let (fx, _) = id_ut[s];
                    let (fp, gp) = self.variant_similarity(&pi, s, &id_emb[s], &id_rows[s], &slot.emb0, inv_n)?;
                    let (ff, gf) = self.variant_similarity(&phi, s, &slot.emb0, &slot.out0, &slot.emb0, inv_n)?;
                    value = value + ((fx - fp) + (T::one() - ff)) * w;
                    // x frames outside the swapped span still feed the pi embedding
                    for t in (0..n).filter(|t| !pi.frames.contains(t)) {
                        axpy(-w * inv_n, &gp, &mut x_cot[s][t * d..(t + 1) * d]);
                    }
                    pi.cots.push((LossKind::FlirIdentity, s, spread_k(&gp, pi.frames.len(), -w * inv_n)));
                    phi.cots.push((LossKind::FlirIdentity, s, spread_k(&gf, phi.frames.len(), -w * inv_n)));
                }
                ev.variants.push(pi);
                ev.variants.push(phi);
            }
            for (s, c) in x_cot.into_iter().enumerate() {
                ev.x_cots.push((LossKind::FlirIdentity, s, c));
            }
            ev.values.push((LossKind::FlirIdentity, value));
        }

        if self.on(LossKind::FlirLyric) {
            let chosen = self.flir.sample(self.flir_frames.len(), rng);
            let inv_r = T::one() / T::from_usize_lossy(chosen.len());
            let w = inv_ml * inv_r;
            let mut value = T::zero();
            let mut x_cot: Vec<Vec<T>> = ly_terms.iter().map(|(_, c)| c.iter().map(|&v| v * inv_ml).collect()).collect();
            for &i in &chosen {
                let range = self.flir_frames[i];
                let mut pi = self.variant(x, range, false, ni..ni + nl);
                let mut phi = self.variant(x, range, true, ni..ni + nl);
                for (j, slot) in self.lyric.iter().enumerate() {
                    let s = ni + j;
                    let d = slot.h.output_dim();
                    let (dp, cp) = self.variant_sequence_delta(&pi, s, slot, &ly_rows[j])?;
                    let (df, cf) = self.variant_sequence_delta(&phi, s, slot, &slot.out0)?;
                    // (H(x) - H(pi)) + (H(x0) - H(phi)) with both variants differing by a frame-local delta
                    value = value - (dp + df) * w;
                    for t in (0..n).filter(|t| !pi.frames.contains(t)) {
                        axpy(-w, &ly_terms[j].1[t * d..(t + 1) * d], &mut x_cot[j][t * d..(t + 1) * d]);
                    }
                    pi.cots.push((LossKind::FlirLyric, s, cp.iter().map(|&c| -w * c).collect()));
                    phi.cots.push((LossKind::FlirLyric, s, cf.iter().map(|&c| -w * c).collect()));
                }
                ev.variants.push(pi);
                ev.variants.push(phi);
            }
            for (j, c) in x_cot.into_iter().enumerate() {
                ev.x_cots.push((LossKind::FlirLyric, ni + j, c));
            }
            ev.values.push((LossKind::FlirLyric, value));
        }

        ev.values.sort_by_key(|(k, _)| *k);
        for (k, v) in &ev.values {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{k} loss")));
            }
        }
        ev.pass = pass;
        ev.caches = caches;
        Ok(ev)
    }

    /// Similarity of the variant embedding (base embedding with the affected
    /// frames swapped) to `anchor`, and its gradient w.r.t. that embedding.
    fn variant_similarity(
        &self,
        v: &Variant<T>,
        s: usize,
        base_emb: &[T],
        base_rows: &[T],
        anchor: &[T],
        inv_n: T,
    ) -> Result<(T, Vec<T>)> {
        let d = base_emb.len();
        let mut emb = base_emb.to_vec();
        let caches = v.enc[s].as_ref().expect("slot evaluated on variant");
        for (t, c) in v.frames.clone().zip(caches) {
            let old = &base_rows[t * d..(t + 1) * d];
            for ((e, &new), &o) in emb.iter_mut().zip(c.output()).zip(old) {
                *e = *e + (new - o) * inv_n;
            }
        }
        cosine_and_grad(&emb, anchor)
    }

    /// `H(variant) - H(base)` summed over the affected frames, plus the
    /// per-frame gradient of `H(variant)` on those frames.
    fn variant_sequence_delta(
        &self,
        v: &Variant<T>,
        s: usize,
        slot: &SequenceSlot<'a, T>,
        base_rows: &[T],
    ) -> Result<(T, Vec<T>)> {
        let d = slot.h.output_dim();
        let caches = v.enc[s].as_ref().expect("slot evaluated on variant");
        let mut delta = T::zero();
        let mut cot = Vec::with_capacity(caches.len() * d);
        for (t, c) in v.frames.clone().zip(caches) {
            let (nv, g) = frame_term(c.output(), t, self.n_frames, &slot.targets)?;
            let (ov, _) = frame_term(&base_rows[t * d..(t + 1) * d], t, self.n_frames, &slot.targets)?;
            delta = delta + (nv - ov);
            cot.extend(g);
        }
        Ok((delta, cot))
    }

    /// Gradient of `sum_k weight_k * f_k` for the losses evaluated in `ev`.
    /// Losses missing from `weights` get weight zero.
    pub fn gradient(&self, ev: &Evaluation<T>, weights: &[(LossKind, T)]) -> Vec<T> {
        let weight = |k: LossKind| weights.iter().find(|(w, _)| *w == k).map_or(T::zero(), |&(_, v)| v);
        let mut grad = vec![T::zero(); self.x0.len()];
        if let (Some(front), Some(pass)) = (self.front.as_ref(), ev.pass.as_ref()) {
            let m = front.n_mels();
            let mut mel_cot = vec![T::zero(); pass.rows.len()];
            for s in 0..self.n_slots() {
                let h = self.slot_handle(s);
                let d = h.output_dim();
                let mut combined: Option<Vec<T>> = None;
                for (k, _, cot) in ev.x_cots.iter().filter(|(_, slot, _)| *slot == s) {
                    let w = weight(*k);
                    if w.is_zero() {
                        continue;
                    }
                    let acc = combined.get_or_insert_with(|| vec![T::zero(); cot.len()]);
                    axpy(w, cot, acc);
                }
                let (Some(combined), Some(caches)) = (combined, ev.caches[s].as_ref()) else {
                    continue;
                };
                for (t, c) in caches.iter().enumerate() {
                    h.backward_row(c, &combined[t * d..(t + 1) * d], &mut mel_cot[t * m..(t + 1) * m]);
                }
            }
            front.backward_into(pass, &mel_cot, &mut grad);

            let spec = front.frame_spec();
            let l = spec.frame_length;
            let mut buf: Vec<Complex<T>> = Vec::with_capacity(spec.fft_size);
            let mut local = vec![T::zero(); l];
            for v in &ev.variants {
                let nf = v.frames.len();
                let mut vmel = vec![T::zero(); nf * m];
                let mut any = false;
                for (k, s, cot) in &v.cots {
                    let w = weight(*k);
                    if w.is_zero() {
                        continue;
                    }
                    any = true;
                    let h = self.slot_handle(*s);
                    let d = h.output_dim();
                    let caches = v.enc[*s].as_ref().expect("slot evaluated on variant");
                    let scaled: Vec<T> = cot.iter().map(|&c| c * w).collect();
                    for (f, c) in caches.iter().enumerate() {
                        h.backward_row(c, &scaled[f * d..(f + 1) * d], &mut vmel[f * m..(f + 1) * m]);
                    }
                }
                if !any {
                    continue;
                }
                for (f, (t, fc)) in v.frames.clone().zip(&v.fcaches).enumerate() {
                    local.iter_mut().for_each(|x| *x = T::zero());
                    front.backward_frame(fc, &vmel[f * m..(f + 1) * m], &mut buf, &mut local);
                    let start = spec.frame_start(t);
                    for (j, &g) in local.iter().enumerate() {
                        let s = start + j;
                        // only samples taken from x carry gradient
                        if (v.range.0..v.range.1).contains(&s) == v.x_inside {
                            grad[s] = grad[s] + g;
                        }
                    }
                }
            }
        }
        if let Some(g) = &ev.utility_grad {
            let w = weight(LossKind::Utility);
            if !w.is_zero() {
                axpy(w, g, &mut grad);
            }
        }
        grad
    }

    /// Value and gradient of a single enabled loss.
    pub fn value_and_grad(&self, x: &[T], kind: LossKind, rng: &mut impl Rng) -> Result<(T, Vec<T>)> {
        if !self.on(kind) {
            return Err(Error::InvalidConfig(format!("{kind} loss is not enabled")));
        }
        let ev = self.evaluate(x, rng)?;
        let v = ev.value(kind).expect("enabled loss evaluated");
        Ok((v, self.gradient(&ev, &[(kind, T::one())])))
    }
}

fn mean_rows<T: Real>(rows: &[T], d: usize) -> Vec<T> {
    let n = rows.len() / d;
    let inv = T::one() / T::from_usize_lossy(n);
    let mut e = vec![T::zero(); d];
    for r in rows.chunks_exact(d) {
        axpy(inv, r, &mut e);
    }
    e
}

/// `k` copies of `g * scale` laid out as rows.
fn spread_k<T: Real>(g: &[T], k: usize, scale: T) -> Vec<T> {
    let mut out = Vec::with_capacity(k * g.len());
    for _ in 0..k {
        out.extend(g.iter().map(|&v| v * scale));
    }
    out
}
