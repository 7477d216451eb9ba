//! Identity similarity, WER, SNR, success-rate reduction and the
//! feature-level conversion proxy.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::corpus::Corpus;
use crate::encoders::{identity_embed, Embedding, EncoderHandle, EncoderKind, SingerProfile};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::losses::cosine_sim;
use crate::scalar::Real;

fn require_held_out<T: Real>(h: &EncoderHandle<T>, kind: EncoderKind) -> Result<()> {
    if h.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.name(),
            actual: h.kind().name(),
        });
    }
    if !h.is_held_out() {
        return Err(Error::HeldOut(format!(
            "evaluation needs a held-out encoder, {} takes part in protection",
            h.id()
        )));
    }
    Ok(())
}

/// Cosine between an output embedding and the target's centroid, both
/// under the held-out identity encoder.
pub fn identity_similarity<T: Real>(output: &Embedding<T>, target: &SingerProfile<T>, eval: &EncoderHandle<T>) -> Result<T> {
    require_held_out(eval, EncoderKind::Identity)?;
    if target.encoder == eval.id() {
        cosine_sim(output.values(), target.centroid.values())
    } else {
        cosine_sim(output.values(), target.under(eval)?.centroid.values())
    }
}

/// Word error rate `(S + D + I) / N` from a Levenshtein alignment.
pub fn wer<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidConfig("WER needs a non-empty reference".into()));
    }
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[hypothesis.len()] as f64 / reference.len() as f64)
}

/// Collapses runs of repeated symbols, first discarding runs shorter than
/// `min_run` frames (unless that would discard everything).
pub fn collapse_runs(seq: &[usize], min_run: usize) -> Vec<usize> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &s in seq {
        match runs.last_mut() {
            Some((last, n)) if *last == s => *n += 1,
            _ => runs.push((s, 1)),
        }
    }
    let kept: Vec<usize> = runs.iter().filter(|r| r.1 >= min_run).map(|r| r.0).collect();
    let kept = if kept.is_empty() { runs.iter().map(|r| r.0).collect() } else { kept };
    let mut out: Vec<usize> = Vec::with_capacity(kept.len());
    for s in kept {
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

/// Mean lyric feature of every symbol: the vocabulary of the toy recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTemplates<T: Real = f64> {
    /// `(symbol index, template)`; symbols never seen are absent.
    templates: Vec<(usize, Vec<T>)>,
    /// Shortest run of frames accepted as a symbol; shorter runs are
    /// transition glitches.
    pub min_run: usize,
}

impl<T: Real> SymbolTemplates<T> {
    pub fn new(templates: Vec<(usize, Vec<T>)>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidConfig("empty symbol vocabulary".into()));
        }
        let d = templates[0].1.len();
        if templates.iter().any(|(_, t)| t.len() != d) {
            return Err(Error::ShapeMismatch("templates differ in dimension".into()));
        }
        Ok(Self { templates, min_run: 2 })
    }

    /// Averages the frame features of labelled clips per symbol.
    pub fn fit(h: &EncoderHandle<T>, labelled: &[(&Waveform<T>, Vec<usize>)]) -> Result<Self> {
        let d = h.output_dim();
        let mut sums: Vec<(usize, Vec<T>, usize)> = Vec::new();
        for (w, labels) in labelled {
            let f = h.frame_outputs(w)?;
            for (t, &s) in labels.iter().enumerate().take(f.n_frames()) {
                let slot = match sums.iter().position(|e| e.0 == s) {
                    Some(i) => i,
                    None => {
                        sums.push((s, vec![T::zero(); d], 0));
                        sums.len() - 1
                    }
                };
                sums[slot].1.iter_mut().zip(f.row(t)).for_each(|(a, &b)| *a = *a + b);
                sums[slot].2 += 1;
            }
        }
        sums.sort_by_key(|e| e.0);
        Self::new(
            sums.into_iter()
                .map(|(s, v, n)| (s, v.into_iter().map(|x| x / T::from_usize_lossy(n)).collect()))
                .collect(),
        )
    }

    pub fn symbols(&self) -> Vec<usize> {
        self.templates.iter().map(|t| t.0).collect()
    }

    pub fn template(&self, symbol: usize) -> Option<&[T]> {
        self.templates.iter().find(|t| t.0 == symbol).map(|t| t.1.as_slice())
    }

    /// Nearest template (by cosine) of one feature row; ties go to the
    /// lower symbol index.
    pub fn classify(&self, row: &[T]) -> usize {
        let mut best = (self.templates[0].0, T::neg_infinity());
        for (s, t) in &self.templates {
            let c = cosine_sim(row, t).unwrap_or(T::neg_infinity());
            if c > best.1 {
                best = (*s, c);
            }
        }
        best.0
    }
}

impl SymbolTemplates<f64> {
    /// Templates from every listed corpus clip under `h`.
    pub fn from_corpus(corpus: &Corpus, h: &EncoderHandle<f64>, clip_ids: &[&str]) -> Result<Self> {
        let fc = h.front_config().frame;
        let labelled: Vec<_> = corpus
            .clips
            .iter()
            .filter(|c| clip_ids.contains(&c.id.as_str()))
            .map(|c| (&c.voice, corpus.frame_labels(c, fc.frame_length, fc.frame_shift)))
            .collect();
        SymbolTemplates::fit(h, &labelled)
    }
}

/// Per-frame nearest-template labels with runs collapsed.
pub fn transcribe<T: Real>(features: &FeatureSequence<T>, vocabulary: &SymbolTemplates<T>) -> Vec<usize> {
    let frames: Vec<usize> = features.rows().map(|r| vocabulary.classify(r)).collect();
    collapse_runs(&frames, vocabulary.min_run)
}

/// `10 log10(P_x / P_delta)` with mean-square powers; `+inf` when the
/// perturbation is identically zero.
pub fn snr<T: Real>(original: &Waveform<T>, perturbed: &Waveform<T>) -> Result<f64> {
    if original.len() != perturbed.len() {
        return Err(Error::ShapeMismatch(format!(
            "original has {} samples, perturbed {}",
            original.len(),
            perturbed.len()
        )));
    }
    let n = original.len() as f64;
    let px = original.samples().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / n;
    let pd = original
        .samples()
        .iter()
        .zip(perturbed.samples())
        .map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    if px == 0.0 {
        return Err(Error::ZeroNorm("original signal"));
    }
    if pd == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (px / pd).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrrThresholds {
    pub xi_i: f64,
    /// `None` means: the mean undefended WER of the batch.
    pub xi_l: Option<f64>,
}

impl Default for SrrThresholds {
    fn default() -> Self {
        Self { xi_i: 0.41, xi_l: None }
    }
}

impl SrrThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_i > -1.0 && self.xi_i < 1.0) {
            return Err(Error::InvalidConfig(format!("xi_I = {} must lie in (-1, 1)", self.xi_i)));
        }
        if let Some(l) = self.xi_l {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("xi_L = {l} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Lyric threshold for a batch of undefended outcomes.
    pub fn lyric_threshold(&self, undefended: &[Outcome]) -> f64 {
        self.xi_l
            .unwrap_or_else(|| undefended.iter().map(|o| o.wer).sum::<f64>() / undefended.len().max(1) as f64)
    }
}

/// Result of one conversion attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub is: f64,
    pub wer: f64,
}

impl Outcome {
    pub fn identity_success(&self, xi_i: f64) -> bool {
        self.is >= xi_i
    }

    pub fn lyric_success(&self, xi_l: f64) -> bool {
        self.wer <= xi_l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Srr {
    pub identity: f64,
    pub lyric: f64,
    pub both: f64,
}

/// Success-rate reductions given explicit thresholds.
pub fn srr(undefended: &[Outcome], defended: &[Outcome], xi_i: f64, xi_l: f64) -> Result<Srr> {
    if undefended.len() != defended.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} undefended outcomes vs {} defended",
            undefended.len(),
            defended.len()
        )));
    }
    if undefended.is_empty() {
        return Err(Error::InvalidConfig("SRR needs at least one pair".into()));
    }
    let q = undefended.len() as f64;
    let diff = |f: &dyn Fn(&Outcome) -> bool| {
        undefended.iter().zip(defended).map(|(y, z)| f64::from(u8::from(f(y))) - f64::from(u8::from(f(z)))).sum::<f64>() / q
    };
    Ok(Srr {
        identity: diff(&|o| o.identity_success(xi_i)),
        lyric: diff(&|o| o.lyric_success(xi_l)),
        both: diff(&|o| o.identity_success(xi_i) && o.lyric_success(xi_l)),
    })
}

/// What the conversion proxy hands to the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOutput<T: Real = f64> {
    pub embedding: Embedding<T>,
    pub symbols: Vec<usize>,
}

/// Feature-level stand-in for a conversion model: the output carries the
/// mean identity embedding of the provided target clips and the lyrics
/// recognized from the source.
pub fn svc_proxy<T: Real>(
    target_clips: &[&Waveform<T>],
    source: &Waveform<T>,
    identity: &EncoderHandle<T>,
    lyric: &EncoderHandle<T>,
    vocabulary: &SymbolTemplates<T>,
) -> Result<ProxyOutput<T>> {
    if target_clips.is_empty() {
        return Err(Error::InvalidConfig("conversion proxy needs at least one target clip".into()));
    }
    require_held_out(identity, EncoderKind::Identity)?;
    require_held_out(lyric, EncoderKind::Lyric)?;
    let embs = target_clips
        .iter()
        .map(|w| identity_embed(identity, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProxyOutput {
        embedding: Embedding::mean(&embs)?,
        symbols: transcribe(&lyric.frame_outputs(source)?, vocabulary),
    })
}

/// First `round(r * n)` clips protected, the rest clean.
pub fn mix_at_ratio<'a, T: Real>(clean: &'a [Waveform<T>], protected: &'a [Waveform<T>], r: f64) -> Result<Vec<&'a Waveform<T>>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidConfig(format!("protect ratio {r} outside [0, 1]")));
    }
    if clean.len() != protected.len() {
        return Err(Error::ShapeMismatch("clean and protected lists differ in length".into()));
    }
    let k = (r * clean.len() as f64).round() as usize;
    Ok(protected[..k].iter().chain(&clean[k..]).collect())
}

/// One evaluated (target singer, source clip) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: String,
    pub source: String,
    pub is_undefended: f64,
    pub is_defended: f64,
    pub wer_undefended: f64,
    pub wer_defended: f64,
}

impl PairRecord {
    pub fn undefended(&self) -> Outcome {
        Outcome {
            is: self.is_undefended,
            wer: self.wer_undefended,
        }
    }

    pub fn defended(&self) -> Outcome {
        Outcome {
            is: self.is_defended,
            wer: self.wer_defended,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairRecord>,
    pub xi_i: f64,
    pub xi_l: f64,
    pub srr: Srr,
    pub protect_ratio: f64,
    /// SNR of every protected clip mixed with its backing.
    pub snr_db: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

impl EvalReport {
    pub fn new(pairs: Vec<PairRecord>, th: &SrrThresholds, protect_ratio: f64, snr_db: Vec<f64>) -> Result<Self> {
        th.validate()?;
        let undefended: Vec<_> = pairs.iter().map(PairRecord::undefended).collect();
        let defended: Vec<_> = pairs.iter().map(PairRecord::defended).collect();
        let xi_l = th.lyric_threshold(&undefended);
        let srr = srr(&undefended, &defended, th.xi_i, xi_l)?;
        Ok(Self {
            pairs,
            xi_i: th.xi_i,
            xi_l,
            srr,
            protect_ratio,
            snr_db,
        })
    }

    pub fn q(&self) -> usize {
        self.pairs.len()
    }

    fn mean(&self, f: impl Fn(&PairRecord) -> f64) -> f64 {
        self.pairs.iter().map(f).sum::<f64>() / self.q().max(1) as f64
    }

    pub fn mean_is_undefended(&self) -> f64 {
        self.mean(|p| p.is_undefended)
    }

    pub fn mean_is_defended(&self) -> f64 {
        self.mean(|p| p.is_defended)
    }

    pub fn mean_wer_undefended(&self) -> f64 {
        self.mean(|p| p.wer_undefended)
    }

    pub fn mean_wer_defended(&self) -> f64 {
        self.mean(|p| p.wer_defended)
    }

    pub fn median_snr_db(&self) -> f64 {
        median(&self.snr_db)
    }

    /// Per-pair rows, preceded by a comment header echoing the thresholds.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# xi_i={} xi_l={} protect_ratio={}", self.xi_i, self.xi_l, self.protect_ratio)
            .map_err(|e| Error::io("report", e))?;
        let mut w = csv::Writer::from_writer(out);
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io("report", e))?;
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs: {}", self.q())?;
        writeln!(f, "protect_ratio: {}", self.protect_ratio)?;
        writeln!(f, "xi_i: {}", self.xi_i)?;
        writeln!(f, "xi_l: {:.6}", self.xi_l)?;
        writeln!(f, "srr_i: {:.6}", self.srr.identity)?;
        writeln!(f, "srr_l: {:.6}", self.srr.lyric)?;
        writeln!(f, "srr_t: {:.6}", self.srr.both)?;
        writeln!(f, "is_undefended: {:.6}", self.mean_is_undefended())?;
        writeln!(f, "is_defended: {:.6}", self.mean_is_defended())?;
        writeln!(f, "wer_undefended: {:.6}", self.mean_wer_undefended())?;
        writeln!(f, "wer_defended: {:.6}", self.mean_wer_defended())?;
        writeln!(f, "median_snr_db: {:.3}", self.median_snr_db())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edit_distance(a: &[u8], b: &[u8]) -> usize {
        // plain recursive oracle with memo
        fn go(a: &[u8], b: &[u8], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() || b.is_empty() {
                return a.len() + b.len();
            }
            if let Some(&v) = memo.get(&(a.len(), b.len())) {
                return v;
            }
            let v = (go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
                .min(go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut Default::default())
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&["a", "b"], &["a", "x", "y", "z"]).unwrap(), 1.5);
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    proptest! {
        #[test]
        fn wer_matches_edit_distance(a in prop::collection::vec(0u8..4, 1..8), b in prop::collection::vec(0u8..4, 0..8)) {
            let w = wer(&a, &b).unwrap();
            prop_assert!((w - edit_distance(&a, &b) as f64 / a.len() as f64).abs() < 1e-12);
            prop_assert_eq!(wer(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn wer_triangle(a in prop::collection::vec(0u8..3, 1..6), b in prop::collection::vec(0u8..3, 1..6), c in prop::collection::vec(0u8..3, 1..6)) {
            let d = |x: &[u8], y: &[u8]| wer(x, y).unwrap() * x.len() as f64;
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        }

        #[test]
        fn srr_bounded(pairs in prop::collection::vec((-1.0f64..1.0, 0.0f64..2.0, -1.0f64..1.0, 0.0f64..2.0), 1..20)) {
            let u: Vec<_> = pairs.iter().map(|p| Outcome { is: p.0, wer: p.1 }).collect();
            let d: Vec<_> = pairs.iter().map(|p| Outcome { is: p.2, wer: p.3 }).collect();
            let s = srr(&u, &d, 0.41, 0.5).unwrap();
            for v in [s.identity, s.lyric, s.both] {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn halving_perturbation_adds_six_db(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..256).map(|_| rng.random_range(-0.5..0.5)).collect();
            let d: Vec<f64> = (0..256).map(|_| rng.random_range(-0.1..0.1)).collect();
            let ow = Waveform::new(x.clone(), 8000).unwrap();
            let p1 = Waveform::new(x.iter().zip(&d).map(|(a, b)| a + b).collect(), 8000).unwrap();
            let p2 = Waveform::new(x.iter().zip(&d).map(|(a, b)| a + b / 2.0).collect(), 8000).unwrap();
            let gain = snr(&ow, &p2).unwrap() - snr(&ow, &p1).unwrap();
            prop_assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        }
    }

    #[test]
    fn snr_examples() {
        let x = Waveform::new(vec![0.1; 100], 8000).unwrap();
        let p = Waveform::new(vec![0.11; 100], 8000).unwrap();
        assert!((snr(&x, &p).unwrap() - 20.0).abs() < 1e-9);
        let double = Waveform::new(vec![0.2; 100], 8000).unwrap();
        assert!(snr(&x, &double).unwrap().abs() < 1e-12);
        assert_eq!(snr(&x, &x).unwrap(), f64::INFINITY);
        let silent = Waveform::new(vec![0.0; 100], 8000).unwrap();
        assert!(snr(&silent, &x).is_err());
    }

    #[test]
    fn srr_examples() {
        let o = |s: bool| Outcome {
            is: if s { 0.9 } else { 0.0 },
            wer: 0.0,
        };
        let u = [o(true), o(true), o(true), o(false)];
        let d = [o(false); 4];
        assert_eq!(srr(&u, &d, 0.41, 0.5).unwrap().identity, 0.75);
        assert_eq!(srr(&u, &u, 0.41, 0.5).unwrap().both, 0.0);
        let worse = srr(&d, &u, 0.41, 0.5).unwrap();
        assert_eq!(worse.identity, -0.75);
        assert!(srr(&u, &d[..3], 0.41, 0.5).is_err());
    }

    #[test]
    fn transcribe_recovers_template_sequences() {
        let t = SymbolTemplates::new(vec![(0, vec![1.0, 0.0, 0.0]), (3, vec![0.0, 1.0, 0.0]), (5, vec![0.0, 0.0, 1.0])]).unwrap();
        let rows = [5, 5, 0, 0, 0, 3, 3, 5, 5];
        let vals: Vec<f64> = rows.iter().flat_map(|&s| t.template(s).unwrap().to_vec()).collect();
        let f = FeatureSequence::new(vals, 3).unwrap();
        assert_eq!(transcribe(&f, &t), vec![5, 0, 3, 5]);
        assert_eq!(transcribe(&f, &t), transcribe(&f, &t));
        assert!(SymbolTemplates::<f64>::new(vec![]).is_err());
        // a one-frame glitch between two symbols is dropped
        let glitch = [0, 0, 0, 5, 3, 3, 3];
        let vals: Vec<f64> = glitch.iter().flat_map(|&s| t.template(s).unwrap().to_vec()).collect();
        assert_eq!(transcribe(&FeatureSequence::new(vals, 3).unwrap(), &t), vec![0, 3]);
        assert_eq!(collapse_runs(&[1, 2, 3], 2), vec![1, 2, 3]);
        assert_eq!(collapse_runs(&[1, 1, 2, 1, 1], 2), vec![1]);
    }

    #[test]
    fn ratio_mixing() {
        let w = |v: f64| Waveform::new(vec![v; 4], 8000).unwrap();
        let clean = [w(0.1), w(0.2), w(0.3)];
        let prot = [w(0.5), w(0.6), w(0.7)];
        let m = mix_at_ratio(&clean, &prot, 0.0).unwrap();
        assert!(m.iter().zip(&clean).all(|(a, b)| *a == b));
        let m = mix_at_ratio(&clean, &prot, 1.0).unwrap();
        assert!(m.iter().zip(&prot).all(|(a, b)| *a == b));
        assert_eq!(mix_at_ratio(&clean, &prot, 0.5).unwrap().len(), 3);
        assert!(mix_at_ratio(&clean, &prot, 1.5).is_err());
    }
}
