//! Procedurally generated singing corpus.
//!
//! A singer is a harmonic source with a gendered pitch register, a vocal
//! tract scale, a singer's-formant peak, spectral tilt and vibrato. A lyric
//! symbol is a vowel-like (F1, F2) formant pair. Clips are sequences of
//! equally long symbols, each sung on its own note, and come with a
//! backing track of sustained chord tones.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_waveform, save_waveform, SampleFormat, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn opposite(self) -> Self {
        match self {
            Gender::F => Gender::M,
            Gender::M => Gender::F,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(Error::Corpus(format!("unknown gender {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub singers_per_gender: usize,
    pub n_symbols: usize,
    pub clips_per_singer: usize,
    pub symbols_per_clip: usize,
    pub symbol_secs: f64,
    pub sample_rate: u32,
    /// Peak level of the voice channel.
    pub voice_peak: f64,
    /// Peak level of the backing channel.
    pub backing_peak: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            singers_per_gender: 4,
            n_symbols: 8,
            clips_per_singer: 5,
            symbols_per_clip: 4,
            symbol_secs: 0.125,
            sample_rate: 8000,
            voice_peak: 0.7,
            backing_peak: 0.25,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.singers_per_gender < 2 {
            return Err(Error::Corpus(format!(
                "need at least 2 singers per gender, got {}",
                self.singers_per_gender
            )));
        }
        if self.n_symbols < 4 {
            return Err(Error::Corpus(format!("need at least 4 lyric symbols, got {}", self.n_symbols)));
        }
        if self.clips_per_singer == 0 || self.symbols_per_clip == 0 {
            return Err(Error::Corpus("clips and symbols per clip must be positive".into()));
        }
        if !(8_000..=48_000).contains(&self.sample_rate) || !(self.symbol_secs > 0.0) {
            return Err(Error::Corpus("sample rate must be 8-48 kHz and symbols must have a duration".into()));
        }
        if !(self.voice_peak > 0.0 && self.backing_peak >= 0.0 && self.voice_peak + self.backing_peak <= 1.0) {
            return Err(Error::Corpus("voice and backing peaks must sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        self.symbols_per_clip * self.symbol_len()
    }

    pub fn symbol_len(&self) -> usize {
        (self.symbol_secs * self.sample_rate as f64).round() as usize
    }
}

const VOWELS: [(&str, f64, f64); 8] = [
    ("a", 800.0, 1250.0),
    ("e", 420.0, 2050.0),
    ("i", 260.0, 2500.0),
    ("o", 480.0, 820.0),
    ("u", 260.0, 650.0),
    ("ae", 700.0, 1800.0),
    ("er", 450.0, 1450.0),
    ("ue", 270.0, 1650.0),
];

/// A lyric unit: name and its first two formants in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Symbol {
    pub name: String,
    pub f1: f64,
    pub f2: f64,
}

/// Symbol inventory of `n` entries; the first eight are fixed vowels.
pub fn symbol_inventory(n: usize, rng: &mut impl Rng) -> Vec<Symbol> {
    (0..n)
        .map(|i| match VOWELS.get(i) {
            Some(&(name, f1, f2)) => Symbol {
                name: name.to_string(),
                f1,
                f2,
            },
            None => Symbol {
                name: format!("v{i}"),
                f1: rng.random_range(280.0..800.0),
                f2: rng.random_range(850.0..2400.0),
            },
        })
        .collect()
}

/// Voice characteristics of one synthetic singer.
#[derive(Debug, Clone, PartialEq)]
pub struct SingerTraits {
    pub id: String,
    pub gender: Gender,
    pub f0: f64,
    pub tract_scale: f64,
    pub singer_formant_hz: f64,
    pub singer_formant_gain: f64,
    pub tilt_db_per_octave: f64,
    pub vibrato_hz: f64,
    pub vibrato_depth: f64,
    pub breath: f64,
}

impl SingerTraits {
    fn random(id: String, gender: Gender, rng: &mut impl Rng) -> Self {
        let (f0_lo, f0_hi, tract) = match gender {
            Gender::F => (196.0, 262.0, 1.15),
            Gender::M => (110.0, 165.0, 1.0),
        };
        Self {
            id,
            gender,
            f0: rng.random_range(f0_lo..f0_hi),
            tract_scale: tract * rng.random_range(0.96..1.04),
            singer_formant_hz: rng.random_range(2300.0..3500.0),
            singer_formant_gain: rng.random_range(0.2..0.9),
            tilt_db_per_octave: rng.random_range(-12.0..-5.0),
            vibrato_hz: rng.random_range(4.5..6.5),
            vibrato_depth: rng.random_range(0.004..0.02),
            breath: rng.random_range(0.002..0.02),
        }
    }

    fn envelope(&self, f: f64, f1: f64, f2: f64) -> f64 {
        let res = |centre: f64, bw: f64| 1.0 / (1.0 + ((f - centre) / bw).powi(2));
        let tilt = 10f64.powf(self.tilt_db_per_octave * (f / 100.0).max(1e-3).log2() / 20.0);
        let (f1, f2) = (f1 * self.tract_scale, f2 * self.tract_scale);
        tilt * (res(f1, 90.0) + 0.7 * res(f2, 130.0)
            + self.singer_formant_gain * res(self.singer_formant_hz, 220.0)
            + 0.03)
    }
}

/// One generated or loaded clip.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub singer: String,
    pub gender: Gender,
    /// Indices into the symbol inventory.
    pub symbols: Vec<usize>,
    pub voice: Waveform,
    pub backing: Waveform,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub symbols: Vec<Symbol>,
    pub clips: Vec<Clip>,
}

fn peak_normalize(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn synth_voice(
    singer: &SingerTraits,
    symbols: &[&Symbol],
    notes: &[f64],
    cfg: &CorpusConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let seg = cfg.symbol_len();
    let n = seg * symbols.len();
    let glide = (0.02 * sr) as usize;
    let max_h = ((0.45 * sr) / (singer.f0 * 0.8)).ceil() as usize;
    let mut phases = vec![0.0f64; max_h];
    let vib_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = (i / seg).min(symbols.len() - 1);
        let within = i - s * seg;
        let mix = if s > 0 && within < glide {
            within as f64 / glide as f64
        } else {
            1.0
        };
        let prev = s.saturating_sub(1);
        let lerp = |a: f64, b: f64| a + (b - a) * mix;
        let f1 = lerp(symbols[prev].f1, symbols[s].f1);
        let f2 = lerp(symbols[prev].f2, symbols[s].f2);
        let semis = lerp(notes[prev], notes[s]);
        let t = i as f64 / sr;
        let f0 = singer.f0
            * 2f64.powf(semis / 12.0)
            * (1.0 + singer.vibrato_depth * (std::f64::consts::TAU * singer.vibrato_hz * t + vib_phase).sin());
        let mut v = 0.0;
        for (h, ph) in phases.iter_mut().enumerate() {
            let fh = f0 * (h + 1) as f64;
            if fh >= 0.45 * sr {
                break;
            }
            *ph = (*ph + std::f64::consts::TAU * fh / sr) % std::f64::consts::TAU;
            v += singer.envelope(fh, f1, f2) * ph.sin();
        }
        out.push(v);
    }
    peak_normalize(&mut out, 1.0);
    for v in out.iter_mut() {
        *v += singer.breath * rng.random_range(-1.0..1.0);
    }
    let fade = (0.01 * sr) as usize;
    for k in 0..fade.min(n / 2) {
        let g = k as f64 / fade as f64;
        out[k] *= g;
        out[n - 1 - k] *= g;
    }
    peak_normalize(&mut out, cfg.voice_peak);
    out
}

fn synth_backing(n: usize, cfg: &CorpusConfig, rng: &mut impl Rng) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let root = rng.random_range(110.0..220.0);
    let tones: Vec<(f64, f64)> = [1.0, 1.25, 1.5, 2.0]
        .iter()
        .flat_map(|&r| {
            let ph = rng.random_range(0.0..std::f64::consts::TAU);
            (1..=4).map(move |h| (root * r * h as f64, ph * h as f64))
        })
        .filter(|&(f, _)| f < 0.45 * sr)
        .collect();
    let mut lp = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tonal: f64 = tones
                .iter()
                .map(|&(f, ph)| (std::f64::consts::TAU * f * t + ph).sin() * (150.0 / f))
                .sum();
            lp = 0.9 * lp + 0.1 * rng.random_range(-1.0..1.0);
            tonal + 0.6 * lp
        })
        .collect();
    peak_normalize(&mut out, cfg.backing_peak);
    out
}

impl Corpus {
    pub fn generate(config: &CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = symbol_inventory(config.n_symbols, &mut rng);
        let mut singers = Vec::new();
        for gender in [Gender::F, Gender::M] {
            for i in 0..config.singers_per_gender {
                singers.push(SingerTraits::random(format!("{gender}{i}"), gender, &mut rng));
            }
        }
        let mut clips = Vec::new();
        for singer in &singers {
            for c in 0..config.clips_per_singer {
                let mut seq: Vec<usize> = Vec::with_capacity(config.symbols_per_clip);
                while seq.len() < config.symbols_per_clip {
                    let s = rng.random_range(0..config.n_symbols);
                    if seq.last() != Some(&s) {
                        seq.push(s);
                    }
                }
                let notes: Vec<f64> = (0..seq.len()).map(|_| rng.random_range(-2..=2) as f64).collect();
                let syms: Vec<&Symbol> = seq.iter().map(|&s| &symbols[s]).collect();
                let voice = synth_voice(singer, &syms, &notes, config, &mut rng);
                let backing = synth_backing(voice.len(), config, &mut rng);
                clips.push(Clip {
                    id: format!("{}_{c}", singer.id),
                    singer: singer.id.clone(),
                    gender: singer.gender,
                    symbols: seq,
                    voice: Waveform::new(voice, config.sample_rate)?,
                    backing: Waveform::new(backing, config.sample_rate)?,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            symbols,
            clips,
        })
    }

    /// Renders `symbols` with a fresh random singer of `gender` on a flat
    /// melody, e.g. as a clean reading of known lyrics.
    pub fn synthesize_voice(&self, gender: Gender, symbols: &[usize], seed: u64) -> Result<Waveform> {
        if symbols.is_empty() {
            return Err(Error::Corpus("cannot synthesize an empty symbol sequence".into()));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= self.symbols.len()) {
            return Err(Error::Corpus(format!("symbol {s} outside the inventory of {}", self.symbols.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let singer = SingerTraits::random(format!("{gender}-synth"), gender, &mut rng);
        let syms: Vec<&Symbol> = symbols.iter().map(|&s| &self.symbols[s]).collect();
        let notes = vec![0.0; syms.len()];
        Waveform::new(synth_voice(&singer, &syms, &notes, &self.config, &mut rng), self.config.sample_rate)
    }

    pub fn singer_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.clips.iter().map(|c| c.singer.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn gender_of(&self, singer: &str) -> Option<Gender> {
        self.clips.iter().find(|c| c.singer == singer).map(|c| c.gender)
    }

    pub fn clips_of<'a>(&'a self, singer: &'a str) -> impl Iterator<Item = &'a Clip> + 'a {
        self.clips.iter().filter(move |c| c.singer == singer)
    }

    pub fn symbol_names(&self, seq: &[usize]) -> Vec<String> {
        seq.iter().map(|&s| self.symbols[s].name.clone()).collect()
    }

    /// Symbol index sung at the centre of every front-end frame.
    pub fn frame_labels(&self, clip: &Clip, frame_length: usize, frame_shift: usize) -> Vec<usize> {
        let n = clip.voice.len();
        let per = n as f64 / clip.symbols.len() as f64;
        let frames = if n < frame_length { 0 } else { (n - frame_length) / frame_shift + 1 };
        (0..frames)
            .map(|t| {
                let centre = (t * frame_shift + frame_length / 2) as f64;
                clip.symbols[((centre / per) as usize).min(clip.symbols.len() - 1)]
            })
            .collect()
    }

    /// Like [`Corpus::frame_labels`], but `None` for frames that straddle a
    /// symbol boundary.
    pub fn steady_frame_labels(&self, clip: &Clip, frame_length: usize, frame_shift: usize) -> Vec<Option<usize>> {
        let seg = clip.voice.len() / clip.symbols.len();
        self.frame_labels(clip, frame_length, frame_shift)
            .into_iter()
            .enumerate()
            .map(|(t, label)| {
                let (a, b) = (t * frame_shift, t * frame_shift + frame_length - 1);
                (a / seg == b / seg).then_some(label)
            })
            .collect()
    }

    /// Writes every clip as 16-bit WAV plus `manifest.csv`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest)?;
        w.write_record(["clip", "singer", "gender", "symbols", "backing"])?;
        for clip in &self.clips {
            let voice = format!("{}.wav", clip.id);
            let backing = format!("{}_backing.wav", clip.id);
            save_waveform(dir.join(&voice), &clip.voice, SampleFormat::Int16)?;
            save_waveform(dir.join(&backing), &clip.backing, SampleFormat::Int16)?;
            w.write_record([
                voice.as_str(),
                clip.singer.as_str(),
                &clip.gender.to_string(),
                &self.symbol_names(&clip.symbols).join(" "),
                backing.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }

    /// Reads a corpus back from its manifest. Paths are relative to the
    /// manifest's directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::Reader::from_path(manifest)?;
        let mut names: Vec<String> = Vec::new();
        let mut clips = Vec::new();
        let mut sample_rate = None;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 4 {
                return Err(Error::Corpus(format!("manifest row has {} columns", rec.len())));
            }
            let (voice, _) = load_waveform::<f64>(dir.join(&rec[0]))?;
            let backing = match rec.get(4).filter(|s| !s.is_empty()) {
                Some(p) => load_waveform::<f64>(dir.join(p))?.0.fit_to_length(voice.len()),
                None => Waveform::new(vec![0.0; voice.len()], voice.sample_rate())?,
            };
            if *sample_rate.get_or_insert(voice.sample_rate()) != voice.sample_rate() {
                return Err(Error::SampleRateMismatch(sample_rate.unwrap_or(0), voice.sample_rate()));
            }
            let symbols = rec[3]
                .split_whitespace()
                .map(|s| match names.iter().position(|n| n == s) {
                    Some(i) => i,
                    None => {
                        names.push(s.to_string());
                        names.len() - 1
                    }
                })
                .collect::<Vec<_>>();
            if symbols.is_empty() {
                return Err(Error::Corpus(format!("clip {} has no symbols", &rec[0])));
            }
            clips.push(Clip {
                id: rec[0].trim_end_matches(".wav").to_string(),
                singer: rec[1].to_string(),
                gender: rec[2].parse()?,
                symbols,
                voice,
                backing,
            });
        }
        if clips.is_empty() {
            return Err(Error::Corpus(format!("{} lists no clips", manifest.display())));
        }
        // inventory order follows the canonical vowel order where names match
        let mut symbols: Vec<Symbol> = names
            .iter()
            .map(|n| {
                let (f1, f2) = VOWELS
                    .iter()
                    .find(|v| v.0 == n)
                    .map(|v| (v.1, v.2))
                    .unwrap_or((0.0, 0.0));
                Symbol {
                    name: n.clone(),
                    f1,
                    f2,
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..symbols.len()).collect();
        order.sort_by_key(|&i| {
            VOWELS
                .iter()
                .position(|v| v.0 == names[i])
                .unwrap_or(VOWELS.len() + i)
        });
        let remap: Vec<usize> = {
            let mut r = vec![0; order.len()];
            for (new, &old) in order.iter().enumerate() {
                r[old] = new;
            }
            r
        };
        symbols = order.iter().map(|&i| symbols[i].clone()).collect();
        for c in &mut clips {
            c.symbols.iter_mut().for_each(|s| *s = remap[*s]);
        }
        let first = &clips[0];
        let per_gender = |g: Gender| {
            let mut s: Vec<&str> = clips.iter().filter(|c| c.gender == g).map(|c| c.singer.as_str()).collect();
            s.sort();
            s.dedup();
            s.len()
        };
        let config = CorpusConfig {
            singers_per_gender: per_gender(Gender::F).min(per_gender(Gender::M)),
            n_symbols: symbols.len(),
            clips_per_singer: clips.len() / (per_gender(Gender::F) + per_gender(Gender::M)).max(1),
            symbols_per_clip: first.symbols.len(),
            symbol_secs: first.voice.duration_secs() / first.symbols.len() as f64,
            sample_rate: first.voice.sample_rate(),
            ..CorpusConfig::default()
        };
        Ok(Self {
            config,
            symbols,
            clips,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_counts() {
        let c = Corpus::generate(&CorpusConfig::default(), 1).unwrap();
        assert_eq!(c.clips.len(), 40);
        assert_eq!(c.singer_ids().len(), 8);
        assert_eq!(c.clips.iter().filter(|c| c.gender == Gender::F).count(), 20);
        for clip in &c.clips {
            assert_eq!(clip.voice.len(), 4000);
            assert_eq!(clip.backing.len(), 4000);
            assert!(clip.symbols.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn too_few_singers_rejected() {
        let cfg = CorpusConfig {
            singers_per_gender: 1,
            ..CorpusConfig::default()
        };
        assert!(matches!(Corpus::generate(&cfg, 0), Err(Error::Corpus(_))));
        let cfg = CorpusConfig {
            n_symbols: 3,
            ..CorpusConfig::default()
        };
        assert!(Corpus::generate(&cfg, 0).is_err());
    }

    #[test]
    fn write_and_load_preserves_clips() {
        let cfg = CorpusConfig {
            singers_per_gender: 2,
            clips_per_singer: 2,
            ..CorpusConfig::default()
        };
        let c = Corpus::generate(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = c.write(dir.path()).unwrap();
        let back = Corpus::load(&manifest).unwrap();
        assert_eq!(back.clips.len(), c.clips.len());
        for (a, b) in c.clips.iter().zip(&back.clips) {
            assert_eq!(a.singer, b.singer);
            assert_eq!(c.symbol_names(&a.symbols), back.symbol_names(&b.symbols));
            let err = a.voice.samples().iter().zip(b.voice.samples()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(err <= 0.5 / 32768.0 + 1e-12);
        }
        assert_eq!(back.config.clips_per_singer, 2);
        assert_eq!(back.config.sample_rate, 8000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = CorpusConfig {
            singers_per_gender: 2,
            clips_per_singer: 1,
            ..CorpusConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        Corpus::generate(&cfg, 9).unwrap().write(a.path()).unwrap();
        Corpus::generate(&cfg, 9).unwrap().write(b.path()).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }

    #[test]
    fn frame_labels_follow_symbol_order() {
        let c = Corpus::generate(&CorpusConfig::default(), 2).unwrap();
        let clip = &c.clips[0];
        let labels = c.frame_labels(clip, 256, 128);
        assert_eq!(labels.len(), 30);
        assert_eq!(labels[0], clip.symbols[0]);
        assert_eq!(*labels.last().unwrap(), *clip.symbols.last().unwrap());
    }
}
