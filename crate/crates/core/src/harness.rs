//! Batch protection and evaluation over a corpus.
//!
//! Per singer, a few clean clips serve as references for the identity
//! centroid, the remaining "provided" clips are what a conversion model
//! would be fed and are the ones that get protected. One provided clip per
//! singer doubles as the source voice of conversion pairs.

use std::collections::BTreeMap;
use std::thread;

use crate::audio::{mix_to_mono, Song, Waveform};
use crate::corpus::{Clip, Corpus};
use crate::encoders::{EncoderHandle, EncoderKind, EncoderSet, SingerProfile};
use crate::error::{Error, Result};
use crate::losses::{cosine_sim, destination_pool, select_destination, DestinationSinger, LyricTarget, LyricTargetSet};
use crate::metrics::{mix_at_ratio, snr, svc_proxy, wer, EvalReport, PairRecord, SrrThresholds, SymbolTemplates};
use crate::optim::{protect, ProtectionConfig, ProtectionContext, ProtectionResult};

/// Which clip positions of each singer play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPlan {
    pub reference: Vec<usize>,
    pub provided: Vec<usize>,
    /// Position (within the singer's clips) of the source voice.
    pub source: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            reference: vec![0, 1],
            provided: vec![2, 3, 4],
            source: 2,
        }
    }
}

/// Protected voices keyed by clip id.
pub type ProtectedSet = BTreeMap<String, Waveform>;

/// Mixes a per-clip seed out of the run seed.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Bench<'a> {
    corpus: &'a Corpus,
    encoders: &'a EncoderSet,
    plan: EvalPlan,
    singers: Vec<String>,
    templates: SymbolTemplates,
}

impl<'a> Bench<'a> {
    pub fn new(corpus: &'a Corpus, encoders: &'a EncoderSet, plan: EvalPlan) -> Result<Self> {
        let singers = corpus.singer_ids();
        let n = corpus.config.clips_per_singer;
        if let Some(p) = plan.reference.iter().chain(&plan.provided).chain([&plan.source]).find(|&&p| p >= n) {
            return Err(Error::InvalidConfig(format!("clip position {p} but singers have {n} clips")));
        }
        if plan.reference.is_empty() || plan.provided.is_empty() {
            return Err(Error::InvalidConfig("evaluation needs reference and provided clips".into()));
        }
        if !plan.provided.contains(&plan.source) {
            return Err(Error::InvalidConfig("the source clip must be one of the provided clips".into()));
        }
        if plan.reference.iter().any(|r| plan.provided.contains(r)) {
            return Err(Error::InvalidConfig("reference and provided clips overlap".into()));
        }
        let lyric_eval = encoders.held_out(EncoderKind::Lyric)?;
        // the recognizer vocabulary comes from clean reference clips only
        let ids: Vec<String> = singers
            .iter()
            .flat_map(|s| plan.reference.iter().map(move |&p| format!("{s}_{p}")))
            .collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let templates = SymbolTemplates::from_corpus(corpus, lyric_eval, &id_refs)?;
        Ok(Self {
            corpus,
            encoders,
            plan,
            singers,
            templates,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    pub fn singers(&self) -> &[String] {
        &self.singers
    }

    pub fn templates(&self) -> &SymbolTemplates {
        &self.templates
    }

    fn clip_at(&self, singer: &str, pos: usize) -> Result<&'a Clip> {
        self.corpus
            .clips
            .iter()
            .filter(|c| c.singer == singer)
            .nth(pos)
            .ok_or_else(|| Error::Corpus(format!("singer {singer} has no clip {pos}")))
    }

    pub fn clip(&self, id: &str) -> Result<&'a Clip> {
        self.corpus
            .clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Corpus(format!("unknown clip {id}")))
    }

    fn references(&self, singer: &str) -> Result<Vec<Waveform>> {
        self.plan.reference.iter().map(|&p| Ok(self.clip_at(singer, p)?.voice.clone())).collect()
    }

    /// Ids of every clip the plan protects, singer by singer.
    pub fn provided_ids(&self) -> Vec<String> {
        self.singers
            .iter()
            .flat_map(|s| self.plan.provided.iter().map(move |&p| (s, p)))
            .filter_map(|(s, p)| self.clip_at(s, p).ok().map(|c| c.id.clone()))
            .collect()
    }

    pub fn source_id(&self, singer: &str) -> Result<String> {
        Ok(self.clip_at(singer, self.plan.source)?.id.clone())
    }

    /// Profile of a singer's reference clips under `h`.
    pub fn profile(&self, singer: &str, h: &EncoderHandle) -> Result<SingerProfile> {
        let g = self
            .corpus
            .gender_of(singer)
            .ok_or_else(|| Error::Corpus(format!("unknown singer {singer}")))?;
        SingerProfile::build(singer, g, self.references(singer)?, h)
    }

    /// Destination singer for `clip`, chosen under the first ensemble
    /// identity encoder.
    pub fn destination(&self, clip: &Clip, cfg: &ProtectionConfig) -> Result<DestinationSinger> {
        let ens = self.encoders.ensemble(EncoderKind::Identity, &cfg.identity_encoders)?;
        let h = ens[0];
        let profiles = self
            .singers
            .iter()
            .map(|s| self.profile(s, h))
            .collect::<Result<Vec<_>>>()?;
        // a voice from outside the corpus is profiled from itself
        let own;
        let me = match profiles.iter().find(|p| p.id == clip.singer) {
            Some(p) => p,
            None => {
                own = SingerProfile::build(clip.singer.clone(), clip.gender, vec![clip.voice.clone()], h)?;
                &own
            }
        };
        select_destination(me, &destination_pool(&profiles, clip.gender), h)
    }

    /// `K` clean clips of other singers with different lyrics.
    pub fn lyric_targets(&self, clip: &Clip, cfg: &ProtectionConfig) -> Result<LyricTargetSet> {
        let candidates: Vec<LyricTarget> = self
            .corpus
            .clips
            .iter()
            .filter(|c| c.singer != clip.singer)
            .map(|c| LyricTarget {
                clip: c.id.clone(),
                singer: c.singer.clone(),
                symbols: c.symbols.clone(),
                voice: c.voice.clone(),
            })
            .collect();
        LyricTargetSet::select(&candidates, &clip.symbols, cfg.n_targets, cfg.seed)
    }

    /// Protects one clip, deriving its seed from the run seed and the
    /// clip's corpus position.
    pub fn protect_clip(&self, id: &str, cfg: &ProtectionConfig) -> Result<ProtectionResult> {
        let clip = self.clip(id)?;
        let index = self.corpus.clips.iter().position(|c| c.id == id).expect("clip exists");
        self.protect_song(clip, index, cfg)
    }

    /// Protects an arbitrary clip against this bench's singers. `index`
    /// feeds the per-clip seed; the clip need not belong to the corpus.
    pub fn protect_song(&self, clip: &Clip, index: usize, cfg: &ProtectionConfig) -> Result<ProtectionResult> {
        let id = &clip.id;
        let cfg = ProtectionConfig {
            seed: clip_seed(cfg.seed, index),
            ..cfg.clone()
        };
        let dest = cfg.needs_destination().then(|| self.destination(clip, &cfg)).transpose()?;
        let mut targets = cfg.needs_targets().then(|| self.lyric_targets(clip, &cfg)).transpose()?;
        if let Some(t) = targets.as_mut() {
            let lyric = self.encoders.ensemble(EncoderKind::Lyric, &cfg.lyric_encoders)?;
            let mut hs = lyric;
            hs.push(self.encoders.acoustic());
            t.cache_features(&hs)?;
        }
        let song = Song::new(clip.voice.clone(), clip.backing.clone())?;
        let ctx = ProtectionContext {
            encoders: self.encoders,
            destination: dest.as_ref(),
            targets: targets.as_ref(),
        };
        log::debug!("protecting {id}");
        protect(&song, &ctx, &cfg)
    }

    /// Protects the listed clips on `workers` threads. Results do not depend
    /// on the worker count.
    pub fn protect_many(&self, ids: &[String], cfg: &ProtectionConfig, workers: usize) -> Result<BTreeMap<String, ProtectionResult>> {
        let workers = workers.clamp(1, ids.len().max(1));
        let chunks: Vec<Vec<&String>> = (0..workers).map(|w| ids.iter().skip(w).step_by(workers).collect()).collect();
        let results: Vec<Result<Vec<(String, ProtectionResult)>>> = thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    s.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|id| Ok((id.clone(), self.protect_clip(id, cfg)?)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("protection worker panicked")).collect()
        });
        let mut out = BTreeMap::new();
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    /// All (target singer, source clip) pairs.
    pub fn all_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for t in &self.singers {
            for s in &self.singers {
                pairs.push((t.clone(), self.source_id(s)?));
            }
        }
        Ok(pairs)
    }

    /// Whether `clip` is among the first `round(ratio * n)` provided clips
    /// of its singer, i.e. protected at that ratio.
    fn protected_at_ratio(&self, clip: &Clip, ratio: f64) -> Result<bool> {
        let k = (ratio * self.plan.provided.len() as f64).round() as usize;
        for &p in self.plan.provided.iter().take(k) {
            if self.clip_at(&clip.singer, p)?.id == clip.id {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Runs the conversion proxy on every pair with and without protection.
    /// At `ratio`, the first `round(ratio * n)` provided clips of every
    /// singer count as protected, on the target and on the source side.
    pub fn evaluate(&self, protected: &ProtectedSet, pairs: &[(String, String)], ratio: f64, th: &SrrThresholds) -> Result<EvalReport> {
        let id_eval = self.encoders.held_out(EncoderKind::Identity)?;
        self.evaluate_with(protected, pairs, ratio, th, id_eval, true)
    }

    /// [`Bench::evaluate`] with the proxy's identity encoder replaced by
    /// `identity` (say, a fine-tuned copy of the held-out one). Singer
    /// centroids come from `identity` when `retrain_centroids` is set and
    /// from the original held-out encoder otherwise.
    pub fn evaluate_with(
        &self,
        protected: &ProtectedSet,
        pairs: &[(String, String)],
        ratio: f64,
        th: &SrrThresholds,
        identity: &EncoderHandle,
        retrain_centroids: bool,
    ) -> Result<EvalReport> {
        let id_eval = identity;
        let id_profile = if retrain_centroids {
            identity
        } else {
            self.encoders.held_out(EncoderKind::Identity)?
        };
        let ly_eval = self.encoders.held_out(EncoderKind::Lyric)?;
        let mut profiles: BTreeMap<&str, SingerProfile> = BTreeMap::new();
        let mut records = Vec::with_capacity(pairs.len());
        for (target, source) in pairs {
            if !profiles.contains_key(target.as_str()) {
                profiles.insert(target.as_str(), self.profile(target, id_profile)?);
            }
            let profile = &profiles[target.as_str()];
            let provided: Vec<&Clip> = self
                .plan
                .provided
                .iter()
                .map(|&p| self.clip_at(target, p))
                .collect::<Result<_>>()?;
            let clean: Vec<Waveform> = provided.iter().map(|c| c.voice.clone()).collect();
            let prot: Vec<Waveform> = provided
                .iter()
                .map(|c| protected.get(&c.id).cloned().unwrap_or_else(|| c.voice.clone()))
                .collect();
            let src = self.clip(source)?;
            let src_prot = match protected.get(source) {
                Some(w) if self.protected_at_ratio(src, ratio)? => w,
                _ => &src.voice,
            };
            let clean_refs: Vec<&Waveform> = clean.iter().collect();
            let und = svc_proxy(&clean_refs, &src.voice, id_eval, ly_eval, &self.templates)?;
            let def = svc_proxy(&mix_at_ratio(&clean, &prot, ratio)?, src_prot, id_eval, ly_eval, &self.templates)?;
            records.push(PairRecord {
                target: target.clone(),
                source: source.clone(),
                is_undefended: cosine_sim(und.embedding.values(), profile.centroid.values())?,
                is_defended: cosine_sim(def.embedding.values(), profile.centroid.values())?,
                wer_undefended: wer(&src.symbols, &und.symbols)?,
                wer_defended: wer(&src.symbols, &def.symbols)?,
            });
        }
        let snr_db = protected
            .iter()
            .map(|(id, w)| {
                let c = self.clip(id)?;
                let clean = Song::new(c.voice.clone(), c.backing.clone())?;
                let prot = clean.with_voice(w.clone())?;
                snr(&mix_to_mono(&clean), &mix_to_mono(&prot))
            })
            .collect::<Result<Vec<_>>>()?;
        EvalReport::new(records, th, ratio, snr_db)
    }
}

/// Worker count from the `SONGSHIELD_WORKERS` environment variable, or 1.
pub fn workers_from_env() -> usize {
    std::env::var("SONGSHIELD_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
