use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use songshield::adversary::{
    finetune_encoder, gaussian_at, optimization_adversary, requantize, AttackReport, AttackRow,
};
use songshield::audio::{load_waveform, save_waveform, SampleFormat, Song, Waveform};
use songshield::corpus::{Clip, Corpus, CorpusConfig, Gender};
use songshield::encoders::{identity_embed, train_toy_with, EncoderKind, EncoderSet};
use songshield::harness::{clip_seed, workers_from_env, Bench, EvalPlan, ProtectedSet};
use songshield::losses::cosine_sim;
use songshield::optim::ProtectionResult;

use crate::config::{RunConfig, Transform};
use crate::{AttackArgs, CliError, Common, EvaluateArgs, GenCorpusArgs, ProtectArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Command-line value, else config value, else a validation error.
fn require(arg: &Option<PathBuf>, cfg: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Validation(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(runtime)?;
    Ok(BufWriter::new(f))
}

/// Loaded config, corpus and encoders of a command working on a trained corpus.
struct Workspace {
    cfg: RunConfig,
    seed: u64,
    corpus: Corpus,
    set: EncoderSet,
}

impl Workspace {
    fn open(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        cfg.apply_seed(seed);
        let manifest = require(&common.manifest, &cfg.paths.manifest, "manifest")?;
        let encoders = require(&common.encoders, &cfg.paths.encoders, "encoders")?;
        let corpus = Corpus::load(&manifest)?;
        let set = EncoderSet::load(&encoders)?;
        Ok(Self { cfg, seed, corpus, set })
    }

    fn bench(&self) -> Result<Bench<'_>> {
        Ok(Bench::new(&self.corpus, &self.set, EvalPlan::default())?)
    }
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let cfg = CorpusConfig {
        singers_per_gender: a.singers,
        n_symbols: a.symbols,
        clips_per_singer: a.clips_per_singer,
        ..Default::default()
    };
    let corpus = Corpus::generate(&cfg, a.seed)?;
    let manifest = corpus.write(&a.out)?;
    log::info!("wrote {} clips", corpus.clips.len());
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let manifest = require(&a.manifest, &cfg.paths.manifest, "manifest")?;
    let out = require(&a.out, &cfg.paths.encoders, "out")?;
    let corpus = Corpus::load(&manifest)?;
    let (set, report) = train_toy_with(&corpus, &cfg.train, a.seed)?;
    let files = set.save(&out)?;
    let report_path = out.join("train_report.csv");
    fs::write(&report_path, report.to_string())
        .with_context(|| format!("writing {}", report_path.display()))
        .map_err(runtime)?;
    log::info!("wrote {} encoder files", files.len());
    print!("{report}");
    Ok(())
}

fn write_result(r: &ProtectionResult, wav: &Path, trace: &Path, format: SampleFormat) -> Result<()> {
    save_waveform(wav, &r.protected, format)?;
    r.traces.write_wide_csv(create_file(trace)?)?;
    Ok(())
}

fn voice_clip(a: &ProtectArgs, corpus: &Corpus) -> Result<(Clip, SampleFormat)> {
    let path = a.voice.as_ref().expect("voice mode");
    let (voice, format) = load_waveform::<f64>(path)?;
    let backing = match &a.backing {
        Some(p) => load_waveform::<f64>(p)?.0.fit_to_length(voice.len()),
        None => Waveform::new(vec![0.0; voice.len()], voice.sample_rate())?,
    };
    let gender: Gender = a.gender.as_deref().unwrap_or_default().parse()?;
    let names: Vec<&str> = corpus.symbols.iter().map(|s| s.name.as_str()).collect();
    let symbols = a
        .lyrics
        .as_deref()
        .unwrap_or_default()
        .split_whitespace()
        .map(|s| {
            names
                .iter()
                .position(|n| *n == s)
                .ok_or_else(|| CliError::Validation(format!("lyric symbol {s:?} is not one of {}", names.join(" "))))
        })
        .collect::<Result<Vec<_>>>()?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "voice".into());
    let clip = Clip {
        id,
        singer: a.singer.clone().unwrap_or_else(|| "external".into()),
        gender,
        symbols,
        voice,
        backing,
    };
    Ok((clip, format))
}

pub fn protect(a: &ProtectArgs) -> Result<()> {
    let mut ws = Workspace::open(&a.common)?;
    let p = &mut ws.cfg.protection;
    for (flag, slot) in [
        (a.protect_target, &mut p.protect_target),
        (a.protect_source, &mut p.protect_source),
        (a.transfer_identity, &mut p.transfer_identity),
        (a.transfer_lyric, &mut p.transfer_lyric),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(n) = a.iterations {
        p.iterations = n;
    }
    p.validate()?;
    let bench = ws.bench()?;
    let cfg = &ws.cfg.protection;
    let out = require(&a.out, &ws.cfg.paths.out, "out")?;

    if a.batch {
        create_dir(&out)?;
        let ids = bench.provided_ids();
        let results = bench.protect_many(&ids, cfg, workers_from_env())?;
        let mut summary = csv::Writer::from_writer(create_file(&out.join("summary.csv"))?);
        summary.write_record(["clip", "snr_voice_db", "snr_mix_db", "mean_iteration_secs"]).map_err(runtime)?;
        for (id, r) in &results {
            write_result(r, &out.join(format!("{id}.wav")), &out.join(format!("{id}_trace.csv")), SampleFormat::Float32)?;
            let s = &r.summary;
            summary
                .write_record([id.clone(), s.snr_voice_db.to_string(), s.snr_mix_db.to_string(), s.mean_iteration_secs.to_string()])
                .map_err(runtime)?;
        }
        summary.flush()?;
        println!("protected {} clips into {}", results.len(), out.display());
        return Ok(());
    }

    let (result, format) = match (&a.clip, &a.voice) {
        (Some(id), _) => {
            let path = ws.corpus_dir(a)?.join(format!("{id}.wav"));
            let format = load_waveform::<f64>(&path).map(|(_, f)| f).unwrap_or(SampleFormat::Int16);
            (bench.protect_clip(id, cfg)?, format)
        }
        (None, Some(_)) => {
            let (clip, format) = voice_clip(a, &ws.corpus)?;
            (bench.protect_song(&clip, ws.corpus.clips.len(), cfg)?, format)
        }
        (None, None) => return Err(CliError::Validation("give --clip, --voice or --batch".into())),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let trace = a.trace.clone().unwrap_or_else(|| {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        out.with_file_name(format!("{stem}_trace.csv"))
    });
    write_result(&result, &out, &trace, format)?;
    print!("{}", result.summary);
    Ok(())
}

impl Workspace {
    fn corpus_dir(&self, a: &ProtectArgs) -> Result<PathBuf> {
        let m = require(&a.common.manifest, &self.cfg.paths.manifest, "manifest")?;
        Ok(m.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

/// Reads `<dir>/<id>.wav` for every provided clip.
fn load_protected(bench: &Bench<'_>, dir: &Path) -> Result<ProtectedSet> {
    bench
        .provided_ids()
        .into_iter()
        .map(|id| {
            let (w, _) = load_waveform::<f64>(dir.join(format!("{id}.wav")))?;
            Ok((id, w))
        })
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    protect_ratio: f64,
    pairs: usize,
    xi_i: f64,
    xi_l: f64,
    srr_i: f64,
    srr_l: f64,
    srr_t: f64,
    is_undefended: f64,
    is_defended: f64,
    wer_undefended: f64,
    wer_defended: f64,
    median_snr_db: f64,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ws = Workspace::open(&a.common)?;
    if let Some(r) = a.protect_ratio.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Validation(format!("protect ratio {r} must lie in [0, 1]")));
    }
    let bench = ws.bench()?;
    let protected = load_protected(&bench, &require(&a.protected, &ws.cfg.paths.protected, "protected")?)?;
    let out = require(&a.out, &ws.cfg.paths.out, "out")?;
    create_dir(&out)?;
    let pairs = bench.all_pairs()?;
    let mut sweep = csv::Writer::from_writer(create_file(&out.join("sweep.csv"))?);
    for &ratio in &a.protect_ratio {
        let r = bench.evaluate(&protected, &pairs, ratio, &ws.cfg.thresholds)?;
        r.write_csv(create_file(&out.join(format!("report_r{ratio}.csv")))?)?;
        sweep
            .serialize(SweepRow {
                protect_ratio: ratio,
                pairs: r.q(),
                xi_i: r.xi_i,
                xi_l: r.xi_l,
                srr_i: r.srr.identity,
                srr_l: r.srr.lyric,
                srr_t: r.srr.both,
                is_undefended: r.mean_is_undefended(),
                is_defended: r.mean_is_defended(),
                wer_undefended: r.mean_wer_undefended(),
                wer_defended: r.mean_wer_defended(),
                median_snr_db: r.median_snr_db(),
            })
            .map_err(runtime)?;
        println!("{r}");
    }
    sweep.flush()?;
    Ok(())
}

pub fn attack(a: &AttackArgs) -> Result<()> {
    let ws = Workspace::open(&a.common)?;
    let bench = ws.bench()?;
    let protected = load_protected(&bench, &require(&a.protected, &ws.cfg.paths.protected, "protected")?)?;
    let out = require(&a.out, &ws.cfg.paths.out, "out")?;
    create_dir(&out)?;
    let th = &ws.cfg.thresholds;
    let pairs = bench.all_pairs()?;
    let plan = &ws.cfg.attack;
    let mut report = AttackReport::default();

    let baseline = bench.evaluate(&protected, &pairs, 1.0, th)?;
    report.rows.push(AttackRow::from_report("none", "", &baseline, 0));

    for t in &plan.transforms {
        let attacked = protected
            .iter()
            .enumerate()
            .map(|(i, (id, w))| {
                let w = match *t {
                    Transform::Gaussian { snr_db } => gaussian_at(w, snr_db, clip_seed(ws.seed, i))?,
                    Transform::Requantize { bits } => requantize(w, bits)?,
                };
                Ok((id.clone(), w))
            })
            .collect::<Result<ProtectedSet>>()?;
        let (name, params) = t.label();
        let r = bench.evaluate(&attacked, &pairs, 1.0, th)?;
        report.rows.push(AttackRow::from_report(name, params, &r, 0));
    }

    if a.nes || plan.nes {
        let id_eval = ws.set.held_out(EncoderKind::Identity)?;
        let lyric = ws.set.ensemble(EncoderKind::Lyric, &ws.cfg.protection.lyric_encoders)?;
        let ids = if plan.nes_clips.is_empty() {
            bench.provided_ids()
        } else {
            plan.nes_clips.clone()
        };
        let mut attacked = protected.clone();
        let mut queries = 0;
        for (k, id) in ids.iter().enumerate() {
            let clip = bench.clip(id)?;
            let w = protected
                .get(id)
                .ok_or_else(|| CliError::Validation(format!("{id} is not a protected clip")))?;
            let profile = bench.profile(&clip.singer, id_eval)?;
            let expected = ws.corpus.synthesize_voice(clip.gender, &clip.symbols, clip_seed(ws.seed, 1000 + k))?;
            let oracle = |x: &Waveform| cosine_sim(identity_embed(id_eval, x)?.values(), profile.centroid.values());
            let song = Song::new(w.clone(), clip.backing.clone())?;
            let run = optimization_adversary(&song, &expected, oracle, &lyric, &ws.cfg.nes, clip_seed(ws.seed, k))?;
            run.write_trace_csv(create_file(&out.join(format!("nes_{id}.csv")))?)?;
            log::info!("{id}: {} oracle queries", run.queries);
            queries += run.queries;
            attacked.insert(id.clone(), run.song.voice);
        }
        let r = bench.evaluate(&attacked, &pairs, 1.0, th)?;
        let params = format!("clips={} iterations={}", ids.len(), ws.cfg.nes.iterations);
        report.rows.push(AttackRow::from_report("nes", params, &r, queries));
    }

    if a.finetune || plan.finetune {
        let h = ws.set.held_out(EncoderKind::Identity)?;
        let ft_pairs = protected
            .iter()
            .map(|(id, w)| Ok((&bench.clip(id)?.voice, w)))
            .collect::<Result<Vec<_>>>()?;
        let singers = ws.corpus.singer_ids();
        let labelled: Vec<(&Waveform, usize)> = ws
            .corpus
            .clips
            .iter()
            .map(|c| (&c.voice, singers.iter().position(|s| *s == c.singer).expect("corpus singer")))
            .collect();
        let fc = &ws.cfg.finetune;
        let (tuned, fr) = finetune_encoder(h, &ft_pairs, &labelled, fc)?;
        log::info!("fine-tuning: {fr:?}");
        let r = bench.evaluate_with(&protected, &pairs, 1.0, th, &tuned, fc.retrain_decoder_analog)?;
        let mode = toml::Value::try_from(&fc.loss_mode).map(|v| v.to_string()).unwrap_or_default();
        let params = format!("loss={} epochs={}", mode.trim_matches('"'), fc.epochs);
        report.rows.push(AttackRow::from_report("finetune", params, &r, 0));
    }

    report.write_csv(create_file(&out.join("attack.csv"))?)?;
    print!("{report}");
    Ok(())
}
