use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::FrontEndConfig;
use crate::metrics::snr;

fn tone(n: usize, f: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / 8000.0;
            0.3 * (std::f64::consts::TAU * f * t).sin()
                + 0.1 * (std::f64::consts::TAU * 2.7 * f * t).sin()
                + 0.01 * rng.random_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(s, 8000).unwrap()
}

fn id_handle(seed: u64) -> EncoderHandle {
    let front = FrontEndConfig::for_rate(8000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&[front.n_mels, 16, 8], &mut rng).unwrap();
    net.input_shift.iter_mut().for_each(|v| *v = -5.0);
    net.input_scale.iter_mut().for_each(|v| *v = 0.3);
    EncoderHandle::new("identity-eval", EncoderKind::Identity, true, seed, &front, Some(net)).unwrap()
}

#[test]
fn gaussian_hits_target_snr_before_clipping() {
    let w = tone(4000, 220.0, 1);
    for seed in 0..20 {
        let noise = gaussian_noise(&w, 20.0, seed).unwrap();
        let noisy = Waveform::new(w.samples().iter().zip(&noise).map(|(a, b)| a + b).collect(), 8000).unwrap();
        let measured = snr(&w, &noisy).unwrap();
        assert!((measured - 20.0).abs() <= 0.5, "seed {seed}: {measured} dB");
    }
}

#[test]
fn gaussian_contract() {
    let w = tone(2000, 330.0, 2);
    assert!(gaussian_at(&w, f64::INFINITY, 0).is_err());
    assert!(gaussian_at(&w, f64::NAN, 0).is_err());
    let silent = Waveform::new(vec![0.0; 2000], 8000).unwrap();
    assert!(gaussian_at(&silent, 20.0, 0).is_err());
    let a = gaussian_at(&w, 10.0, 5).unwrap();
    assert_eq!(a, gaussian_at(&w, 10.0, 5).unwrap());
    assert_ne!(a, gaussian_at(&w, 10.0, 6).unwrap());
    let loud = gaussian_at(&w, -20.0, 1).unwrap();
    assert!(loud.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn requantize_sixteen_bits_is_identity_on_pcm16() {
    let s: Vec<f64> = (-32768..32768).step_by(97).map(|k| k as f64 / 32768.0).collect();
    let w = Waveform::new(s, 8000).unwrap();
    assert_eq!(requantize(&w, 16).unwrap(), w);
}

#[test]
fn requantize_rejects_bit_depths() {
    let w = tone(512, 200.0, 0);
    assert!(requantize(&w, 3).is_err());
    assert!(requantize(&w, 17).is_err());
    assert!(requantize(&w, 4).is_ok());
}

proptest! {
    #[test]
    fn requantize_error_bound(s in prop::collection::vec(-1.0f64..=1.0, 1..64), bits in 4u32..=16) {
        let w = Waveform::new(s, 8000).unwrap();
        let q = requantize(&w, bits).unwrap();
        let bound = 2f64.powi(-(bits as i32));
        for (a, b) in w.samples().iter().zip(q.samples()) {
            prop_assert!((a - b).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn requantize_is_idempotent(s in prop::collection::vec(-1.0f64..=1.0, 1..64), bits in 4u32..=16) {
        let w = Waveform::new(s, 8000).unwrap();
        let q = requantize(&w, bits).unwrap();
        prop_assert_eq!(requantize(&q, bits).unwrap(), q);
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn nes_tracks_quadratic_gradient() {
    let x = vec![1.0; 3];
    let cfg = NesConfig::default();
    let mut total = 0.0;
    for seed in 0..10 {
        let mut oracle = CountingOracle::new(|v: &[f64]| Ok(v.iter().map(|a| a * a).sum()), cfg.samples_per_draw);
        let est = nes_gradient(&mut oracle, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        total += cos(&est.grad, &[2.0, 2.0, 2.0]);
        assert_eq!(oracle.calls(), 50);
    }
    assert!(total / 10.0 >= 0.9, "mean cosine {}", total / 10.0);
}

#[test]
fn nes_constant_oracle_gives_zero() {
    let cfg = NesConfig::default();
    let mut mean = vec![0.0; 5];
    for seed in 0..10 {
        let mut oracle = CountingOracle::new(|_: &[f64]| Ok(0.7), 50);
        let est = nes_gradient(&mut oracle, &[0.1; 5], &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        axpy(0.1, &est.grad, &mut mean);
        assert!((est.mean_score - 0.7).abs() < 1e-15);
    }
    assert!(mean.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn default_budget_is_counted_exactly() {
    let cfg = NesConfig::default();
    assert_eq!(cfg.budget(), 50_000);
    let mut oracle = CountingOracle::new(|v: &[f64]| Ok(v[0]), cfg.budget());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..cfg.iterations {
        nes_gradient(&mut oracle, &[0.0, 0.0], &cfg, &mut rng).unwrap();
    }
    assert_eq!(oracle.calls(), 50_000);
    assert!(matches!(
        nes_gradient(&mut oracle, &[0.0, 0.0], &cfg, &mut rng),
        Err(Error::BudgetExhausted(50_000))
    ));
    assert_eq!(oracle.calls(), 50_000);
}

#[test]
fn nes_config_validation() {
    assert!(NesConfig { samples_per_draw: 7, ..Default::default() }.validate().is_err());
    assert!(NesConfig { sigma: 0.0, ..Default::default() }.validate().is_err());
    assert!(NesConfig::default().validate().is_ok());
}

#[test]
fn oracle_errors_propagate() {
    let mut oracle = CountingOracle::new(|_: &[f64]| Err(Error::NonFinite("probe".into())), 100);
    let r = nes_gradient(&mut oracle, &[0.0], &NesConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

fn song(seed: u64) -> Song {
    Song::new(tone(1600, 180.0, seed), tone(1600, 90.0, seed + 100)).unwrap()
}

fn mean_oracle(w: &Waveform) -> Result<f64> {
    Ok(w.samples().iter().sum::<f64>() / w.len() as f64)
}

#[test]
fn zero_iteration_adversary_is_a_no_op() {
    let s = song(1);
    let cfg = NesConfig { iterations: 0, ..Default::default() };
    let run = optimization_adversary(&s, &s.voice, mean_oracle, &[], &cfg, 0).unwrap();
    assert_eq!(run.song.voice, s.voice);
    assert_eq!(run.queries, 0);
    assert!(run.trace.is_empty());
}

#[test]
fn adversary_counts_queries_and_is_deterministic() {
    let s = song(2);
    let cfg = NesConfig { iterations: 20, samples_per_draw: 10, max_change: 0.01, ..Default::default() };
    let a = optimization_adversary(&s, &s.voice, mean_oracle, &[], &cfg, 9).unwrap();
    let b = optimization_adversary(&s, &s.voice, mean_oracle, &[], &cfg, 9).unwrap();
    assert_eq!(a.queries, 200);
    assert_eq!(a.trace.last().unwrap().queries, 200);
    assert!(!a.exhausted);
    assert_eq!(a.song.voice, b.song.voice);
    // the score being ascended is the mean sample value
    let m0 = mean_oracle(&s.voice).unwrap();
    assert!(mean_oracle(&a.song.voice).unwrap() > m0);
    let max_change = a
        .song
        .voice
        .samples()
        .iter()
        .zip(s.voice.samples())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(max_change <= cfg.max_change + 1e-15);
}

#[test]
fn adversary_reports_exhaustion() {
    let s = song(3);
    let cfg = NesConfig {
        iterations: 10,
        samples_per_draw: 10,
        query_budget: Some(45),
        ..Default::default()
    };
    let run = optimization_adversary(&s, &s.voice, mean_oracle, &[], &cfg, 0).unwrap();
    assert!(run.exhausted);
    assert_eq!(run.queries, 40);
    assert_eq!(run.trace.len(), 4);
}

fn pairs(n: usize) -> Vec<(Waveform, Waveform)> {
    (0..n)
        .map(|k| {
            let clean = tone(1600, 150.0 + 40.0 * k as f64, k as u64);
            let noise = gaussian_at(&clean, 5.0, k as u64).unwrap();
            (clean, noise)
        })
        .collect()
}

#[test]
fn finetune_f1_decreases() {
    let h = id_handle(4);
    let ps = pairs(4);
    let refs: Vec<(&Waveform, &Waveform)> = ps.iter().map(|(a, b)| (a, b)).collect();
    let cfg = FinetuneConfig {
        loss_mode: FinetuneLoss::F1,
        epochs: 20,
        ..Default::default()
    };
    let (ft, rep) = finetune_encoder(&h, &refs, &[], &cfg).unwrap();
    assert!(rep.f1_after < rep.f1_before, "{rep:?}");
    assert!(rep.accuracy_before.is_nan());
    assert_eq!(ft.id(), "identity-eval-ft");
    assert!(ft.is_held_out());
}

#[test]
fn finetune_zero_epochs_keeps_parameters() {
    let h = id_handle(5);
    let ps = pairs(2);
    let refs: Vec<(&Waveform, &Waveform)> = ps.iter().map(|(a, b)| (a, b)).collect();
    let labelled: Vec<(&Waveform, usize)> = ps.iter().enumerate().map(|(i, (a, _))| (a, i)).collect();
    let cfg = FinetuneConfig { epochs: 0, ..Default::default() };
    let (ft, rep) = finetune_encoder(&h, &refs, &labelled, &cfg).unwrap();
    assert_eq!(ft.net().unwrap().flat_params(), h.net().unwrap().flat_params());
    assert_eq!(rep.f1_before, rep.f1_after);
}

#[test]
fn finetune_preconditions() {
    let h = id_handle(6);
    let cfg = FinetuneConfig::default();
    assert!(finetune_encoder(&h, &[], &[], &cfg).is_err());
    let ps = pairs(1);
    let refs = [(&ps[0].0, &ps[0].1)];
    // f2 needs labels
    assert!(finetune_encoder(&h, &refs, &[], &cfg).is_err());
    let front = FrontEndConfig::for_rate(8000);
    let ac = EncoderHandle::acoustic(&front).unwrap();
    assert!(matches!(
        finetune_encoder(&ac, &refs, &[], &FinetuneConfig { loss_mode: FinetuneLoss::F1, ..cfg }),
        Err(Error::KindMismatch { .. })
    ));
}

#[test]
fn attack_report_csv() {
    let rows = vec![AttackRow {
        adversary: "baseline".into(),
        parameters: String::new(),
        srr_i: 1.0,
        srr_l: 0.5,
        srr_t: 1.0,
        is_defended: -0.1,
        wer_defended: 0.6,
        queries: 0,
    }];
    let mut buf = Vec::new();
    AttackReport { rows }.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("adversary,parameters,srr_i,srr_l,srr_t,is_defended,wer_defended,queries\n"));
    assert_eq!(text.lines().count(), 2);
}
