use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::FrameSpec;
use crate::features::FrontEndConfig;
use crate::nn::Mlp;
use crate::psycho::{MaskingParams, UtilityLoss};

const SR: u32 = 8000;

fn net_handle(kind: EncoderKind, seed: u64, id: &str) -> EncoderHandle<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&[64, 12, 12, 6], &mut rng).unwrap();
    net.input_shift = vec![-5.0; 64];
    net.input_scale = vec![0.3; 64];
    EncoderHandle::new(id, kind, false, seed, &FrontEndConfig::for_rate(SR), Some(net)).unwrap()
}

fn voice(n: usize, f0: f64, seed: u64) -> Waveform<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / SR as f64;
            0.3 * (std::f64::consts::TAU * f0 * t).sin()
                + 0.15 * (std::f64::consts::TAU * 2.0 * f0 * t).sin()
                + 0.02 * rng.random_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(s, SR).unwrap()
}

fn perturbed(x0: &Waveform<f64>, scale: f64, seed: u64) -> Waveform<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::from_clipped(
        x0.samples().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect(),
        SR,
    )
    .unwrap()
}

fn profile(id: &str, gender: Gender, voices: Vec<Waveform<f64>>, h: &EncoderHandle<f64>) -> SingerProfile<f64> {
    SingerProfile::build(id, gender, voices, h).unwrap()
}

fn targets(n: usize) -> LyricTargetSet<f64> {
    let t = (0..3)
        .map(|k| LyricTarget {
            clip: format!("t{k}"),
            singer: "M0".into(),
            symbols: vec![k + 1, k + 2],
            voice: voice(n, 150.0 + 40.0 * k as f64, 10 + k as u64),
        })
        .collect();
    LyricTargetSet::new(t, &[0, 1]).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 4.0]).unwrap(), 0.0);
    assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(_))));
}

#[test]
fn seq_dist_examples() {
    let a = FeatureSequence::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2).unwrap();
    assert_eq!(seq_dist(&a, &a).unwrap(), 0.0);
    let orth = FeatureSequence::new(vec![0.0, 1.0, 1.0, 0.0, -1.0, 1.0], 2).unwrap();
    assert!((seq_dist(&a, &orth).unwrap() - 1.0f64).abs() < 1e-15);
    // 3 frames against 5: only the first 3 are compared
    let b = FeatureSequence::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0], 2).unwrap();
    assert_eq!(seq_dist(&a, &b).unwrap(), 0.0);
}

#[test]
fn destination_is_least_similar_with_id_ties() {
    let h = net_handle(EncoderKind::Identity, 1, "id");
    let mk = |id: &str, g: Gender, c: Vec<f64>| SingerProfile {
        id: id.into(),
        gender: g,
        voices: vec![],
        centroid: Embedding::new(c).unwrap(),
        encoder: "id".into(),
    };
    let target = mk("F0", Gender::F, vec![1.0, 0.0]);
    // cos 0.3 for A, -0.2 for B
    let a = mk("A", Gender::M, vec![0.3, (1.0f64 - 0.09).sqrt()]);
    let b = mk("B", Gender::M, vec![-0.2, (1.0f64 - 0.04).sqrt()]);
    let d = select_destination(&target, &[a.clone(), b.clone()], &h).unwrap();
    assert_eq!(d.profile.id, "B");
    assert_eq!(select_destination(&target, &[a.clone()], &h).unwrap().profile.id, "A");
    let c = mk("C", Gender::M, vec![0.3, (1.0f64 - 0.09).sqrt()]);
    assert_eq!(select_destination(&target, &[c, a.clone()], &h).unwrap().profile.id, "A");
    assert!(select_destination(&target, &[], &h).is_err());
    let same = mk("F1", Gender::F, vec![0.0, 1.0]);
    assert!(matches!(select_destination(&target, &[a, same], &h), Err(Error::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn destination_invariant_under_positive_scaling(
        cs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..6),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(cs.iter().all(|c| c.iter().any(|v| v.abs() > 1e-3)));
        let h = net_handle(EncoderKind::Identity, 1, "id");
        let mk = |id: String, g: Gender, c: Vec<f64>| SingerProfile {
            id, gender: g, voices: vec![], centroid: Embedding::new(c).unwrap(), encoder: "id".into(),
        };
        let target = mk("T".into(), Gender::F, vec![1.0, 0.5, -0.2, 0.1]);
        let pool: Vec<_> = cs.iter().enumerate().map(|(i, c)| mk(format!("M{i}"), Gender::M, c.clone())).collect();
        let scaled: Vec<_> = pool.iter().map(|p| mk(p.id.clone(), Gender::M, p.centroid.values().iter().map(|v| v * scale).collect())).collect();
        let t2 = mk("T".into(), Gender::F, target.centroid.values().iter().map(|v| v * scale).collect());
        let a = select_destination(&target, &pool, &h).unwrap().profile.id;
        let b = select_destination(&t2, &scaled, &h).unwrap().profile.id;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_ranges_hold(seed in 0u64..1000, scale in 0.0f64..0.5) {
        let hi = net_handle(EncoderKind::Identity, 3, "i");
        let hl = net_handle(EncoderKind::Lyric, 4, "l");
        let ac = EncoderHandle::acoustic(&FrontEndConfig::for_rate(SR)).unwrap();
        let x0 = voice(600, 200.0, 1);
        let x = perturbed(&x0, scale, seed);
        let ut = untargeted_identity_loss(&x, &x0, &hi).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ut));
        let t = targets(600);
        let h = high_hierarchy_loss(&x, &t, &hl).unwrap();
        let l = low_hierarchy_loss(&x, &t, &ac).unwrap();
        prop_assert!((0.0..=2.0).contains(&h) && (0.0..=2.0).contains(&l));
    }
}

#[test]
fn trivial_values() {
    let hi = net_handle(EncoderKind::Identity, 3, "i");
    let hl = net_handle(EncoderKind::Lyric, 4, "l");
    let ac = EncoderHandle::acoustic(&FrontEndConfig::for_rate(SR)).unwrap();
    let x0 = voice(800, 220.0, 1);
    assert_eq!(untargeted_identity_loss(&x0, &x0, &hi).unwrap(), 1.0);

    // destination centroid equal to the embedding of x
    let dest = DestinationSinger {
        profile: profile("M0", Gender::M, vec![x0.clone()], &hi),
        centroid: identity_embed(&hi, &x0).unwrap(),
    };
    assert_eq!(targeted_identity_loss(&x0, &dest, &hi).unwrap(), -1.0);

    // destination orthogonal to x0's embedding: components (1, 0)
    let e = identity_embed(&hi, &x0).unwrap();
    let mut v: Vec<f64> = (0..e.dim()).map(|i| (i as f64).sin() + 0.5).collect();
    let k = dot(&v, e.values()) / dot(e.values(), e.values());
    v.iter_mut().zip(e.values()).for_each(|(a, &b)| *a -= k * b);
    let orth = DestinationSinger {
        profile: profile("M1", Gender::M, vec![x0.clone()], &hi),
        centroid: Embedding::new(v).unwrap(),
    };
    let (ut, t) = gender_transformation_loss(&x0, &x0, &orth, &hi).unwrap();
    assert_eq!(ut, 1.0);
    assert!(t.abs() < 1e-12);

    // a target equal to x itself contributes zero distance
    let own = LyricTargetSet::new(
        vec![LyricTarget {
            clip: "self".into(),
            singer: "F0".into(),
            symbols: vec![5],
            voice: x0.clone(),
        }],
        &[0],
    )
    .unwrap();
    assert_eq!(high_hierarchy_loss(&x0, &own, &hl).unwrap(), 0.0);
    assert_eq!(low_hierarchy_loss(&x0, &own, &ac).unwrap(), 0.0);

    // K targets: mean of the individual distances
    let t = targets(800);
    let mean = t
        .targets()
        .iter()
        .map(|c| seq_dist(&hl.frame_outputs(&x0).unwrap(), &hl.frame_outputs(&c.voice).unwrap()).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!(close(high_hierarchy_loss(&x0, &t, &hl).unwrap(), mean, 1e-12));
}

#[test]
fn target_set_rejects_source_lyrics() {
    let x = voice(600, 200.0, 0);
    let t = LyricTarget {
        clip: "a".into(),
        singer: "F0".into(),
        symbols: vec![1, 2],
        voice: x,
    };
    assert!(LyricTargetSet::new(vec![t.clone()], &[1, 2]).is_err());
    assert!(LyricTargetSet::select(&[t.clone()], &[1, 2], 1, 0).is_err());
    let ok = LyricTargetSet::select(&[t.clone(), LyricTarget { symbols: vec![3], ..t }], &[1, 2], 1, 0).unwrap();
    assert_eq!(ok.targets()[0].symbols, vec![3]);
}

#[test]
fn flir_frames_follow_divisors() {
    let cfg = FlirConfig::default();
    let f = cfg.frames(4000).unwrap();
    assert_eq!(f.len(), 200);
    assert_eq!(f[0], (0, 20));
    assert_eq!(f[199], (3980, 4000));
    let c4 = FlirConfig {
        samples: 4,
        length_divisor: 4,
        shift_divisor: 4,
    };
    assert_eq!(c4.frames(1024).unwrap(), vec![(0, 256), (256, 512), (512, 768), (768, 1024)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = c4.sample(4, &mut rng);
    s.sort();
    assert_eq!(s, vec![0, 1, 2, 3]);
}

#[test]
fn flir_zero_at_zero_perturbation() {
    let hi = net_handle(EncoderKind::Identity, 3, "i");
    let hl = net_handle(EncoderKind::Lyric, 4, "l");
    let x0 = voice(1024, 180.0, 2);
    let cfg = FlirConfig {
        samples: 4,
        length_divisor: 8,
        shift_divisor: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(flir_identity_loss(&x0, &x0, &hi, &cfg, &mut rng).unwrap(), 0.0);
    assert_eq!(flir_lyric_loss(&x0, &x0, &targets(1024), &hl, &cfg, &mut rng).unwrap(), 0.0);
}

#[test]
fn flir_single_sample_lies_between_frame_extremes() {
    let hi = net_handle(EncoderKind::Identity, 3, "i");
    let x0 = voice(1024, 180.0, 2);
    let x = perturbed(&x0, 0.1, 4);
    let all = FlirConfig {
        samples: 4,
        length_divisor: 4,
        shift_divisor: 4,
    };
    // per-frame values: R=1 draws for every seed must be one of them
    let per_frame: Vec<f64> = (0..4)
        .map(|i| {
            let r = all.frames(1024).unwrap()[i];
            let f = |w: &Waveform<f64>| untargeted_identity_loss(w, &x0, &hi).unwrap();
            let pi = Waveform::new(frame_variant(x.samples(), x0.samples(), r, false), SR).unwrap();
            let phi = Waveform::new(frame_variant(x.samples(), x0.samples(), r, true), SR).unwrap();
            f(&x) + 1.0 - f(&pi) - f(&phi)
        })
        .collect();
    let lo = per_frame.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_v = per_frame.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let one = FlirConfig { samples: 1, ..all };
    for seed in 0..8 {
        let v = flir_identity_loss(&x, &x0, &hi, &one, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(v >= lo - 1e-12 && v <= hi_v + 1e-12);
    }
}

struct Fixture {
    hi: Vec<EncoderHandle<f64>>,
    hl: Vec<EncoderHandle<f64>>,
    ac: EncoderHandle<f64>,
    x0: Waveform<f64>,
    x: Waveform<f64>,
    dest: DestinationSinger<f64>,
    targets: LyricTargetSet<f64>,
}

fn fixture() -> Fixture {
    let hi = vec![
        net_handle(EncoderKind::Identity, 11, "i0"),
        net_handle(EncoderKind::Identity, 12, "i1"),
    ];
    let hl = vec![
        net_handle(EncoderKind::Lyric, 13, "l0"),
        net_handle(EncoderKind::Lyric, 14, "l1"),
    ];
    let ac = EncoderHandle::acoustic(&FrontEndConfig::for_rate(SR)).unwrap();
    let x0 = voice(1600, 210.0, 3);
    let x = perturbed(&x0, 0.05, 5);
    let dest_voices = vec![voice(1600, 120.0, 7), voice(1600, 130.0, 8)];
    let dest = DestinationSinger {
        profile: profile("M0", Gender::M, dest_voices.clone(), &hi[0]),
        centroid: profile("M0", Gender::M, dest_voices, &hi[0]).centroid,
    };
    Fixture {
        hi,
        hl,
        ac,
        x0,
        x,
        dest,
        targets: targets(1600),
    }
}

fn engine<'a>(fx: &'a Fixture, enabled: Vec<LossKind>, flir: FlirConfig) -> LossEngine<'a, f64> {
    let spec = FrameSpec::new(256, 128).unwrap();
    LossEngine::new(LossSetup {
        x0: &fx.x0,
        utility: UtilityLoss::basic(&fx.x0, &spec, &MaskingParams::default()).unwrap(),
        identity: fx.hi.iter().collect(),
        lyric: fx.hl.iter().collect(),
        acoustic: Some(&fx.ac),
        destination: Some(&fx.dest),
        targets: Some(&fx.targets),
        enabled,
        flir,
    })
    .unwrap()
}

fn mean_of(parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    ensemble_mean_f64(parts)
}

fn ensemble_mean_f64(parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    crate::encoders::ensemble_mean(parts).unwrap()
}

fn assert_matches(label: &str, (v, g): &(f64, Vec<f64>), (rv, rg): &(f64, Vec<f64>)) {
    assert!(close(*v, *rv, 1e-9), "{label}: value {v} vs reference {rv}");
    let scale = rg.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = g.iter().zip(rg).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-9 * scale.max(1e-12), "{label}: gradient error {err} (scale {scale})");
}

#[test]
fn engine_matches_reference_losses() {
    let fx = fixture();
    let flir = FlirConfig {
        samples: 5,
        length_divisor: 40,
        shift_divisor: 40,
    };
    let cases: Vec<(LossKind, Box<dyn Fn(&mut ChaCha8Rng) -> (f64, Vec<f64>)>)> = vec![
        (
            LossKind::IdentityUntargeted,
            Box::new(|_| mean_of(fx.hi.iter().map(|h| untargeted_identity_loss_and_grad(&fx.x, &fx.x0, h).unwrap()).collect())),
        ),
        (
            LossKind::IdentityTargeted,
            Box::new(|_| mean_of(fx.hi.iter().map(|h| targeted_identity_loss_and_grad(&fx.x, &fx.dest, h).unwrap()).collect())),
        ),
        (
            LossKind::LyricHigh,
            Box::new(|_| mean_of(fx.hl.iter().map(|h| high_hierarchy_loss_and_grad(&fx.x, &fx.targets, h).unwrap()).collect())),
        ),
        (
            LossKind::LyricLow,
            Box::new(|_| low_hierarchy_loss_and_grad(&fx.x, &fx.targets, &fx.ac).unwrap()),
        ),
        (
            LossKind::FlirIdentity,
            Box::new(|rng| {
                // every encoder sees the same sampled frames
                let state = rng.clone();
                mean_of(
                    fx.hi
                        .iter()
                        .map(|h| flir_identity_loss_and_grad(&fx.x, &fx.x0, h, &flir, &mut state.clone()).unwrap())
                        .collect(),
                )
            }),
        ),
        (
            LossKind::FlirLyric,
            Box::new(|rng| {
                let state = rng.clone();
                mean_of(
                    fx.hl
                        .iter()
                        .map(|h| flir_lyric_loss_and_grad(&fx.x, &fx.x0, &fx.targets, h, &flir, &mut state.clone()).unwrap())
                        .collect(),
                )
            }),
        ),
    ];
    for (kind, reference) in cases {
        let e = engine(&fx, vec![kind], flir);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let want = reference(&mut rng.clone());
        let got = e.value_and_grad(fx.x.samples(), kind, &mut rng).unwrap();
        assert_matches(kind.name(), &got, &want);
    }
}

#[test]
fn engine_combines_weighted_gradients_linearly() {
    let fx = fixture();
    let flir = FlirConfig {
        samples: 3,
        length_divisor: 40,
        shift_divisor: 40,
    };
    let e = engine(&fx, LossKind::ALL.to_vec(), flir);
    let ev = e.evaluate(fx.x.samples(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let weights: Vec<(LossKind, f64)> = LossKind::ALL.iter().enumerate().map(|(i, &k)| (k, 0.5 + i as f64)).collect();
    let total = e.gradient(&ev, &weights);
    let mut sum = vec![0.0; total.len()];
    for &(k, w) in &weights {
        crate::scalar::axpy(w, &e.gradient(&ev, &[(k, 1.0)]), &mut sum);
    }
    let scale = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = total.iter().zip(&sum).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-12 * scale);
    assert_eq!(ev.values.len(), 7);
}

#[test]
fn engine_flir_gradient_matches_finite_differences() {
    let fx = fixture();
    let flir = FlirConfig {
        samples: 4,
        length_divisor: 40,
        shift_divisor: 40,
    };
    for kind in [LossKind::FlirIdentity, LossKind::FlirLyric] {
        let e = engine(&fx, vec![kind], flir);
        let rng = ChaCha8Rng::seed_from_u64(3);
        let (_, g) = e.value_and_grad(fx.x.samples(), kind, &mut rng.clone()).unwrap();
        let mut dir = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..4 {
            let v: Vec<f64> = (0..g.len()).map(|_| dir.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let at = |s: f64| {
                let p: Vec<f64> = fx.x.samples().iter().zip(&v).map(|(a, b)| a + s * b).collect();
                e.value_and_grad(&p, kind, &mut rng.clone()).unwrap().0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let an = dot(&g, &v);
            assert!(close(fd, an, 1e-5), "{kind}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn engine_rejects_held_out_and_missing_context() {
    let fx = fixture();
    let spec = FrameSpec::new(256, 128).unwrap();
    let utility = || UtilityLoss::basic(&fx.x0, &spec, &MaskingParams::default()).unwrap();
    let missing = LossEngine::new(LossSetup {
        x0: &fx.x0,
        utility: utility(),
        identity: fx.hi.iter().collect(),
        lyric: vec![],
        acoustic: None,
        destination: None,
        targets: None,
        enabled: vec![LossKind::IdentityTargeted],
        flir: FlirConfig::default(),
    });
    assert!(matches!(missing, Err(Error::InvalidConfig(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Mlp::new(&[64, 4, 4], &mut rng).unwrap();
    net.input_scale = vec![0.1; 64];
    let held = EncoderHandle::new("eval", EncoderKind::Identity, true, 1, &FrontEndConfig::for_rate(SR), Some(net)).unwrap();
    let refused = LossEngine::new(LossSetup {
        x0: &fx.x0,
        utility: utility(),
        identity: vec![&held],
        lyric: vec![],
        acoustic: None,
        destination: None,
        targets: None,
        enabled: vec![LossKind::IdentityUntargeted],
        flir: FlirConfig::default(),
    });
    assert!(matches!(refused, Err(Error::HeldOut(_))));
}
