mod common;

use common::{grad_check, rng};
use proptest::prelude::*;
use rand::Rng;
use tdycnn::audio::{Waveform, N_MELS};
use tdycnn::model::{build_model, embed_frames, ConvMode, ModelConfig};
use tdycnn::train::*;
use tdycnn::{Error, Tape, Tensor};

fn ap_value(emb: &Tensor, w: f64, b: f64) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let wv = tape.constant(Tensor::scalar(w));
    let bv = tape.constant(Tensor::scalar(b));
    let l = angular_prototypical_loss(&mut tape, e, wv, bv)?;
    Ok(tape.value(l).data()[0])
}

fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    // product of two Householder reflections
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect();
    for _ in 0..2 {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let h: Vec<Vec<f64>> =
            (0..d).map(|i| (0..d).map(|j| f64::from(i == j) - 2.0 * v[i] * v[j] / vv).collect()).collect();
        q = (0..d).map(|i| (0..d).map(|j| (0..d).map(|k| h[i][k] * q[k][j]).sum()).collect()).collect();
    }
    q
}

#[test]
fn temperature_schedule_values() {
    assert_eq!(temperature_schedule(0).unwrap(), 31.0);
    assert_eq!(temperature_schedule(5).unwrap(), 16.0);
    for e in 0..=10 {
        assert_eq!(temperature_schedule(e).unwrap(), 31.0 - 3.0 * e as f64);
    }
    for e in [10, 11, 50] {
        assert_eq!(temperature_schedule(e).unwrap(), 1.0);
    }
    assert!(matches!(temperature_schedule(-1), Err(Error::Parameter(_))));
}

#[test]
fn lr_schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 1e-3);
    assert_eq!(lr_schedule(14, &cfg), 1e-3);
    assert_eq!(lr_schedule(15, &cfg), 7.5e-4);
    assert_eq!(lr_schedule(30, &cfg), 1e-3 * 0.75 * 0.75);
    assert!((lr_schedule(30, &cfg) - 5.625e-4).abs() < 1e-18);
}

#[test]
fn ap_loss_of_identical_embeddings_is_log_n() {
    for n in [2, 3, 7] {
        let emb = Tensor::full([n, 2, 5], 0.3);
        assert!((ap_value(&emb, 10.0, -5.0).unwrap() - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn ap_loss_of_orthogonal_speakers() {
    let emb = Tensor::new([2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let expected = (1.0 + (-10.0f64).exp()).ln();
    assert!((ap_value(&emb, 10.0, -5.0).unwrap() - expected).abs() < 1e-15);
    assert!((expected - 4.54e-5).abs() < 1e-7);
}

#[test]
fn ap_loss_is_invariant_to_speaker_order_and_rotation() {
    let (n, d) = (5, 6);
    let emb = Tensor::randn([n, 2, d], &mut rng(4));
    let base = ap_value(&emb, 10.0, -5.0).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let mut permuted = Tensor::zeros([n, 2, d]);
    for (i, &p) in perm.iter().enumerate() {
        for m in 0..2 {
            for k in 0..d {
                permuted.set(&[i, m, k], emb.at(&[p, m, k]));
            }
        }
    }
    assert!((ap_value(&permuted, 10.0, -5.0).unwrap() - base).abs() < 1e-12);
    let q = orthogonal(d, 9);
    let mut rotated = Tensor::zeros([n, 2, d]);
    for i in 0..n {
        for m in 0..2 {
            for a in 0..d {
                rotated.set(&[i, m, a], (0..d).map(|b| q[a][b] * emb.at(&[i, m, b])).sum());
            }
        }
    }
    assert!((ap_value(&rotated, 10.0, -5.0).unwrap() - base).abs() < 1e-9);
}

#[test]
fn ap_loss_rejects_zero_embeddings_and_bad_shapes() {
    let mut emb = Tensor::randn([3, 2, 4], &mut rng(0));
    for k in 0..4 {
        emb.set(&[1, 1, k], 0.0);
    }
    assert!(matches!(ap_value(&emb, 10.0, -5.0), Err(Error::NumericGuard(_))));
    assert!(matches!(ap_value(&Tensor::randn([3, 3, 4], &mut rng(0)), 10.0, -5.0), Err(Error::Dimension(_))));
}

#[test]
fn ap_scale_is_clamped() {
    let mut ap = ApParams::default();
    assert_eq!((ap.w.data()[0], ap.b.data()[0]), (10.0, -5.0));
    ap.w.data_mut()[0] = -3.0;
    ap.clamp();
    assert_eq!(ap.w.data()[0], MIN_AP_SCALE);
    let emb = Tensor::randn([3, 2, 4], &mut rng(1));
    let neg = ap_value(&emb, -3.0, 0.0).unwrap();
    let floor = ap_value(&emb, MIN_AP_SCALE, 0.0).unwrap();
    assert_eq!(neg, floor);
}

#[test]
fn uniform_logits_give_log_classes() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::full([4, 7], 2.5));
    let ce = cross_entropy(&mut tape, logits, &[0, 3, 6, 2]).unwrap();
    assert!((tape.value(ce).data()[0] - 7f64.ln()).abs() < 1e-14);
    assert!(matches!(cross_entropy(&mut tape, logits, &[0, 7, 1, 1]), Err(Error::Data(_))));
}

#[test]
fn combined_loss_is_the_plain_sum() {
    let logits = Tensor::randn([6, 5], &mut rng(2));
    let emb = Tensor::randn([3, 2, 4], &mut rng(3));
    let labels = [0, 0, 4, 4, 2, 2];
    let mut tape = Tape::new();
    let (lv, ev) = (tape.constant(logits.clone()), tape.constant(emb.clone()));
    let (w, b) = (tape.constant(Tensor::scalar(10.0)), tape.constant(Tensor::scalar(-5.0)));
    let all = combined_loss(&mut tape, lv, &labels, ev, w, b).unwrap();
    let ce = cross_entropy(&mut tape, lv, &labels).unwrap();
    let ap = angular_prototypical_loss(&mut tape, ev, w, b).unwrap();
    let sum = tape.value(ce).data()[0] + tape.value(ap).data()[0];
    assert!((tape.value(all.total).data()[0] - sum).abs() < 1e-12);
    assert_eq!(tape.value(all.ce).data(), tape.value(ce).data());
    let bad = tape.constant(Tensor::randn([5, 5], &mut rng(0)));
    assert!(matches!(combined_loss(&mut tape, bad, &labels[..5], ev, w, b), Err(Error::Dimension(_))));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let labels = [1, 1, 0, 0, 3, 3];
    let inputs = [
        Tensor::randn([6, 4], &mut rng(10)),
        Tensor::randn([3, 2, 5], &mut rng(11)),
        Tensor::scalar(7.0),
        Tensor::scalar(-2.0),
    ];
    let ce = grad_check(&inputs[..1], 20, 1, |t, v| cross_entropy(t, v[0], &labels).unwrap());
    assert!(ce < 1e-4, "ce {ce}");
    let ap = grad_check(&inputs[1..], 30, 2, |t, v| angular_prototypical_loss(t, v[0], v[1], v[2]).unwrap());
    assert!(ap < 1e-4, "ap {ap}");
    let all = grad_check(&inputs, 40, 3, |t, v| combined_loss(t, v[0], &labels, v[1], v[2], v[3]).unwrap().total);
    assert!(all < 1e-4, "combined {all}");
    let norm = grad_check(&[Tensor::randn([3, 4], &mut rng(12))], 12, 4, |t, v| l2_normalize_rows(t, v[0]).unwrap());
    assert!(norm < 1e-4, "normalize {norm}");
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = vec![0.5];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[1.0], &mut s, 0.01, 0.0).unwrap();
    assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adam_without_gradient_or_decay_is_still() {
    let mut p = vec![0.5, -2.0, 3.0];
    let mut s = AdamState::new(3);
    for _ in 0..5 {
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, 0.0).unwrap();
    }
    assert_eq!(p, vec![0.5, -2.0, 3.0]);
}

#[test]
fn adam_three_steps_match_scalar_recurrence() {
    let (lr, wd) = (0.05, 0.01);
    let grads = [0.3, -1.2, 0.7];
    let mut p = vec![1.5];
    let mut s = AdamState::new(1);
    let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut p, &[*g], &mut s, lr, wd).unwrap();
        let g = g + wd * theta;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let n = (t + 1) as i32;
        theta -= lr * (m / (1.0 - 0.9f64.powi(n))) / ((v / (1.0 - 0.999f64.powi(n))).sqrt() + 1e-8);
        assert!((p[0] - theta).abs() < 1e-12);
    }
}

#[test]
fn weight_decay_alone_shrinks_parameters() {
    let mut p = vec![2.0, -1.0];
    let mut s = AdamState::new(2);
    let mut prev = p.clone();
    for _ in 0..50 {
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.01, 0.1).unwrap();
        assert!(p[0].abs() < prev[0].abs() && p[1].abs() < prev[1].abs());
        prev = p.clone();
    }
}

#[test]
fn adam_rejects_mismatched_lengths() {
    let mut s = AdamState::new(2);
    assert!(matches!(adam_step(&mut [0.0, 1.0], &[1.0], &mut s, 0.1, 0.0), Err(Error::Dimension(_))));
}

#[test]
fn sampler_batches_have_n_speakers_twice_each() {
    let sampler = BatchSampler::new(vec![3; 10], 4, 2, 5).unwrap();
    let epoch = sampler.epoch(0);
    assert_eq!(epoch.len(), 3);
    for batch in &epoch {
        assert_eq!(batch.items.len(), 8);
        let speakers: Vec<usize> = batch.speakers().collect();
        let mut distinct = speakers.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        for pair in batch.items.chunks(2) {
            assert_eq!(pair[0].speaker, pair[1].speaker);
            assert_ne!(pair[0].utterance, pair[1].utterance);
        }
    }
}

proptest! {
    #[test]
    fn every_speaker_appears_each_epoch(speakers in 2usize..30, n in 2usize..8, seed in 0u64..1000, epoch in 0usize..50) {
        prop_assume!(n <= speakers);
        let sampler = BatchSampler::new(vec![2; speakers], n, 2, seed).unwrap();
        let batches = sampler.epoch(epoch);
        let mut seen = vec![false; speakers];
        for b in &batches {
            for it in &b.items {
                seen[it.speaker] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(sampler.epoch(epoch), batches);
    }
}

#[test]
fn extra_passes_repeat_full_speaker_coverage() {
    let one = BatchSampler::new(vec![4; 10], 4, 2, 3).unwrap();
    let three = one.clone().with_passes(3);
    assert_eq!(three.steps_per_epoch(), 9);
    let batches = three.epoch(2);
    assert_eq!(batches.len(), 9);
    assert_eq!(batches[..3], one.epoch(2)[..]);
    for pass in batches.chunks(3) {
        let mut seen: Vec<usize> = pass.iter().flat_map(|b| b.speakers()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }
    assert_eq!(one.clone().with_passes(0).steps_per_epoch(), 3);
}

#[test]
fn sampler_errors_on_small_datasets() {
    assert!(matches!(BatchSampler::new(vec![2; 3], 4, 2, 0), Err(Error::Data(_))));
    assert!(matches!(BatchSampler::new(vec![2, 1, 2, 2], 4, 2, 0), Err(Error::Data(_))));
    let a = BatchSampler::new(vec![2; 9], 3, 2, 0).unwrap();
    assert_ne!(a.epoch(0), a.epoch(1));
}

fn toy_data(speakers: usize, utts: usize) -> TrainData {
    let mut r = rng(77);
    let waves = (0..speakers)
        .map(|s| {
            (0..utts)
                .map(|_| {
                    let f0 = 120.0 + 40.0 * s as f64;
                    let len = 24_000 + r.random_range(0..8000);
                    Waveform::new(
                        (0..len)
                            .map(|i| {
                                let t = i as f64 / 16_000.0;
                                0.3 * (2.0 * std::f64::consts::PI * f0 * t).sin() + 0.01 * r.random_range(-1.0..1.0)
                            })
                            .collect(),
                    )
                })
                .collect()
        })
        .collect();
    TrainData { speaker_ids: (0..speakers).map(|s| format!("s{s}")).collect(), waves }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { channel_scale: 0.125, k: 2, embedding_dim: 16, ..ModelConfig::default() }
}

#[test]
fn trainer_logs_and_follows_temperature_schedule() {
    let cfg = TrainConfig { epochs: 3, batch_speakers: 2, seed: 3, ..TrainConfig::default() };
    let mut trainer = Trainer::new(build_model(&tiny_model(), 3).unwrap(), cfg, toy_data(3, 3)).unwrap();
    let mut log = Vec::new();
    let probe = tdycnn::audio::MelSpectrogram::new(Tensor::randn([N_MELS, 32], &mut rng(0))).unwrap();
    for e in 0..3 {
        let summary = trainer.run_epoch(e, &mut log).unwrap();
        assert_eq!(summary.steps, 2);
        let tau = temperature_schedule(e as i64).unwrap();
        for map in embed_frames(&trainer.model, &probe).unwrap().attention.values() {
            assert_eq!(map.temperature, tau);
        }
        assert!((summary.loss - summary.ce - summary.ap).abs() < 1e-9);
    }
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for (i, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0].parse::<usize>().unwrap(), i / 2);
        assert_eq!(f[1].parse::<usize>().unwrap(), i + 1);
        assert_eq!(f[2].parse::<f64>().unwrap(), 1e-3);
        assert_eq!(f[3].parse::<f64>().unwrap(), temperature_schedule((i / 2) as i64).unwrap());
    }
    assert!(trainer.ap.w.data()[0] >= MIN_AP_SCALE);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let cfg = TrainConfig { epochs: 2, batch_speakers: 2, seed: 9, ..TrainConfig::default() };
        let mut t = Trainer::new(build_model(&tiny_model(), 9).unwrap(), cfg, toy_data(2, 3)).unwrap();
        let s = t.train(&mut std::io::sink()).unwrap();
        (s.last().unwrap().loss, t.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn static_models_train_too() {
    let cfg = TrainConfig { epochs: 1, batch_speakers: 2, ..TrainConfig::default() };
    let model = build_model(&ModelConfig { conv_mode: ConvMode::Static, ..tiny_model() }, 0).unwrap();
    let before = model.clone();
    let mut t = Trainer::new(model, cfg, toy_data(2, 2)).unwrap();
    t.train(&mut std::io::sink()).unwrap();
    assert_ne!(t.model.stem, before.stem);
    assert_ne!(t.model.stem.bn.running_mean, before.stem.bn.running_mean);
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = toy_data(2, 2);
    let model = build_model(&tiny_model(), 0).unwrap();
    for cfg in [
        TrainConfig { batch_speakers: 1, ..TrainConfig::default() },
        TrainConfig { utterances_per_speaker: 3, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { speaker_passes: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(Trainer::new(model.clone(), cfg, data.clone()), Err(Error::Config(_))));
    }
    let cfg = TrainConfig { batch_speakers: 3, ..TrainConfig::default() };
    assert!(matches!(Trainer::new(model, cfg, data), Err(Error::Data(_))));
}
