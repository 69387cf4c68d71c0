use std::fs;

use avw2_core::context_encoder::TransformerConfig;
use avw2_core::data_synth::*;
use avw2_core::encoders::{AudioEncoderConfig, VisualEncoderConfig};
use avw2_core::fusion_mask::DropoutConfig;
use avw2_core::model::*;
use avw2_core::objectives::{sample_negatives, BatchKind};
use avw2_core::autodiff::Tensor;
use avw2_core::trainer::checkpoint::*;
use avw2_core::trainer::metrics::*;
use avw2_core::trainer::*;
use avw2_core::Error;

fn tiny_model(channels: usize) -> Model {
    Model::new(ModelConfig {
        audio: AudioEncoderConfig::with_width(8),
        visual: VisualEncoderConfig {
            stem_channels: [4, 4],
            dim: 8,
            ..VisualEncoderConfig::default()
        },
        transformer: TransformerConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ff_dim: 32,
            dropout: 0.0,
        },
        channels,
        vocab: VOCAB_SIZE,
    })
    .unwrap()
}

fn corpus(clips: usize, channels: usize, seed: u64, prefix: &str) -> Vec<MultichannelClip> {
    gen_corpus(
        &CorpusConfig {
            clips,
            channels,
            duration: 0.5,
            seed,
            prefix: prefix.into(),
            ..CorpusConfig::default()
        },
        1,
    )
    .unwrap()
}

fn audio_only(clips: usize, channels: usize) -> Vec<MultichannelClip> {
    let mut c = corpus(clips, channels, 77, "ao");
    for clip in &mut c {
        clip.video = None;
    }
    c
}

fn cfg(steps: u64) -> PretrainConfig {
    PretrainConfig {
        steps,
        batch_size: 2,
        lr: 1e-3,
        ..PretrainConfig::default()
    }
}

fn train(model: &Model, cfg: &PretrainConfig, av: &[MultichannelClip], ao: &[MultichannelClip]) -> (TrainState, Vec<StepRecord>) {
    let mut state = TrainState::new(model.init_params(1), cfg.adam, serde_json::json!({"steps": cfg.steps}));
    let trainer = Pretrainer::new(model, cfg, av, ao).unwrap();
    let mut recs = Vec::new();
    trainer
        .run(&mut state, cfg.steps, |r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
    (state, recs)
}

#[test]
fn identical_runs_are_bit_identical() {
    let m = tiny_model(2);
    let av = corpus(4, 2, 1, "clip");
    let ao = audio_only(3, 2);
    let c = PretrainConfig { mix_ratio: Some(0.5), ..cfg(6) };
    let (s1, r1) = train(&m, &c, &av, &ao);
    let (s2, r2) = train(&m, &c, &av, &ao);
    let bits = |r: &[StepRecord]| r.iter().map(|x| x.losses.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1), bits(&r2));
    assert_eq!(encode(&s1).unwrap(), encode(&s2).unwrap());
    let other = PretrainConfig { seed: 9, ..c };
    let (_, r3) = train(&m, &other, &av, &ao);
    assert_ne!(bits(&r1), bits(&r3));
}

#[test]
fn zero_mix_ratio_never_uses_the_single_channel_loss() {
    let m = tiny_model(2);
    let av = corpus(3, 2, 2, "clip");
    let ao = audio_only(3, 2);
    let c = PretrainConfig { mix_ratio: Some(0.0), ..cfg(5) };
    let (_, recs) = train(&m, &c, &av, &ao);
    for r in recs {
        assert_eq!(r.kind, BatchKind::AudioVisual);
        assert_eq!(r.losses.l_sa, 0.0);
    }
    let all_ao = PretrainConfig { mix_ratio: Some(1.0), ..cfg(3) };
    let (_, recs) = train(&m, &all_ao, &av, &ao);
    for r in recs {
        assert_eq!(r.kind, BatchKind::AudioOnly);
        assert_eq!((r.losses.l_c1, r.losses.l_c2), (0.0, 0.0));
        assert!(r.losses.l_sa > 0.0);
    }
}

#[test]
fn recorded_total_is_the_weighted_sum() {
    let m = tiny_model(2);
    let av = corpus(3, 2, 3, "clip");
    let ao = audio_only(3, 2);
    let mut c = PretrainConfig { mix_ratio: Some(0.5), ..cfg(8) };
    c.loss.single_weight = 0.7;
    let (_, recs) = train(&m, &c, &av, &ao);
    let kinds: Vec<_> = recs.iter().map(|r| r.kind).collect();
    assert!(kinds.contains(&BatchKind::AudioOnly) && kinds.contains(&BatchKind::AudioVisual));
    for r in &recs {
        let l = &r.losses;
        assert!((l.total - (l.l_c1 + l.l_c2 + 0.7 * l.l_sa)).abs() < 1e-6);
        assert!(l.masked > 0);
    }
}

#[test]
fn warmup_schedule_is_reported() {
    let m = tiny_model(1);
    let av = corpus(2, 1, 4, "clip");
    let c = PretrainConfig { warmup: 0.5, ..cfg(4) };
    let (_, recs) = train(&m, &c, &av, &[]);
    let lrs: Vec<f64> = recs.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![5e-4, 1e-3, 1e-3, 1e-3]);
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let m = tiny_model(2);
    let av = corpus(2, 2, 5, "clip");
    let (state, _) = train(&m, &cfg(2), &av, &[]);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&state, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(back.step, 2);
    assert_eq!(back.config, state.config);
    m.check_params(&back.params).unwrap();
}

#[test]
fn corrupted_checkpoint_reports_an_offset() {
    let m = tiny_model(1);
    let av = corpus(2, 1, 6, "clip");
    let (state, _) = train(&m, &cfg(1), &av, &[]);
    let bytes = encode(&state).unwrap();
    let mut bad = bytes.clone();
    let at = bytes.len() / 2;
    bad[at] ^= 0x40;
    match decode(&bad) {
        Err(Error::Checkpoint { offset, .. }) => assert!(offset <= at),
        other => panic!("expected a checkpoint error, got {:?}", other.map(|s| s.step)),
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(decode(&wrong_version), Err(Error::Checkpoint { offset: 4, .. })));
    assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint { .. })));
    assert!(matches!(decode(b"NOPE"), Err(Error::Checkpoint { offset: 0, .. })));
    let other = tiny_model(3);
    assert!(other.check_params(&decode(&bytes).unwrap().params).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let m = tiny_model(2);
    let av = corpus(4, 2, 7, "clip");
    let ao = audio_only(2, 2);
    let c = PretrainConfig { mix_ratio: Some(0.3), ..cfg(50) };
    let (full, full_recs) = train(&m, &c, &av, &ao);

    let trainer = Pretrainer::new(&m, &c, &av, &ao).unwrap();
    let mut state = TrainState::new(m.init_params(1), c.adam, serde_json::json!({"steps": c.steps}));
    let mut recs = Vec::new();
    trainer
        .run(&mut state, 20, |r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&state, &path).unwrap();
    drop(state);
    let mut state = load_checkpoint(&path).unwrap();
    trainer
        .run(&mut state, 50, |r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(recs.len(), full_recs.len());
    for (a, b) in recs.iter().zip(&full_recs) {
        assert_eq!(a.losses.total.to_bits(), b.losses.total.to_bits(), "step {}", a.step);
        assert_eq!(a.batch, b.batch);
    }
    assert_eq!(encode(&state).unwrap(), encode(&full).unwrap());
}

#[test]
fn channel_counts_one_two_six() {
    for c in [1, 2, 6] {
        let m = tiny_model(c);
        assert_eq!(m.fused_width(), 8 * (c + 1));
        let av = corpus(2, c, 8, "clip");
        let (_, recs) = train(&m, &cfg(2), &av, &[]);
        assert!(recs.iter().all(|r| r.losses.total.is_finite()));
        assert_eq!(recs[0].losses.per_channel.len(), c);
    }
    let m = tiny_model(2);
    let wrong = corpus(2, 3, 8, "clip");
    assert!(matches!(Pretrainer::new(&m, &cfg(2), &wrong, &[]), Err(Error::Data { .. })));
}

#[test]
fn invalid_configurations() {
    let m = tiny_model(1);
    let av = corpus(2, 1, 9, "clip");
    assert!(Pretrainer::new(&m, &cfg(2), &[], &[]).is_err());
    let c = PretrainConfig { mix_ratio: Some(0.5), ..cfg(2) };
    assert!(Pretrainer::new(&m, &c, &av, &[]).is_err());
    let c = PretrainConfig { batch_size: 0, ..cfg(2) };
    assert!(Pretrainer::new(&m, &c, &av, &[]).is_err());
}

#[test]
fn nan_parameters_abort_with_the_step_and_batch() {
    let m = tiny_model(1);
    let av = corpus(3, 1, 10, "clip");
    let c = cfg(3);
    let mut params = m.init_params(1);
    let name = params.names().find(|n| n.starts_with("context")).unwrap().clone();
    params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let mut state = TrainState::new(params, c.adam, serde_json::Value::Null);
    let trainer = Pretrainer::new(&m, &c, &av, &[]).unwrap();
    match trainer.step(&mut state) {
        Err(Error::NanLoss { step, batch }) => {
            assert_eq!(step, 1);
            assert_eq!(batch.len(), 2);
        }
        other => panic!("expected a NaN loss error, got {:?}", other.map(|r| r.step)),
    }
}

#[test]
fn perfect_predictions_rank_first() {
    let mut r = avw2_core::rng::seeded(3);
    let t = 30;
    let z = Tensor::new(
        vec![t, 12],
        (0..t * 12).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect(),
    )
    .unwrap();
    let masked: Vec<usize> = (0..t).step_by(2).collect();
    let negs = sample_negatives(&masked, 10, 5).unwrap();
    assert_eq!(rank_hits(&z, &z, &negs).unwrap(), (masked.len(), masked.len()));
}

#[test]
fn untrained_probe_is_near_chance() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let clips = corpus(6, 6, 11, "clip");
    let acc = masked_rank_accuracy(&m, &m.init_params(2), &clips, &ProbeConfig::default()).unwrap();
    assert!((acc - 1.0 / 11.0).abs() < 0.1, "{acc}");
}

#[test]
fn feature_export_is_deterministic_and_reflects_training() {
    let m = tiny_model(2);
    let av = corpus(3, 2, 12, "clip");
    let (trained, _) = train(&m, &cfg(5), &av, &[]);
    let untrained = m.init_params(1);
    let dir = tempfile::tempdir().unwrap();
    let (a, b, u) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("u"));
    let ra = extract_features(&m, &trained.params, &av, &a).unwrap();
    let rb = extract_features(&m, &trained.params, &av, &b).unwrap();
    let ru = extract_features(&m, &untrained, &av, &u).unwrap();
    assert_eq!(ra, rb);
    for ((rec, clip), un) in ra.iter().zip(&av).zip(&ru) {
        assert_eq!(rec.frames, clip.frames());
        assert_eq!(rec.dim, 16);
        let bytes = fs::read(a.join(&rec.path)).unwrap();
        assert_eq!(bytes.len(), rec.frames * rec.dim * 4);
        assert_eq!(sha256_hex(&bytes), rec.sha256);
        assert_ne!(rec.sha256, un.sha256);
    }
    assert!(a.join(FEATURE_MANIFEST).exists());
}

fn checksum(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn freezing_everything_trains_only_the_ctc_head() {
    let m = tiny_model(2);
    let clips = corpus(4, 2, 13, "clip");
    let p = m.init_params(3);
    let cfg = FinetuneConfig {
        steps: 5,
        batch_size: 2,
        freeze: Freeze::All,
        eval_every: 5,
        ..FinetuneConfig::default()
    };
    let out = finetune_ctc(&m, &p, &clips, &cfg, |_| Ok(())).unwrap();
    for name in p.names() {
        let same = checksum(p.get(name).unwrap()) == checksum(out.params.get(name).unwrap());
        assert_eq!(same, !name.starts_with(CTC_HEAD), "{name}");
    }
    assert_eq!(out.history.len(), 5);
    assert!(out.history[4].cer.is_some());

    let enc = FinetuneConfig { freeze: Freeze::Encoders, ..cfg };
    let out = finetune_ctc(&m, &p, &clips, &enc, |_| Ok(())).unwrap();
    for name in p.names() {
        let same = checksum(p.get(name).unwrap()) == checksum(out.params.get(name).unwrap());
        if name.starts_with("audio_encoder") || name.starts_with("visual_encoder") {
            assert!(same, "{name}");
        }
    }
    assert!(checksum(p.get(&format!("{CTC_HEAD}.weight")).unwrap()) != checksum(out.params.get(&format!("{CTC_HEAD}.weight")).unwrap()));
}

#[test]
fn finetune_rejects_out_of_vocabulary_tokens() {
    let m = tiny_model(2);
    let mut clips = corpus(2, 2, 14, "clip");
    clips[1].transcript.push(VOCAB_SIZE + 1);
    let cfg = FinetuneConfig {
        steps: 1,
        ..FinetuneConfig::default()
    };
    match finetune_ctc(&m, &m.init_params(1), &clips, &cfg, |_| Ok(())) {
        Err(Error::Data { clip, .. }) => assert_eq!(clip, clips[1].id),
        other => panic!("expected a data error, got {:?}", other.map(|o| o.history.len())),
    }
}

#[test]
fn cer_conditions_and_summary_csv() {
    let m = tiny_model(2);
    let clips = corpus(3, 2, 15, "clip");
    let p = m.init_params(4);
    let multi = evaluate_cer(&m, &p, &clips, InputCondition::Multichannel).unwrap();
    let ao = evaluate_cer(&m, &p, &clips, InputCondition::AudioOnly).unwrap();
    assert_eq!(multi.reference_tokens, clips.iter().map(|c| c.transcript.len()).sum::<usize>());
    assert!(multi.cer >= 0.0 && ao.cer >= 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    let rows: Vec<SummaryRow> = [("multichannel", &multi), ("audio-only", &ao)]
        .iter()
        .map(|(name, r)| SummaryRow {
            condition: name.to_string(),
            clips: r.clips,
            reference_tokens: r.reference_tokens,
            edits: r.edits,
            cer: r.cer,
        })
        .collect();
    write_summary_csv(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "condition,clips,reference_tokens,edits,cer");
    assert!(lines.next().unwrap().starts_with("multichannel,3,"));
}

#[test]
fn metrics_stream_is_reproducible_without_timing() {
    let m = tiny_model(1);
    let av = corpus(2, 1, 16, "clip");
    let c = cfg(4);
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let path = dir.path().join(name);
        let mut w = MetricsWriter::create(&path, false).unwrap();
        let trainer = Pretrainer::new(&m, &c, &av, &[]).unwrap();
        let mut state = TrainState::new(m.init_params(1), c.adam, serde_json::Value::Null);
        trainer.run(&mut state, c.steps, |r| w.record(r)).unwrap();
        w.finish().unwrap();
        path
    };
    let (a, b) = (write("a.jsonl"), write("b.jsonl"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let lines = read_metrics(&a).unwrap();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(lines.iter().all(|l| l.wall_ms == 0 && l.total.is_finite()));
}

#[test]
fn dropout_and_noise_change_the_loss_but_stay_deterministic() {
    let m = tiny_model(2);
    let av = corpus(2, 2, 17, "clip");
    let clean = PretrainConfig {
        noise_db: None,
        dropout: DropoutConfig::NONE,
        ..cfg(2)
    };
    let (_, a) = train(&m, &clean, &av, &[]);
    let (_, b) = train(&m, &cfg(2), &av, &[]);
    let (_, b2) = train(&m, &cfg(2), &av, &[]);
    assert_ne!(a[0].losses.total, b[0].losses.total);
    assert_eq!(b[0].losses.total, b2[0].losses.total);
}
