use std::fs;

use avw2_core::data_synth::*;
use avw2_core::encoders::{AudioEncoderConfig, FRAME_SHIFT};
use avw2_core::fusion_mask::power;
use avw2_core::Error;
use proptest::prelude::*;

fn spec(seed: u64, snrs: Vec<f64>, delays: Vec<i32>) -> ClipSpec {
    ClipSpec {
        tokens: vec![2, 5, 0, 7],
        channels: snrs.len(),
        duration: 1.2,
        delays,
        snrs,
        seed,
    }
}

fn xcorr_peak(a: &[f32], b: &[f32], max_lag: i32) -> i32 {
    let n = a.len() as i32;
    let mut best = (0, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let mut s = 0.0;
        for i in 0..n {
            let j = i - lag;
            if (0..n).contains(&j) {
                s += f64::from(b[i as usize]) * f64::from(a[j as usize]);
            }
        }
        if s > best.1 {
            best = (lag, s);
        }
    }
    best.0
}

#[test]
fn same_seed_same_clip() {
    let s = spec(5, vec![10.0, 3.0, 15.0], vec![0, 4, -9]);
    assert_eq!(gen_clip(&s).unwrap(), gen_clip(&s).unwrap());
    let other = ClipSpec { seed: 6, ..s.clone() };
    assert_ne!(gen_clip(&s).unwrap().channels[1], gen_clip(&other).unwrap().channels[1]);
}

#[test]
fn corpus_is_independent_of_thread_count() {
    let cfg = CorpusConfig {
        clips: 7,
        duration: 0.5,
        seed: 11,
        ..CorpusConfig::default()
    };
    assert_eq!(gen_corpus(&cfg, 1).unwrap(), gen_corpus(&cfg, 3).unwrap());
}

#[test]
fn cross_correlation_peaks_at_applied_delay() {
    let delays = vec![0, 5, -12, 31, -64, 64];
    let clip = gen_clip(&spec(3, vec![f64::INFINITY; 6], delays.clone())).unwrap();
    for (c, &d) in delays.iter().enumerate() {
        assert_eq!(xcorr_peak(&clip.channels[0], &clip.channels[c], 80), d, "channel {c}");
    }
    assert_eq!(clip.meta.delays, delays);
}

#[test]
fn measured_snr_matches_spec() {
    let snrs = vec![0.0, 5.0, 10.0, 20.0];
    let delays = vec![0, 3, -7, 12];
    let s = spec(21, snrs.clone(), delays.clone());
    let clip = gen_clip(&s).unwrap();
    let content = content_signal(&s.tokens, s.samples());
    for c in 0..4 {
        let clean = shift(&content, delays[c]);
        let noise: Vec<f32> = clip.channels[c].iter().zip(&clean).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (power(&clean) / power(&noise)).log10();
        assert!((measured - snrs[c]).abs() < 0.5, "channel {c}: {measured}");
        assert_eq!(clip.meta.snrs[c], Some(snrs[c]));
    }
}

#[test]
fn tokens_are_recoverable_by_matched_filtering() {
    let tokens = vec![3, 1, 6, 4, 0, 2, 7, 5];
    let samples = 48_000;
    let content = content_signal(&tokens, samples);
    let frames = samples / FRAME_SHIFT;
    let slices = token_slices(tokens.len(), frames);
    for (j, &(a, b)) in slices.iter().enumerate() {
        let (lo, hi) = (a * FRAME_SHIFT, if j + 1 == tokens.len() { samples } else { b * FRAME_SHIFT });
        let seg = &content[lo..hi];
        let best = (0..VOCAB_SIZE)
            .map(|k| {
                let tpl = content_signal(&[k], seg.len());
                let dot: f64 = seg.iter().zip(&tpl).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                dot / (power(&tpl) * tpl.len() as f64).sqrt()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, s)| if s > acc.1 { (k, s) } else { acc });
        assert_eq!(best.0, tokens[j]);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let good = spec(1, vec![10.0, 10.0], vec![0, 3]);
    assert!(gen_clip(&ClipSpec { delays: vec![0, 65], ..good.clone() }).is_err());
    assert!(gen_clip(&ClipSpec { tokens: vec![8], ..good.clone() }).is_err());
    assert!(gen_clip(&ClipSpec { duration: 0.01, ..good.clone() }).is_err());
    assert!(gen_clip(&ClipSpec { snrs: vec![10.0], ..good.clone() }).is_err());
    assert!(gen_clip(&ClipSpec { tokens: vec![], ..good }).is_err());
}

fn corpus(clips: usize) -> Vec<MultichannelClip> {
    let cfg = CorpusConfig {
        clips,
        duration: 0.5,
        seed: 4,
        ..CorpusConfig::default()
    };
    gen_corpus(&cfg, 1).unwrap()
}

#[test]
fn roundtrip_of_ten_clips_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut clips = corpus(10);
    clips[3].video = None;
    let manifest = write_corpus(&clips, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 10);
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.len(), clips.len());
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.video, b.video);
        for (x, y) in a.channels.iter().zip(&b.channels) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
    assert!(dir.path().join("audio/clip0000.ch5.f32").exists());
    assert!(dir.path().join("video/clip0000.f32").exists());
    assert_eq!(fs::read_to_string(dir.path().join("text/clip0000.txt")).unwrap(), transcript_text(&clips[0].transcript));
}

#[test]
fn truncated_audio_names_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus(3), dir.path()).unwrap();
    let path = dir.path().join("audio/clip0001.ch2.f32");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
    match read_corpus(dir.path()) {
        Err(Error::Data { clip, .. }) => assert_eq!(clip, "clip0001"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn missing_file_names_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus(2), dir.path()).unwrap();
    fs::remove_file(dir.path().join("text/clip0000.txt")).unwrap();
    match read_corpus(dir.path()) {
        Err(Error::Data { clip, .. }) => assert_eq!(clip, "clip0000"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&corpus(2), dir.path()).unwrap();
    let line = serde_json::to_string(&manifest.records[0]).unwrap();
    assert!(CorpusManifest::parse(&format!("{line}\n{line}\n")).is_err());
    let mut clips = corpus(2);
    clips[1].id = clips[0].id.clone();
    assert!(write_corpus(&clips, dir.path()).is_err());
    assert!(CorpusManifest::parse("{not json}\n").is_err());
}

#[test]
fn corpus_clips_avoid_adjacent_repeats() {
    for clip in corpus(20) {
        assert!(clip.transcript.windows(2).all(|w| w[0] != w[1]));
        assert!((3..=6).contains(&clip.transcript.len()));
        assert_eq!(clip.meta.delays[0], 0);
    }
}

proptest! {
    #[test]
    fn audio_and_video_frames_align(
        tokens in prop::collection::vec(0usize..VOCAB_SIZE, 1..6),
        duration in 0.3f64..2.5,
        seed in any::<u64>(),
    ) {
        let s = ClipSpec {
            tokens,
            channels: 2,
            duration,
            delays: vec![0, 3],
            snrs: vec![10.0, f64::INFINITY],
            seed,
        };
        let clip = gen_clip(&s).unwrap();
        let frames = AudioEncoderConfig::default().num_frames(clip.samples()).unwrap();
        prop_assert_eq!(clip.video.as_ref().unwrap().shape()[0], frames);
        prop_assert_eq!(clip.frames(), frames);
        prop_assert!(clip.channels.iter().all(|c| c.len() == clip.samples()));
    }
}
