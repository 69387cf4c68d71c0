use avw2_core::autodiff::gradcheck::check_gradients;
use avw2_core::autodiff::{Graph, Tensor};
use avw2_core::encoders::{FeatureSequence, StreamTag};
use avw2_core::fusion_mask::*;
use avw2_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn rand_mat(r: &mut rng::Rng, t: usize, d: usize) -> Tensor<f32> {
    Tensor::new(vec![t, d], (0..t * d).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn streams(seed: u64, t: usize, c: usize) -> (FeatureSequence, Vec<FeatureSequence>) {
    let mut r = rng::seeded(seed);
    let v = FeatureSequence::new(StreamTag::Visual, rand_mat(&mut r, t, 64)).unwrap();
    let a = (0..c)
        .map(|i| FeatureSequence::new(StreamTag::AudioChannel(i), rand_mat(&mut r, t, 64)).unwrap())
        .collect();
    (v, a)
}

#[test]
fn fused_width_and_block_layout() {
    let (v, a) = streams(1, 5, 6);
    let f = fuse_features(&v, &a, &DropoutDecision::keep_all(6)).unwrap();
    assert_eq!(f.dim(), 448);
    for t in 0..5 {
        let row = f.features.row(t);
        assert_eq!(&row[..64], v.features.row(t));
        for (i, ch) in a.iter().enumerate() {
            assert_eq!(&row[64 * (i + 1)..64 * (i + 2)], ch.features.row(t));
        }
    }
}

#[test]
fn dropped_streams_are_exact_zero_blocks() {
    let (v, a) = streams(2, 4, 6);
    let mut d = DropoutDecision::keep_all(6);
    d.video = true;
    d.channels[3] = true;
    let f = fuse_features(&v, &a, &d).unwrap();
    for t in 0..4 {
        let row = f.features.row(t);
        assert!(row[..64].iter().all(|&x| x == 0.0));
        assert!(row[64 * 4..64 * 5].iter().all(|&x| x == 0.0));
        assert_eq!(&row[64..128], a[0].features.row(t));
    }
}

#[test]
fn fuse_rejects_length_mismatch() {
    let (v, mut a) = streams(3, 4, 2);
    let mut r = rng::seeded(0);
    a[1] = FeatureSequence::new(StreamTag::AudioChannel(1), rand_mat(&mut r, 5, 64)).unwrap();
    assert!(fuse_features(&v, &a, &DropoutDecision::keep_all(2)).is_err());
}

#[test]
fn dropped_stream_gets_no_gradient() {
    let mut r = rng::seeded(4);
    let mut g = Graph::<f64>::new();
    let v = g.input(rand_mat(&mut r, 3, 4).cast(), true);
    let cs: Vec<_> = (0..2).map(|_| g.input(rand_mat(&mut r, 3, 4).cast(), true)).collect();
    let d = DropoutDecision {
        video: false,
        channels: vec![true, false],
        seed: 0,
    };
    let f = fuse(&mut g, v, &cs, &d).unwrap();
    let s = g.sum(f).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(cs[0]).data().iter().all(|&x| x == 0.0));
    assert!(grads.get(cs[1]).data().iter().all(|&x| x == 1.0));
}

#[test]
fn span_expansion_example() {
    let m = MaskSpec::from_starts(10, 3, &[2, 7]);
    assert_eq!(m.indices, vec![2, 3, 4, 7, 8, 9]);
}

#[test]
fn zero_probability_without_forcing_is_empty() {
    assert!(sample_mask_with(20, 3, 0.0, 5, false, 1).is_empty());
    assert!(sample_mask(20, 3, 0.0, 5).is_empty());
    assert!(!sample_mask(20, 3, 0.01, 5).is_empty());
}

#[test]
fn masked_fraction_matches_span_formula() {
    let (t, m, p) = (100, 3, 0.2);
    let mut masked = 0usize;
    let draws = 10_000;
    for seed in 0..draws {
        masked += sample_mask_with(t, m, p, seed, false, 0).len();
    }
    let frac = masked as f64 / (draws as usize * t) as f64;
    // Interior frames are masked unless none of the M starts covering them fired.
    let expected = 1.0 - (1.0f64 - p).powi(m as i32);
    assert!((frac - expected).abs() < 0.02, "{frac} vs {expected}");
}

#[test]
fn apply_mask_examples() {
    let mut r = rng::seeded(5);
    let x = rand_mat(&mut r, 6, 4);
    let emb = Tensor::new(vec![4], vec![0.5f32, -1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let (xv, ev) = (g.constant(x.clone()), g.constant(emb.clone()));
    let none = apply_mask(&mut g, xv, &MaskSpec::from_starts(6, 1, &[]), ev).unwrap();
    assert_eq!(g.value(none), &x);
    let all = apply_mask(&mut g, xv, &MaskSpec::from_starts(6, 6, &[0]), ev).unwrap();
    for t in 0..6 {
        assert_eq!(g.value(all).row(t), emb.data());
    }
    let bad = g.constant(Tensor::new(vec![3], vec![0.0f32; 3]).unwrap());
    assert!(apply_mask(&mut g, xv, &MaskSpec::from_starts(6, 1, &[1]), bad).is_err());
}

#[test]
fn mask_embedding_gradient_flows_through_masked_rows_only() {
    let mut r = rng::seeded(6);
    let x: Tensor<f64> = rand_mat(&mut r, 5, 3).cast();
    let emb: Tensor<f64> = rand_mat(&mut r, 1, 3).cast().reshaped(&[3]).unwrap();
    let spec = MaskSpec::from_starts(5, 2, &[1]);
    let weights: Tensor<f64> = rand_mat(&mut r, 5, 3).cast();
    let rep = check_gradients(&[x.clone(), emb.clone()], 1e-6, |g, v| {
        let y = apply_mask(g, v[0], &spec, v[1])?;
        let w = g.constant(weights.clone());
        let p = g.mul(y, w)?;
        g.sum(p)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4);

    let mut g = Graph::new();
    let (xv, ev) = (g.input(x, true), g.input(emb, true));
    let y = apply_mask(&mut g, xv, &spec, ev).unwrap();
    let w = g.constant(weights.clone());
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = (0..3).map(|j| weights.row(1)[j] + weights.row(2)[j]).collect();
    for (a, b) in grads.get(ev).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let gx = grads.get(xv);
    assert!(gx.row(1).iter().chain(gx.row(2)).all(|&v| v == 0.0));
    assert_eq!(gx.row(0), weights.row(0));
}

#[test]
fn dropout_examples() {
    let none = draw_dropout(&DropoutConfig::NONE, 6, 1).unwrap();
    assert!(!none.video && none.channels.iter().all(|d| !d));
    for seed in 0..50 {
        let d = draw_dropout(&DropoutConfig { video: 1.0, channel: 0.0 }, 6, seed).unwrap();
        assert!(d.video && d.channels.iter().all(|d| !d));
    }
    let all = draw_dropout(&DropoutConfig { video: 1.0, channel: 1.0 }, 3, 2).unwrap();
    assert!(all.any_survivor());
    assert!(draw_dropout(&DropoutConfig { video: 1.5, channel: 0.0 }, 3, 2).is_err());
    assert_eq!(draw_dropout(&DropoutConfig::default(), 6, 9).unwrap(), draw_dropout(&DropoutConfig::default(), 6, 9).unwrap());
}

#[test]
fn empirical_drop_rates_match_configuration() {
    let cfg = DropoutConfig { video: 0.3, channel: 0.15 };
    let draws = 10_000;
    let (mut video, mut chans) = (0usize, 0usize);
    for seed in 0..draws {
        let d = draw_dropout(&cfg, 6, seed).unwrap();
        video += usize::from(d.video);
        chans += d.channels.iter().filter(|&&x| x).count();
    }
    let v = video as f64 / draws as f64;
    let c = chans as f64 / (6 * draws) as f64;
    assert!((v - 0.3).abs() < 0.02, "{v}");
    assert!((c - 0.15).abs() < 0.02, "{c}");
}

fn content(n: usize) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect()
}

#[test]
fn noise_hits_requested_snr() {
    let x = content(16_000);
    for (seed, snr) in [(1u64, 10.0), (2, 0.0), (3, 20.0), (4, 5.0)] {
        let y = add_noise(&x, snr, seed).unwrap();
        let noise: Vec<f32> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (power(&x) / power(&noise)).log10();
        assert!((measured - snr).abs() < 0.5, "{snr}: {measured}");
    }
    assert_eq!(add_noise(&x, f64::INFINITY, 1).unwrap(), x);
    assert_eq!(add_noise(&x, 7.0, 11).unwrap(), add_noise(&x, 7.0, 11).unwrap());
    assert!(add_noise(&vec![0.0; 100], 10.0, 1).is_err());
}

proptest! {
    #[test]
    fn fuse_is_lossless_without_drops(seed in 0u64..1000, t in 1usize..6, c in 1usize..7) {
        let (v, a) = streams(seed, t, c);
        let f = fuse_features(&v, &a, &DropoutDecision::keep_all(c)).unwrap();
        for row in 0..t {
            let r = f.features.row(row);
            prop_assert_eq!(&r[..64], v.features.row(row));
            for (i, ch) in a.iter().enumerate() {
                prop_assert_eq!(&r[64 * (i + 1)..64 * (i + 2)], ch.features.row(row));
            }
        }
    }

    #[test]
    fn masks_are_reproducible_and_in_range(t in 1usize..200, m in 1usize..6, p in 0.0f64..1.0, seed in any::<u64>()) {
        let a = sample_mask(t, m, p, seed);
        prop_assert_eq!(&a, &sample_mask(t, m, p, seed));
        prop_assert!(a.indices.iter().all(|&i| i < t));
        prop_assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        if p > 0.0 {
            prop_assert!(!a.is_empty());
        }
    }

    #[test]
    fn some_stream_always_survives(v in 0.0f64..=1.0, c in 0.0f64..=1.0, n in 1usize..8, seed in any::<u64>()) {
        let d = draw_dropout(&DropoutConfig { video: v, channel: c }, n, seed).unwrap();
        prop_assert!(d.any_survivor());
    }
}
