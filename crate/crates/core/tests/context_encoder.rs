use avw2_core::autodiff::gradcheck::check_gradients;
use avw2_core::autodiff::{Graph, ParamBuilder, ParamStore, Tensor};
use avw2_core::context_encoder::*;
use avw2_core::rng;
use avw2_core::Error;
use rand::Rng;

fn small() -> ContextEncoder {
    let cfg = TransformerConfig {
        layers: 2,
        dim: 16,
        heads: 4,
        ff_dim: 32,
        dropout: 0.0,
    };
    ContextEncoder::new(cfg, 24, 8).unwrap()
}

fn params(enc: &ContextEncoder, seed: u64) -> ParamStore<f64> {
    let mut b = ParamBuilder::new();
    enc.declare(&mut b);
    b.build(seed)
}

fn rand_mat(r: &mut rng::Rng, t: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![t, d], (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    let enc = ContextEncoder::new(TransformerConfig::default(), 448, 64).unwrap();
    let mut b = ParamBuilder::new();
    enc.declare(&mut b);
    let p = b.build::<f32>(3);
    let mut r = rng::seeded(1);
    let x: Tensor<f32> = rand_mat(&mut r, 12, 64).cast();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut attn = Vec::new();
    let out = enc.forward(&mut g, &p, xv, Some(&mut attn), None).unwrap();
    assert_eq!(g.shape(out), &[12, 64]);
    assert_eq!(attn.len(), 4 * 4);
    for a in attn {
        let m = g.value(a);
        for t in 0..12 {
            let s: f32 = m.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(m.row(t).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn single_frame_is_finite_and_deterministic() {
    let enc = small();
    let p = params(&enc, 2);
    let mut r = rng::seeded(2);
    let x = rand_mat(&mut r, 1, 16);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, &p, xv, None, None).unwrap();
        g.value(out).clone()
    };
    let a = run(&x);
    assert!(a.all_finite());
    assert_eq!(a, run(&x));
}

#[test]
fn full_stack_gradient_at_four_frames() {
    let enc = small();
    let p = params(&enc, 4);
    let mut r = rng::seeded(4);
    for _ in 0..3 {
        let x = rand_mat(&mut r, 4, 16);
        let w = rand_mat(&mut r, 4, 16);
        let rep = check_gradients(&[x], 1e-6, |g, v| {
            let out = enc.forward(g, &p, v[0], None, None)?;
            let wv = g.constant(w.clone());
            let y = g.mul(out, wv)?;
            g.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    }
}

#[test]
fn projection_gradient() {
    let enc = small();
    let p = params(&enc, 5);
    let mut r = rng::seeded(5);
    for width in [24, 8] {
        let x = rand_mat(&mut r, 3, width);
        let w = rand_mat(&mut r, 3, 16);
        let rep = check_gradients(&[x], 1e-6, |g, v| {
            let h = enc.project(g, &p, v[0])?;
            let wv = g.constant(w.clone());
            let y = g.mul(h, wv)?;
            g.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4);
    }
}

fn project(enc: &ContextEncoder, p: &ParamStore<f64>, x: Tensor<f64>) -> avw2_core::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let h = enc.project(&mut g, p, xv)?;
    Ok(g.value(h).clone())
}

#[test]
fn zero_input_projects_to_bias_plus_positions() {
    let enc = small();
    let p = params(&enc, 6);
    let mut p2 = p.clone();
    let bias = Tensor::new(vec![16], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
    *p2.get_mut("context.proj_fused.bias").unwrap() = bias.clone();
    let out = project(&enc, &p2, Tensor::zeros(&[5, 24])).unwrap();
    let pe = position_encoding::<f64>(5, 16);
    for t in 0..5 {
        for j in 0..16 {
            assert!((out.row(t)[j] - (bias.data()[j] + pe.row(t)[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_is_linear_before_positions() {
    let enc = small();
    let p = params(&enc, 7);
    let mut r = rng::seeded(7);
    let x = rand_mat(&mut r, 4, 24);
    let base = project(&enc, &p, Tensor::zeros(&[4, 24])).unwrap();
    let once = project(&enc, &p, x.clone()).unwrap();
    let doubled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let twice = project(&enc, &p, doubled).unwrap();
    for i in 0..once.len() {
        let lin1 = once.data()[i] - base.data()[i];
        let lin2 = twice.data()[i] - base.data()[i];
        assert!((lin2 - 2.0 * lin1).abs() < 1e-12);
    }
}

#[test]
fn unknown_width_is_rejected() {
    let enc = small();
    let p = params(&enc, 8);
    assert!(project(&enc, &p, Tensor::zeros(&[3, 13])).is_err());
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[3, 15]));
    assert!(enc.forward(&mut g, &p, x, None, None).is_err());
}

#[test]
fn nan_is_reported_with_the_layer() {
    let enc = small();
    let mut p = params(&enc, 9);
    p.get_mut("context.layer1.ff.up.bias").unwrap().data_mut()[0] = f64::NAN;
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[3, 16]));
    match enc.forward(&mut g, &p, x, None, None) {
        Err(Error::NonFinite { op }) => assert!(op.contains("layer1"), "{op}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn dropout_only_with_rng() {
    let cfg = TransformerConfig {
        dropout: 0.5,
        ..small().config
    };
    let enc = ContextEncoder::new(cfg, 24, 8).unwrap();
    let p = params(&enc, 10);
    let mut r = rng::seeded(10);
    let x = rand_mat(&mut r, 4, 16);
    let run = |rng: Option<&mut rng::Rng>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = enc.forward(&mut g, &p, xv, None, rng).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(None), run(None));
    let mut d = rng::seeded(1);
    assert_ne!(run(Some(&mut d)), run(None));
}
