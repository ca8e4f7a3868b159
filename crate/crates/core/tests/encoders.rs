use flowfilter::diffcore::{grad_check_entries, selective_scan, ParamId, ParamSet, Tape, Tensor};
use flowfilter::encoders::{
    positional_encoding, scaled_dot_attention, zoh_discretize, Encoder, EncoderConfig, EncoderKind,
};
use flowfilter::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn obs(b: usize, r: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![b, r, m], (0..b * r * m).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn config(kind: EncoderKind) -> EncoderConfig {
    EncoderConfig {
        kind,
        input_dim: 3,
        model_dim: 8,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ssm_state_dim: 4,
        mlp_hidden: 16,
        window: 5,
        ..Default::default()
    }
}

fn build(kind: EncoderKind) -> (Encoder, ParamSet) {
    let mut ps = ParamSet::new();
    let enc = Encoder::new(&config(kind), &mut ps).unwrap();
    (enc, ps)
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding(30, 16);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!((pe.row(1)[0] - pe.row(0)[0] - 0.8414709848078965).abs() < 1e-15);
}

#[test]
fn attention_single_token_and_uniform_keys() {
    let t = Tape::new();
    let q = t.constant(obs(2, 1, 4, 1));
    let k = t.constant(obs(2, 1, 4, 2));
    let v = t.constant(obs(2, 1, 4, 3));
    let out = scaled_dot_attention(q, k, v, 2, true).unwrap();
    assert_eq!(out.value(), v.value());

    let q = t.constant(obs(1, 3, 4, 4));
    let k = t.constant(Tensor::full(vec![1, 5, 4], 0.3));
    let vals = obs(1, 5, 4, 5);
    let out = scaled_dot_attention(q, k, t.constant(vals.clone()), 2, false).unwrap().value();
    for c in 0..4 {
        let mean: f64 = (0..5).map(|j| vals.data()[j * 4 + c]).sum::<f64>() / 5.0;
        for i in 0..3 {
            assert!((out.data()[i * 4 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn transformer_encoder_is_causal() {
    let (enc, ps) = build(EncoderKind::Transformer);
    let Encoder::Transformer(tf) = &enc else { unreachable!() };
    let base = obs(1, 6, 3, 6);
    let t = Tape::new();
    let out = tf.encode(&t, &ps, t.constant(base.clone())).unwrap().value();
    for j in 1..6 {
        let mut moved = base.clone();
        for c in 0..3 {
            moved.data_mut()[j * 3 + c] += 0.9;
        }
        let o2 = tf.encode(&t, &ps, t.constant(moved)).unwrap().value();
        for i in 0..6 {
            let diff: f64 = (0..8).map(|c| (o2.data()[i * 8 + c] - out.data()[i * 8 + c]).abs()).fold(0.0, f64::max);
            if i < j {
                assert!(diff < 1e-12, "token {i} moved by perturbing {j}");
            } else if i == j {
                assert!(diff > 0.0);
            }
        }
    }
}

#[test]
fn embeddings_have_configured_width_for_any_window() {
    for kind in [EncoderKind::Transformer, EncoderKind::Ssm] {
        let (enc, ps) = build(kind);
        for r in [1, 5, 28] {
            let e = enc.embed_values(&ps, &obs(3, r, 3, r as u64)).unwrap();
            assert_eq!(e.shape(), &[3, 4]);
        }
    }
    let (enc, ps) = build(EncoderKind::Mlp);
    assert_eq!(enc.embed_values(&ps, &obs(3, 5, 3, 0)).unwrap().shape(), &[3, 4]);
    assert!(matches!(enc.embed_values(&ps, &obs(3, 6, 3, 0)), Err(Error::Dimension { .. })));
}

#[test]
fn embeddings_are_deterministic_and_position_sensitive() {
    for kind in [EncoderKind::Mlp, EncoderKind::Transformer, EncoderKind::Ssm] {
        let (enc, ps) = build(kind);
        let x = obs(1, 5, 3, 7);
        let a = enc.embed_values(&ps, &x).unwrap();
        let (enc2, ps2) = build(kind);
        let b = enc2.embed_values(&ps2, &x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // swap the first two of the first R − 1 observations
        let mut swapped = x.clone();
        for c in 0..3 {
            swapped.data_mut().swap(c, 3 + c);
        }
        let s = enc.embed_values(&ps, &swapped).unwrap();
        assert!(s.max_abs_diff(&a) > 0.0, "{kind:?}");
    }
}

#[test]
fn ssm_tokens_are_causal() {
    let (enc, ps) = build(EncoderKind::Ssm);
    let Encoder::Ssm(ssm) = &enc else { unreachable!() };
    let base = obs(1, 7, 3, 8);
    let t = Tape::new();
    let out = ssm.tokens(&t, &ps, t.constant(base.clone())).unwrap().value();
    for j in 1..7 {
        let mut moved = base.clone();
        moved.data_mut()[j * 3] -= 1.3;
        let o2 = ssm.tokens(&t, &ps, t.constant(moved)).unwrap().value();
        for i in 0..j {
            for c in 0..8 {
                assert_eq!(o2.data()[i * 8 + c], out.data()[i * 8 + c]);
            }
        }
    }
}

#[test]
fn zoh_examples() {
    let (ab, bb) = zoh_discretize(0.0, 2.0, 0.3);
    assert_eq!(ab, 1.0);
    assert!((bb - 0.6).abs() < 1e-15);
    let ln2 = std::f64::consts::LN_2;
    let (ab, bb) = zoh_discretize(-1.0, 1.0, ln2);
    assert!((ab - 0.5).abs() < 1e-15);
    assert!((bb - 0.5).abs() < 1e-15);
    assert!((bb - ln2).abs() > 0.1);
    // series branch is continuous with the closed form
    let (_, tiny) = zoh_discretize(-1e-7, 1.0, 1.0);
    assert!((tiny - (-(-1e-7f64).exp_m1() / 1e-7)).abs() < 1e-15);
}

#[test]
fn scan_with_zero_transition_is_memoryless() {
    let t = Tape::new();
    let a = t.constant(Tensor::full(vec![2, 3], -1e4));
    let delta = t.constant(Tensor::full(vec![1, 4, 2], 1.0));
    let b = t.constant(obs(1, 4, 3, 9));
    let c = t.constant(obs(1, 4, 3, 10));
    let x = obs(1, 4, 2, 11);
    let y = selective_scan(t.constant(x.clone()), delta, a, b, c).unwrap().value();
    let mut moved = x.clone();
    moved.data_mut()[2] += 5.0; // x at step 1, channel 0
    let y2 = selective_scan(t.constant(moved), delta, a, b, c).unwrap().value();
    assert_eq!(y.data()[4], y2.data()[4]);
    assert_eq!(y.data()[6], y2.data()[6]);
    assert_ne!(y.data()[2], y2.data()[2]);
}

#[test]
fn zero_weight_mlp_outputs_its_bias() {
    let (enc, mut ps) = build(EncoderKind::Mlp);
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let shape = ps.value(id).shape().to_vec();
        *ps.value_mut(id) = Tensor::zeros(shape);
    }
    let last = ps.find("encoder.mlp.l2.b").unwrap();
    *ps.value_mut(last) = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
    let e = enc.embed_values(&ps, &obs(2, 5, 3, 12)).unwrap();
    assert_eq!(e.data(), &[0.5, -1.0, 2.0, 0.0, 0.5, -1.0, 2.0, 0.0]);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for kind in [EncoderKind::Mlp, EncoderKind::Transformer, EncoderKind::Ssm] {
        let (enc, ps) = build(kind);
        let x = obs(2, 5, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ids: Vec<ParamId> = ps.ids().collect();
        let entries: Vec<(ParamId, usize)> = (0..60)
            .map(|_| {
                let id = ids[rng.random_range(0..ids.len())];
                (id, rng.random_range(0..ps.value(id).numel()))
            })
            .collect();
        let err = grad_check_entries::<_, Error>(
            |t, p| {
                let e = enc.embed(t, p, t.constant(x.clone()))?;
                let w = t.constant(Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 * 0.37).cos()).collect())?);
                Ok(e.mul(w)?.sum())
            },
            &ps,
            1e-4,
            &entries,
        )
        .unwrap();
        assert!(err < 1e-5, "{kind:?}: {err}");
    }
}

#[test]
fn config_validation() {
    let bad = EncoderConfig {
        model_dim: 9,
        n_heads: 2,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert_eq!("ssm".parse::<EncoderKind>().unwrap(), EncoderKind::Ssm);
}
