use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{ExamplePair, BOS, EOS};

fn config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        d_ff: 32,
        max_len: 10,
        dropout_rate: 0.1,
        fusion_mode: mode,
        gate_granularity: GateGranularity::Scalar,
        seed: 5,
    }
}

/// Larger weights than the init so perturbation effects are not lost in
/// the 0.02 scale.
fn scrambled(mode: FusionMode) -> Checkpoint {
    gradcheck::fixture(&config(mode), 9).unwrap().0
}

fn ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(4..24)).collect()
}

#[test]
fn encoder_is_bidirectional() {
    let ck = scrambled(FusionMode::Both);
    let src = vec![5, 6, 7, 8, 9];
    let base = encode(&src, &ck, Mode::Eval).unwrap();
    let mut changed = src.clone();
    changed[4] = 20;
    let other = encode(&changed, &ck, Mode::Eval).unwrap();
    let diff = base.h.row(0).iter().zip(other.h.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-9, "{diff}");
}

#[test]
fn eval_is_deterministic_and_train_uses_dropout() {
    let ck = scrambled(FusionMode::Both);
    let src = [4, 5, 6];
    let a = encode(&src, &ck, Mode::Eval).unwrap();
    let b = encode(&src, &ck, Mode::Eval).unwrap();
    assert!(a.h.bit_eq(&b.h));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = encode(&src, &ck, Mode::Train(&mut rng)).unwrap();
    assert!(!a.h.bit_eq(&c.h));
}

#[test]
fn too_long_sequences_are_length_errors() {
    let ck = scrambled(FusionMode::Both);
    let long = vec![4; 11];
    assert!(matches!(encode(&long, &ck, Mode::Eval), Err(Error::Length { len: 11, max: 10 })));
    let enc = encode(&[4], &ck, Mode::Eval).unwrap();
    assert!(matches!(
        decode_forward(&long, Some(&enc), &ck, Mode::Eval),
        Err(Error::Length { .. })
    ));
    assert!(matches!(ck.condition(&long), Err(Error::Length { .. })));
}

#[test]
fn padded_source_positions_get_no_weight() {
    let ck = scrambled(FusionMode::Both);
    let mut enc = encode(&[4, 5, 6], &ck, Mode::Eval).unwrap();
    let real = enc.clone();
    let d = ck.config().d_model;
    let mut rows: Vec<Vec<f64>> = (0..3).map(|r| enc.h.row(r).to_vec()).collect();
    rows.push(vec![100.0; d]);
    rows.push(vec![-7.0; d]);
    enc.h = Tensor::from_rows(&rows).unwrap();
    enc.mask = vec![true, true, true, false, false];
    let z = Tensor::from_rows(&[vec![0.3; d], vec![-0.2; d]]).unwrap();
    let padded = cross_attend(&z, &enc, &ck, "gate.attn").unwrap();
    let plain = cross_attend(&z, &real, &ck, "gate.attn").unwrap();
    assert!(padded.context.bit_eq(&plain.context));
    for (i, w) in padded.weights.iter().enumerate() {
        if i % 5 >= 3 {
            assert_eq!(*w, 0.0);
        }
    }
}

#[test]
fn cross_attention_weights_sum_to_one() {
    let ck = scrambled(FusionMode::Both);
    let enc = encode(&[4, 9, 13, 7], &ck, Mode::Eval).unwrap();
    let z = Tensor::from_rows(&[vec![0.5; 16], vec![-1.0; 16], vec![2.0; 16]]).unwrap();
    let ca = cross_attend(&z, &enc, &ck, "dec.l1.cross_attn").unwrap();
    assert_eq!(ca.weights.len(), 2 * 3 * 4);
    for row in ca.weights.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_source_position_passes_its_value_through() {
    let ck = scrambled(FusionMode::Both);
    let enc = encode(&[11], &ck, Mode::Eval).unwrap();
    let wv = ck.param("gate.attn.wv").unwrap();
    let bv = ck.param("gate.attn.bv").unwrap();
    let wo = ck.param("gate.attn.wo").unwrap();
    let bo = ck.param("gate.attn.bo").unwrap();
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.get2(i, j)).sum::<f64>())
            .collect()
    };
    let expected = affine(&affine(enc.h.row(0), wv, bv), wo, bo);
    for q in [vec![0.0; 16], vec![3.0; 16]] {
        let z = Tensor::from_rows(&[q]).unwrap();
        let c = cross_attend(&z, &enc, &ck, "gate.attn").unwrap().context;
        for (a, b) in c.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_keys_give_uniform_weights() {
    let ck = scrambled(FusionMode::Both);
    let d = 16;
    let enc = EncoderOutput {
        h: Tensor::from_rows(&vec![vec![0.7; d]; 4]).unwrap(),
        mask: vec![true, true, true, false],
    };
    let z = Tensor::from_rows(&[vec![1.3; d]]).unwrap();
    let w = cross_attend(&z, &enc, &ck, "gate.attn").unwrap().weights;
    for head in w.chunks(4) {
        for &p in &head[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(head[3], 0.0);
    }
}

#[test]
fn gate_examples() {
    let z = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 4.0, -1.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![3.0, 1.0, -0.5], vec![2.0, 2.0, 2.0]]).unwrap();
    let (alpha, fused) = gate(&z, &c, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[1])).unwrap();
    assert!(alpha.data().iter().all(|&a| a == 0.5));
    for (i, f) in fused.data().iter().enumerate() {
        assert!((f - (z.data()[i] + c.data()[i]) / 2.0).abs() < 1e-15);
    }
    let norm = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let (_, low) = gate(&z, &c, &Tensor::zeros(&[3, 1]), &Tensor::full(&[1], -50.0)).unwrap();
    assert!(norm(&low, &z) < 1e-18 * norm(&c, &z));
    let (_, high) = gate(&z, &c, &Tensor::zeros(&[3, 1]), &Tensor::full(&[1], 50.0)).unwrap();
    for (a, b) in high.data().iter().zip(c.data()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
    }
    let (alpha, _) = gate(&z, &c, &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3])).unwrap();
    assert_eq!(alpha.shape(), &[2, 3]);
}

#[test]
fn initial_alpha_is_near_half() {
    let config = ModelConfig {
        vocab_size: 30,
        d_model: 32,
        dropout_rate: 0.0,
        ..config(FusionMode::Both)
    };
    let ck = init_parameters(&config).unwrap();
    let enc = encode(&[4, 5, 6, 7], &ck, Mode::Eval).unwrap();
    let out = decode_forward(&[BOS], Some(&enc), &ck, Mode::Eval).unwrap();
    let a = out.gate.unwrap().alphas[0][0];
    assert!((0.4..0.6).contains(&a), "{a}");
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let config = ModelConfig {
        vocab_size: 40,
        ..config(FusionMode::Both)
    };
    let ck = init_parameters(&config).unwrap();
    let pair = ExamplePair::new(vec![5, 6, 7, 8], &[9, 10, 11]).unwrap();
    let loss = forward_loss(&pair, &ck, Mode::Eval).unwrap();
    let ln_v = (40f64).ln();
    assert!((loss - ln_v).abs() < 0.15 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn bos_eos_target_is_eos_nll() {
    let ck = scrambled(FusionMode::Gate);
    let pair = ExamplePair::new(vec![5, 6], &[]).unwrap();
    let loss = forward_loss(&pair, &ck, Mode::Eval).unwrap();
    let enc = encode(&[5, 6], &ck, Mode::Eval).unwrap();
    let logits = decode_forward(&[BOS], Some(&enc), &ck, Mode::Eval).unwrap().logits;
    let row = logits.row(0);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    assert!((loss - (lse - row[EOS as usize])).abs() < 1e-12);
}

#[test]
fn duplicated_pair_keeps_mean_loss() {
    let ck = scrambled(FusionMode::Both);
    let p = ExamplePair::new(vec![5, 6, 7], &[8, 9]).unwrap();
    let one = batch_loss(std::slice::from_ref(&p), &ck, Mode::Eval).unwrap();
    let two = batch_loss(&[p.clone(), p], &ck, Mode::Eval).unwrap();
    assert!((one - two).abs() < 1e-12);
}

#[test]
fn batched_loss_is_token_weighted_mean() {
    let ck = scrambled(FusionMode::Both);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<ExamplePair> = (1..6)
        .map(|k| ExamplePair::new(ids(&mut rng, k + 1), &ids(&mut rng, 6 - k)).unwrap())
        .collect();
    let batched = batch_loss(&pairs, &ck, Mode::Eval).unwrap();
    let (mut sum, mut count) = (0.0, 0.0);
    for p in &pairs {
        let n = p.supervised_len() as f64;
        sum += n * forward_loss(p, &ck, Mode::Eval).unwrap();
        count += n;
    }
    assert!((batched - sum / count).abs() < 1e-10);
}

#[test]
fn logits_rows_are_distributions() {
    let ck = scrambled(FusionMode::Both);
    let enc = encode(&[4, 5], &ck, Mode::Eval).unwrap();
    let logits = decode_forward(&[BOS, 7, 8], Some(&enc), &ck, Mode::Eval).unwrap().logits;
    assert_eq!(logits.shape(), &[3, 24]);
    for r in 0..3 {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let total: f64 = row.iter().map(|x| (x - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pinned_alpha_zero_and_one() {
    let ck = scrambled(FusionMode::Both);
    let enc = encode(&[4, 5, 6], &ck, Mode::Eval).unwrap();
    let prefix = [BOS, 9, 10];
    let zero = decode_forward_pinned(&prefix, Some(&enc), &ck, 0.0).unwrap();
    assert!(zero.fused.bit_eq(&zero.hidden));
    let one = decode_forward_pinned(&prefix, Some(&enc), &ck, 1.0).unwrap();
    assert!(one.fused.bit_eq(one.context.as_ref().unwrap()));
    // z′ at α = 1 only sees z through the attention query: the context
    // equals the pooled encoder value when attention is over one source.
    let single = encode(&[4], &ck, Mode::Eval).unwrap();
    let a = decode_forward_pinned(&[BOS], Some(&single), &ck, 1.0).unwrap();
    let b = decode_forward_pinned(&[BOS, 12], Some(&single), &ck, 1.0).unwrap();
    for (x, y) in a.fused.row(0).iter().zip(b.fused.row(1)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn tied_embedding_moves_input_and_output() {
    let mut ck = scrambled(FusionMode::Both);
    let enc = encode(&[4, 5], &ck, Mode::Eval).unwrap();
    let prefix = [BOS, 7];
    let before = decode_forward(&prefix, Some(&enc), &ck, Mode::Eval).unwrap();
    let mut emb = ck.param("tok_emb").unwrap().clone();
    let d = emb.cols();
    for j in 0..d {
        emb.data_mut()[7 * d + j] += 0.5;
    }
    ck.set_param("tok_emb", emb.clone()).unwrap();
    let after = decode_forward(&prefix, Some(&enc), &ck, Mode::Eval).unwrap();
    // Row 0 only sees <bos>, so its hidden state is unchanged and only
    // logit column 7 moves.
    assert!(after.fused.row(0).iter().zip(before.fused.row(0)).all(|(a, b)| a == b));
    for v in 0..24 {
        let moved = after.logits.get2(0, v) != before.logits.get2(0, v);
        assert_eq!(moved, v == 7, "column {v}");
        let expected: f64 = after.fused.row(0).iter().zip(emb.row(v)).map(|(a, b)| a * b).sum();
        assert!((after.logits.get2(0, v) - expected).abs() < 1e-12);
    }
    // Row 1 consumes token 7 as input.
    assert!(after.hidden.row(1).iter().zip(before.hidden.row(1)).any(|(a, b)| a != b));
}

#[test]
fn missing_encoder_states_are_an_error() {
    let ck = scrambled(FusionMode::Gate);
    assert!(decode_forward(&[BOS], None, &ck, Mode::Eval).is_err());
    let none = scrambled(FusionMode::None);
    assert!(encode(&[4], &none, Mode::Eval).is_err());
    assert!(decode_forward(&[BOS], None, &none, Mode::Eval).unwrap().gate.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_prefix_is_bit_invariant(seed in any::<u64>(), len in 2usize..10, mode_idx in 0usize..4) {
        let mode = FusionMode::ALL[mode_idx];
        let ck = scrambled(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = ids(&mut rng, 4);
        let ctx = ck.condition(&src).unwrap();
        let mut prefix = vec![BOS];
        prefix.extend(ids(&mut rng, len - 1));
        let base = ck.logits(&ctx, &prefix).unwrap();
        let t = rng.random_range(0..len - 1);
        let k = rng.random_range(t + 1..len);
        let mut mutated = prefix.clone();
        mutated[k] = if mutated[k] == 4 { 5 } else { 4 };
        let other = ck.logits(&ctx, &mutated).unwrap();
        for r in 0..=t {
            prop_assert!(base.row(r).iter().zip(other.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn decoder_only_ignores_source(seed in any::<u64>(), n1 in 1usize..10, n2 in 1usize..10) {
        let ck = scrambled(FusionMode::None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = [BOS, 6, 7];
        let a = ck.condition(&ids(&mut rng, n1)).unwrap();
        let b = ck.condition(&ids(&mut rng, n2)).unwrap();
        prop_assert!(ck.logits(&a, &prefix).unwrap().bit_eq(&ck.logits(&b, &prefix).unwrap()));
    }

    #[test]
    fn fused_models_see_later_source_positions(seed in any::<u64>(), mode_idx in 1usize..4) {
        let ck = scrambled(FusionMode::ALL[mode_idx]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = ids(&mut rng, 6);
        let base = ck.logits(&ck.condition(&src).unwrap(), &[BOS]).unwrap();
        let mut mutated = src.clone();
        let j = rng.random_range(1..6);
        mutated[j] = if mutated[j] == 4 { 5 } else { 4 };
        let other = ck.logits(&ck.condition(&mutated).unwrap(), &[BOS]).unwrap();
        let diff = base.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff > 1e-9);
    }

    #[test]
    fn gate_alpha_is_strictly_inside_unit_interval(seed in any::<u64>(), per_dim in any::<bool>(), scale in 0.1f64..200.0) {
        let mut config = config(FusionMode::Gate);
        if per_dim {
            config.gate_granularity = GateGranularity::PerDimension;
        }
        let (mut ck, _) = gradcheck::fixture(&config, seed).unwrap();
        let mut w = ck.param("gate.w").unwrap().clone();
        for x in w.data_mut() {
            *x *= scale;
        }
        ck.set_param("gate.w", w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = encode(&ids(&mut rng, 5), &ck, Mode::Eval).unwrap();
        let mut prefix = vec![BOS];
        prefix.extend(ids(&mut rng, 6));
        let trace = decode_forward(&prefix, Some(&enc), &ck, Mode::Eval).unwrap().gate.unwrap();
        let width = if per_dim { 16 } else { 1 };
        prop_assert_eq!(trace.alphas.len(), 7);
        for row in &trace.alphas {
            prop_assert_eq!(row.len(), width);
            prop_assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }
}
