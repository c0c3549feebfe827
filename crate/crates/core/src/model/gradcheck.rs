//! Finite-difference check of the full training loss against backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::pad_batch;
use crate::corpus::{ExamplePair, TokenId, PAD, SPECIAL_TOKENS};
use crate::error::Result;
use crate::model::{init_parameters, Checkpoint, FusionMode, GateGranularity, Mode, ModelConfig, ModelGraph};
use crate::numerics::{finite_diff_check, OpKind, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-5;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 32,
        max_len: 8,
        dropout_rate: 0.0,
        fusion_mode: FusionMode::Both,
        gate_granularity: GateGranularity::Scalar,
        seed: 7,
    }
}

/// Parameters pushed away from the near-zero init so every term of the
/// loss carries visible curvature, plus a small ragged batch of pairs
/// with n = m = 5 for the first pair.
pub fn fixture(config: &ModelConfig, seed: u64) -> Result<(Checkpoint, Vec<ExamplePair>)> {
    let mut ckpt = init_parameters(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in ckpt.params_mut().values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    let first = SPECIAL_TOKENS.len() as TokenId;
    let v = config.vocab_size as TokenId;
    let mut seq = |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.random_range(first..v)).collect() };
    let pairs = vec![
        ExamplePair::new(seq(5), &seq(3))?,
        ExamplePair::new(seq(3), &seq(1))?,
    ];
    Ok((ckpt, pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn loss_and_grads(ckpt: &Checkpoint, pairs: &[ExamplePair], fault: Option<OpKind>) -> Result<crate::model::ParamSet> {
    let b = pad_batch(pairs, PAD)?;
    let mut mg = ModelGraph::new(ckpt, Mode::Eval);
    if let Some(kind) = fault {
        mg.graph_mut().inject_backward_fault(kind);
    }
    let loss = mg.batch_loss(&b)?;
    mg.graph_mut().backward(loss)?;
    Ok(mg.param_grads())
}

/// Compares backprop gradients of the eval-mode batch loss with central
/// differences, one entry per parameter tensor in name order. `fault`
/// corrupts the backward rule of one op kind.
pub fn check_model_gradients(
    ckpt: &Checkpoint,
    pairs: &[ExamplePair],
    step: f64,
    fault: Option<OpKind>,
) -> Result<Vec<TensorCheck>> {
    let grads = loss_and_grads(ckpt, pairs, fault)?;
    let mut out = Vec::with_capacity(grads.len());
    for (name, analytic) in &grads {
        let theta = ckpt.param(name).expect("gradient for a known parameter").clone();
        let mut probe = ckpt.clone();
        let err = finite_diff_check(
            |t: &Tensor| {
                probe.set_param(name, t.clone())?;
                crate::model::batch_loss(pairs, &probe, Mode::Eval)
            },
            &theta,
            analytic,
            step,
        )?;
        out.push(TensorCheck {
            name: name.clone(),
            len: theta.len(),
            max_rel_error: err,
        });
    }
    Ok(out)
}
