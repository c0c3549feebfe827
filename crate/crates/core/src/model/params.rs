use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{GateGranularity, ModelConfig};
use crate::numerics::Tensor;

/// Named parameter tensors, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn attention_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{proj}"), vec![d, d], Init::Normal));
        out.push((format!("{prefix}.b{proj}"), vec![d], Init::Zeros));
    }
}

fn norm_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn ffn_params(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, d_ff: usize) {
    out.push((format!("{prefix}.w1"), vec![d, d_ff], Init::Normal));
    out.push((format!("{prefix}.b1"), vec![d_ff], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![d_ff, d], Init::Normal));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

/// Every parameter the configuration needs, in initialization order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mode = config.fusion_mode;
    let mut out = vec![
        ("tok_emb".to_owned(), vec![config.vocab_size, d], Init::Normal),
        ("dec.pos_emb".to_owned(), vec![config.max_len, d], Init::Normal),
    ];
    if mode.uses_encoder() {
        out.push(("enc.pos_emb".to_owned(), vec![config.max_len, d], Init::Normal));
        for l in 0..config.n_encoder_layers {
            let p = format!("enc.l{l}");
            norm_params(&mut out, &format!("{p}.ln1"), d);
            attention_params(&mut out, &format!("{p}.attn"), d);
            norm_params(&mut out, &format!("{p}.ln2"), d);
            ffn_params(&mut out, &format!("{p}.ffn"), d, config.d_ff);
        }
        norm_params(&mut out, "enc.ln_f", d);
    }
    for l in 0..config.n_decoder_layers {
        let p = format!("dec.l{l}");
        norm_params(&mut out, &format!("{p}.ln1"), d);
        attention_params(&mut out, &format!("{p}.self_attn"), d);
        if mode.has_cross_attention() {
            norm_params(&mut out, &format!("{p}.ln_cross"), d);
            attention_params(&mut out, &format!("{p}.cross_attn"), d);
        }
        norm_params(&mut out, &format!("{p}.ln2"), d);
        ffn_params(&mut out, &format!("{p}.ffn"), d, config.d_ff);
    }
    norm_params(&mut out, "dec.ln_f", d);
    if mode.has_gate() {
        attention_params(&mut out, "gate.attn", d);
        let width = match config.gate_granularity {
            GateGranularity::Scalar => 1,
            GateGranularity::PerDimension => d,
        };
        out.push(("gate.w".to_owned(), vec![d, width], Init::Normal));
        out.push(("gate.b".to_owned(), vec![width], Init::Zeros));
    }
    out
}

/// Names and shapes of all parameters required by `config`.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// A model configuration together with all of its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    params: ParamSet,
}

impl Checkpoint {
    /// Checks that `params` holds exactly the tensors `config` requires.
    pub fn new(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, config requires {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Contract(format!("parameter {name} has non-finite values")))
                }
                _ => {}
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Weight matrices and embeddings ~ N(0, 0.02²) from the config seed;
/// biases zero; layer-norm gains one.
pub fn init_parameters(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamSet::new();
    for (name, shape, init) in layout(config) {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::Normal => {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            }
        };
        params.insert(name, tensor);
    }
    Checkpoint::new(config.clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;

    fn config(mode: FusionMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 6,
            fusion_mode: mode,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_parameters(&config(FusionMode::Both)).unwrap();
        let b = init_parameters(&config(FusionMode::Both)).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_parameters(&ModelConfig {
            seed: 4,
            ..config(FusionMode::Both)
        })
        .unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_values() {
        let ck = init_parameters(&config(FusionMode::Both)).unwrap();
        assert!(ck.param("gate.b").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(ck.param("dec.ln_f.gain").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(ck.param("enc.l0.attn.bq").unwrap().data().iter().all(|&g| g == 0.0));
        let emb = ck.param("tok_emb").unwrap();
        let std = (emb.sum_sq() / emb.len() as f64).sqrt();
        assert!((0.01..0.03).contains(&std), "{std}");
    }

    #[test]
    fn parameter_sets_follow_fusion_mode() {
        let none = init_parameters(&config(FusionMode::None)).unwrap();
        assert!(none.params().keys().all(|k| !k.starts_with("enc.") && !k.starts_with("gate.")));
        let cross = init_parameters(&config(FusionMode::CrossAttention)).unwrap();
        assert!(cross.param("dec.l0.cross_attn.wq").is_some());
        assert!(cross.param("gate.w").is_none());
        let gate = init_parameters(&config(FusionMode::Gate)).unwrap();
        assert_eq!(gate.param("gate.w").unwrap().shape(), &[8, 1]);
        let per_dim = init_parameters(&ModelConfig {
            gate_granularity: GateGranularity::PerDimension,
            ..config(FusionMode::Gate)
        })
        .unwrap();
        assert_eq!(per_dim.param("gate.w").unwrap().shape(), &[8, 8]);
        assert_eq!(per_dim.param("gate.b").unwrap().shape(), &[8]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..config(FusionMode::Both)
        };
        assert!(matches!(init_parameters(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let ck = init_parameters(&config(FusionMode::Gate)).unwrap();
        let mut params = ck.params().clone();
        params.insert("gate.w".into(), Tensor::zeros(&[8, 8]));
        assert!(Checkpoint::new(ck.config().clone(), params.clone()).is_err());
        params.remove("gate.w");
        assert!(Checkpoint::new(ck.config().clone(), params).is_err());
    }
}
