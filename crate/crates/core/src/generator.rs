//! Greedy and sampled autoregressive decoding.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::LanguageModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Sample,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sample => "sample",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sample" => Ok(Strategy::Sample),
            _ => Err(Error::Config(format!("unknown decode strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Keep only the k highest-scoring tokens; 0 keeps all.
    pub top_k: usize,
    /// Maximum number of generated tokens, `<eos>` excluded.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_k: 0,
            max_len: 64,
            seed: 0,
        }
    }
}

pub(crate) const DECODE_KEYS: [&str; 5] = ["strategy", "temperature", "top_k", "max_len", "seed"];

impl DecodeConfig {
    pub fn keys() -> &'static [&'static str] {
        &DECODE_KEYS
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "strategy" => self.strategy.to_string(),
            "temperature" => self.temperature.to_string(),
            "top_k" => self.top_k.to_string(),
            "max_len" => self.max_len.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        let v = value.trim();
        match key {
            "strategy" => self.strategy = v.parse()?,
            "temperature" => self.temperature = v.parse().map_err(|_| bad())?,
            "top_k" => self.top_k = v.parse().map_err(|_| bad())?,
            "max_len" => self.max_len = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown decode key {key:?}"))),
        }
        Ok(())
    }
}

fn candidates(v: usize) -> impl Iterator<Item = usize> {
    (0..v).filter(|&i| i != PAD as usize && i != BOS as usize)
}

fn run<M, F>(model: &M, source: &[TokenId], max_len: usize, mut pick: F) -> Result<Vec<TokenId>>
where
    M: LanguageModel,
    F: FnMut(&[f64]) -> Result<TokenId>,
{
    let ctx = model.condition(source)?;
    let mut prefix = vec![BOS];
    while prefix.len() - 1 < max_len && prefix.len() <= model.max_len() {
        let logits = model.logits(&ctx, &prefix)?;
        let next = pick(logits.row(logits.rows() - 1))?;
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Highest logit among real tokens, ties to the lowest id.
pub fn argmax_token(row: &[f64]) -> TokenId {
    let mut best = candidates(row.len()).next().expect("vocabulary has real tokens");
    for i in candidates(row.len()) {
        if row[i] > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Decodes from `<bos>` taking the argmax at each step until `<eos>` or
/// `max_len` tokens. The result excludes `<bos>` and `<eos>`.
pub fn greedy_decode<M: LanguageModel>(model: &M, source: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    run(model, source, max_len, |row| Ok(argmax_token(row)))
}

/// Temperature and top-k sampling with a caller-owned generator.
pub fn sample_decode_with<M: LanguageModel>(
    model: &M,
    source: &[TokenId],
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    run(model, source, config.max_len, |row| {
        let mut scored: Vec<(usize, f64)> = candidates(row.len()).map(|i| (i, row[i] / config.temperature)).collect();
        if config.top_k > 0 && config.top_k < scored.len() {
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(config.top_k);
        }
        let max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scored.iter().map(|s| (s.1 - max).exp()).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Contract(format!("cannot sample from logits: {e}")))?;
        Ok(scored[dist.sample(rng)].0 as TokenId)
    })
}

pub fn sample_decode<M: LanguageModel>(model: &M, source: &[TokenId], config: &DecodeConfig) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_decode_with(model, source, config, &mut rng)
}

/// Dispatches on `config.strategy`.
pub fn decode<M: LanguageModel>(model: &M, source: &[TokenId], config: &DecodeConfig) -> Result<Vec<TokenId>> {
    match config.strategy {
        Strategy::Greedy => greedy_decode(model, source, config.max_len),
        Strategy::Sample => sample_decode(model, source, config),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, ProptestConfig};

    use super::*;
    use crate::model::{gradcheck, FusionMode, ModelConfig};
    use crate::numerics::Tensor;

    /// Returns fixed logits for every step, ignoring the source.
    struct Pinned {
        vocab: usize,
        row: Vec<f64>,
    }

    impl LanguageModel for Pinned {
        type Context = ();

        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn max_len(&self) -> usize {
            16
        }

        fn condition(&self, source: &[TokenId]) -> Result<()> {
            if source.len() > 16 {
                return Err(Error::Length { len: source.len(), max: 16 });
            }
            Ok(())
        }

        fn logits(&self, _: &(), prefix: &[TokenId]) -> Result<Tensor> {
            Tensor::from_rows(&vec![self.row.clone(); prefix.len()])
        }
    }

    fn random_model() -> crate::model::Checkpoint {
        let config = ModelConfig {
            vocab_size: 12,
            max_len: 12,
            ..gradcheck::tiny_config()
        };
        gradcheck::fixture(&config, 4).unwrap().0
    }

    #[test]
    fn eos_favoured_gives_empty_output() {
        let mut row = vec![0.0; 8];
        row[EOS as usize] = 5.0;
        let m = Pinned { vocab: 8, row };
        assert!(greedy_decode(&m, &[4], 10).unwrap().is_empty());
    }

    #[test]
    fn pad_and_bos_are_never_emitted() {
        let mut row = vec![0.0; 8];
        row[PAD as usize] = 9.0;
        row[BOS as usize] = 8.0;
        row[6] = 1.0;
        let m = Pinned { vocab: 8, row };
        assert_eq!(greedy_decode(&m, &[4], 3).unwrap(), vec![6, 6, 6]);
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            max_len: 30,
            ..Default::default()
        };
        let out = sample_decode(&m, &[4], &cfg).unwrap();
        assert!(out.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        assert!(out.len() <= 16);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let row = vec![0.0, 0.0, 1.0, 3.0, 3.0, 3.0];
        assert_eq!(argmax_token(&row), 3);
    }

    #[test]
    fn greedy_respects_max_len_and_is_repeatable() {
        let ck = random_model();
        for cap in [0, 1, 3, 40] {
            let a = greedy_decode(&ck, &[4, 5, 6], cap).unwrap();
            assert!(a.len() <= cap.min(ck.config().max_len));
            assert_eq!(a, greedy_decode(&ck, &[4, 5, 6], cap).unwrap());
        }
    }

    #[test]
    fn long_or_empty_source_is_rejected() {
        let ck = random_model();
        assert!(matches!(greedy_decode(&ck, &[4; 13], 5), Err(Error::Length { .. })));
        assert!(greedy_decode(&ck, &[], 5).is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        let m = Pinned { vocab: 6, row: vec![0.0; 6] };
        for t in [0.0, -1.0, f64::NAN] {
            let cfg = DecodeConfig {
                strategy: Strategy::Sample,
                temperature: t,
                ..Default::default()
            };
            assert!(matches!(sample_decode(&m, &[4], &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn cold_sampling_is_greedy() {
        let ck = random_model();
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            temperature: 1e-6,
            max_len: 10,
            seed: 3,
            ..Default::default()
        };
        for src in [vec![4, 5], vec![9, 8, 7, 6]] {
            assert_eq!(sample_decode(&ck, &src, &cfg).unwrap(), greedy_decode(&ck, &src, 10).unwrap());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let ck = random_model();
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            temperature: 2.0,
            max_len: 10,
            seed: 11,
            ..Default::default()
        };
        let outs: Vec<_> = (0..3).map(|_| decode(&ck, &[4, 7], &cfg).unwrap()).collect();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn config_round_trip() {
        let mut c = DecodeConfig::default();
        c.set("strategy", "sample").unwrap();
        c.set("top_k", "3").unwrap();
        assert_eq!(c.get("strategy").unwrap(), "sample");
        assert!(c.set("beam", "4").is_err());
        assert!(c.set("strategy", "beam").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn top1_sampling_is_greedy(seed in any::<u64>(), temp in 0.01f64..50.0, src in prop::collection::vec(4u32..12, 1..8), mode in 0usize..4) {
            let config = ModelConfig {
                vocab_size: 12,
                max_len: 10,
                fusion_mode: FusionMode::ALL[mode],
                ..gradcheck::tiny_config()
            };
            let ck = gradcheck::fixture(&config, seed).unwrap().0;
            let cfg = DecodeConfig { strategy: Strategy::Sample, temperature: temp, top_k: 1, max_len: 9, seed };
            prop_assert_eq!(sample_decode(&ck, &src, &cfg).unwrap(), greedy_decode(&ck, &src, 9).unwrap());
        }
    }
}
