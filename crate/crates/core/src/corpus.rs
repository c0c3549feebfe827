//! Text normalization, word-level vocabulary, pair loading, 8:1:1 splits
//! and the synthetic reversal task.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, replaces every character that is not a letter, digit or
/// whitespace with a space, then collapses whitespace runs and trims.
pub fn normalize(text: &str) -> String {
    let replaced: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Bijective token/id map. Ids 0..4 are always the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the full ordered token list, reserved
    /// tokens included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Parse {
                line: 1,
                msg: format!("vocabulary must start with {}", SPECIAL_TOKENS.join(" ")),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens followed by `words` in the given order.
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Keeps tokens seen at least `min_freq` times, most frequent first
    /// with lexicographic tie-breaking, up to `max_size` entries in total.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        if max_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "max_size must be at least {}, got {max_size}",
                SPECIAL_TOKENS.len() + 1
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());
        Self::with_words(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens, dropping `<pad>`, `<bos>` and `<eos>`.
    /// Ids outside the vocabulary decode as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_owned())
            .collect()
    }

    /// File form: one token per line, line index = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_file_string()).map_err(|e| Error::io(&path, e))
    }
}

/// Source/target token strings before id assignment. The target carries
/// no sentence markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl TextPair {
    pub fn to_tsv_line(&self) -> String {
        format!("{}\t{}", self.source.join(" "), self.target.join(" "))
    }
}

/// One training instance. `target` is stored as `<bos> … <eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExamplePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl ExamplePair {
    pub fn new(source: Vec<TokenId>, target_body: &[TokenId]) -> Result<Self> {
        let mut target = Vec::with_capacity(target_body.len() + 2);
        target.push(BOS);
        target.extend_from_slice(target_body);
        target.push(EOS);
        let pair = ExamplePair { source, target };
        pair.validate(None)?;
        Ok(pair)
    }

    pub fn from_text(pair: &TextPair, vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.encode(&pair.source), &vocab.encode(&pair.target))
    }

    /// Checks the structural invariants, and the id range when a vocabulary
    /// size is given.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::Contract("source must be non-empty".into()));
        }
        if self.target.len() < 2 {
            return Err(Error::Contract(format!(
                "target must hold at least <bos><eos>, got {} ids",
                self.target.len()
            )));
        }
        if let Some(v) = vocab_size {
            if let Some(&bad) = self.source.iter().chain(&self.target).find(|&&id| id as usize >= v) {
                return Err(Error::Index(format!("token id {bad} out of range for vocabulary of {v}")));
            }
        }
        Ok(())
    }

    /// Supervised positions under teacher forcing.
    pub fn supervised_len(&self) -> usize {
        self.target.len() - 1
    }
}

pub fn encode_pairs(pairs: &[TextPair], vocab: &Vocabulary) -> Result<Vec<ExamplePair>> {
    pairs.iter().map(|p| ExamplePair::from_text(p, vocab)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then ⌊0.8n⌋ train, ⌊0.1n⌋ validation, rest test.
pub fn split_corpus<T: Clone>(examples: &[T], seed: u64) -> Result<CorpusSplit<T>> {
    let n = examples.len();
    if n < 10 {
        return Err(Error::Config(format!("split requires n ≥ 10, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum PairingMode {
    /// Each line is `source<TAB>target`.
    #[default]
    PairedTsv,
    /// Each line is one document; the first ⌈fraction·L⌉ tokens become the
    /// source and the rest the target.
    AutoSplit { prefix_fraction: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedPairs {
    pub pairs: Vec<TextPair>,
    /// Auto-split documents dropped for having fewer than two tokens.
    pub skipped: usize,
}

pub fn parse_pairs(text: &str, mode: PairingMode) -> Result<LoadedPairs> {
    let mut out = LoadedPairs::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        match mode {
            PairingMode::PairedTsv => {
                if line.trim().is_empty() {
                    continue;
                }
                let mut parts = line.split('\t');
                let (Some(src), Some(tgt), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "expected exactly one TAB".into(),
                    });
                };
                let source = tokenize(src);
                if source.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "source must be non-empty".into(),
                    });
                }
                out.pairs.push(TextPair {
                    source,
                    target: tokenize(tgt),
                });
            }
            PairingMode::AutoSplit { prefix_fraction } => {
                if !(prefix_fraction > 0.0 && prefix_fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "prefix_fraction must lie in (0, 1], got {prefix_fraction}"
                    )));
                }
                let tokens = tokenize(line);
                if tokens.len() < 2 {
                    out.skipped += 1;
                    continue;
                }
                let cut = ((prefix_fraction * tokens.len() as f64).ceil() as usize).clamp(1, tokens.len());
                out.pairs.push(TextPair {
                    source: tokens[..cut].to_vec(),
                    target: tokens[cut..].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>, mode: PairingMode) -> Result<LoadedPairs> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let loaded = parse_pairs(&text, mode)?;
    if loaded.skipped > 0 {
        log::warn!(
            "{}: skipped {} documents with fewer than 2 tokens",
            path.as_ref().display(),
            loaded.skipped
        );
    }
    Ok(loaded)
}

pub fn reversal_token(i: usize) -> String {
    format!("t{i}")
}

/// Vocabulary of the reversal task: reserved tokens then `t0..t{alphabet-1}`.
pub fn reversal_vocabulary(alphabet_size: usize) -> Result<Vocabulary> {
    Vocabulary::with_words((0..alphabet_size).map(reversal_token))
}

/// Uniform random sources over `t0..t{alphabet-1}`; each target is its
/// source reversed.
pub fn synth_reversal(n_examples: usize, seq_len: usize, alphabet_size: usize, seed: u64) -> Result<Vec<TextPair>> {
    if alphabet_size == 0 {
        return Err(Error::Config("alphabet size must be at least 1".into()));
    }
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_examples)
        .map(|_| {
            let source: Vec<String> = (0..seq_len)
                .map(|_| reversal_token(rng.random_range(0..alphabet_size)))
                .collect();
            let target = source.iter().rev().cloned().collect();
            TextPair { source, target }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Hello, World!"), "hello world");
        assert_eq!(normalize("  A  B "), "a b");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("tab\there\nnew"), "tab here new");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("the cat sat"), words("the cat sat"));
        assert_eq!(tokenize("Don't stop"), words("don t stop"));
        assert_eq!(tokenize("x"), words("x"));
        assert!(tokenize("").is_empty());
        assert!(tokenize("?!").is_empty());
    }

    #[test]
    fn build_vocab_ranking() {
        let v = Vocabulary::build(&["a a b"], 1, 100).unwrap();
        assert_eq!(v.tokens(), &words("<pad> <bos> <eos> <unk> a b")[..]);
        assert_eq!((v.id("a"), v.id("b")), (Some(4), Some(5)));

        let v = Vocabulary::build(&["a a b"], 2, 100).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), None);

        let v = Vocabulary::build(&["b a"], 1, 100).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (Some(4), Some(5)));

        let v = Vocabulary::build(&["c c c b b a"], 1, 6).unwrap();
        assert_eq!(v.tokens()[4..], words("c b")[..]);

        assert!(matches!(Vocabulary::build(&["a"], 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&["a b c"], 1, 100).unwrap();
        let toks = words("c a b a");
        assert_eq!(v.decode(&v.encode(&toks)), toks);
        assert_eq!(v.encode(&["zzz"]), vec![UNK]);
        assert_eq!(v.decode(&[BOS, 4, EOS, PAD]), words("a"));
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let v = Vocabulary::build(&["x y y"], 1, 10).unwrap();
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::parse("<bos>\n<pad>\n<eos>\n<unk>\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<bos>\n<eos>\n<unk>\na\na\n").is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(&(0..1000).collect::<Vec<_>>(), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (800, 100, 100));
        let s = split_corpus(&(0..10).collect::<Vec<_>>(), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let err = split_corpus(&[1, 2, 3], 0).unwrap_err();
        assert!(err.to_string().contains("split requires n ≥ 10"));
    }

    #[test]
    fn split_is_deterministic() {
        let data: Vec<_> = (0..57).collect();
        assert_eq!(split_corpus(&data, 3).unwrap(), split_corpus(&data, 3).unwrap());
        assert_ne!(split_corpus(&data, 3).unwrap(), split_corpus(&data, 4).unwrap());
    }

    #[test]
    fn tsv_pairs() {
        let v = Vocabulary::build(&["a b c d"], 1, 100).unwrap();
        let loaded = parse_pairs("a b\tc d\n", PairingMode::PairedTsv).unwrap();
        let p = ExamplePair::from_text(&loaded.pairs[0], &v).unwrap();
        assert_eq!(v.decode(&p.source), words("a b"));
        assert_eq!(p.target, vec![BOS, v.id("c").unwrap(), v.id("d").unwrap(), EOS]);

        match parse_pairs("a b c\n", PairingMode::PairedTsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_pairs("a\tb\nx\ty\tz\n", PairingMode::PairedTsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let empty_target = parse_pairs("a\t\n", PairingMode::PairedTsv).unwrap();
        let p = ExamplePair::from_text(&empty_target.pairs[0], &v).unwrap();
        assert_eq!(p.target, vec![BOS, EOS]);
    }

    #[test]
    fn auto_split_pairs() {
        let mode = PairingMode::AutoSplit { prefix_fraction: 0.5 };
        let loaded = parse_pairs("w x y z\nsolo\nq r s\n", mode).unwrap();
        assert_eq!(loaded.skipped, 1);
        assert_eq!(loaded.pairs[0].source, words("w x"));
        assert_eq!(loaded.pairs[0].target, words("y z"));
        assert_eq!(loaded.pairs[1].source, words("q r"));
        assert_eq!(loaded.pairs[1].target, words("s"));
    }

    #[test]
    fn example_pair_invariants() {
        assert!(ExamplePair::new(vec![], &[4]).is_err());
        let bad = ExamplePair {
            source: vec![4],
            target: vec![BOS],
        };
        assert!(matches!(bad.validate(None), Err(Error::Contract(_))));
        let p = ExamplePair::new(vec![9], &[]).unwrap();
        assert!(matches!(p.validate(Some(8)), Err(Error::Index(_))));
    }

    #[test]
    fn reversal_data() {
        let data = synth_reversal(20, 3, 10, 5).unwrap();
        assert_eq!(data, synth_reversal(20, 3, 10, 5).unwrap());
        for p in &data {
            let mut r = p.source.clone();
            r.reverse();
            assert_eq!(p.target, r);
        }
        let v = reversal_vocabulary(10).unwrap();
        let p = ExamplePair::from_text(
            &TextPair {
                source: words("t3 t7 t1"),
                target: words("t1 t7 t3"),
            },
            &v,
        )
        .unwrap();
        assert_eq!(v.decode(&p.target), words("t1 t7 t3"));
        assert_eq!(p.target.first(), Some(&BOS));

        let single = synth_reversal(5, 4, 1, 0).unwrap();
        assert!(single.iter().all(|p| p.target == words("t0 t0 t0 t0")));
        assert!(matches!(synth_reversal(5, 4, 0, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in ".{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 10usize..400, seed in any::<u64>()) {
            let data: Vec<usize> = (0..n).collect();
            let s = split_corpus(&data, seed).unwrap();
            prop_assert_eq!(s.train.len(), n * 8 / 10);
            prop_assert_eq!(s.validation.len(), n / 10);
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, data);
        }

        #[test]
        fn vocab_rebuild_is_stable(texts in proptest::collection::vec("[a-e ]{0,12}", 1..6)) {
            let a = Vocabulary::build(&texts, 1, 50).unwrap();
            let b = Vocabulary::build(&texts, 1, 50).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
