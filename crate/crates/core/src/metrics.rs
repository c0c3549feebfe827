//! Perplexity, corpus BLEU and the variant comparison report.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ExamplePair, TokenId};
use crate::error::{Error, Result};
use crate::generator::{greedy_decode, sample_decode_with, DecodeConfig, Strategy};
use crate::model::LanguageModel;
use crate::numerics::log_sum_exp;

/// Counts of every contiguous `n`-token window.
pub fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderPrecision {
    pub n: usize,
    pub matches: usize,
    pub total: usize,
}

impl OrderPrecision {
    /// `None` when the candidates have no n-grams of this order.
    pub fn precision(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matches as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuBreakdown {
    pub orders: Vec<OrderPrecision>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub score: f64,
}

/// Corpus BLEU with one reference per candidate. Orders without any
/// candidate n-gram are left out of the geometric mean.
pub fn bleu_corpus<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuBreakdown> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract("max_n must be at least 1".into()));
    }
    let mut orders: Vec<OrderPrecision> = (1..=max_n)
        .map(|n| OrderPrecision { n, matches: 0, total: 0 })
        .collect();
    for (cand, reference) in candidates.iter().zip(references) {
        for o in orders.iter_mut() {
            let refs = ngram_counts(reference, o.n);
            for (gram, count) in ngram_counts(cand, o.n) {
                o.total += count;
                o.matches += count.min(refs.get(&gram).copied().unwrap_or(0));
            }
        }
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let included: Vec<f64> = orders.iter().filter_map(OrderPrecision::precision).collect();
    let score = if c == 0 || included.contains(&0.0) {
        0.0
    } else {
        let mean_log = included.iter().map(|p| p.ln()).sum::<f64>() / included.len() as f64;
        brevity_penalty * mean_log.exp()
    };
    Ok(BleuBreakdown {
        orders,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
        score,
    })
}

/// Summed next-token NLL of `pair.target[1..]` and its token count,
/// teacher-forced.
pub fn pair_nll<M: LanguageModel>(model: &M, pair: &ExamplePair) -> Result<(f64, usize)> {
    pair.validate(Some(model.vocab_size()))?;
    let ctx = model.condition(&pair.source)?;
    let m = pair.target.len() - 1;
    let logits = model.logits(&ctx, &pair.target[..m])?;
    let mut total = 0.0;
    for t in 0..m {
        let row = logits.row(t);
        total += log_sum_exp(row) - row[pair.target[t + 1] as usize];
    }
    Ok((total, m))
}

/// `exp(Σ NLL / Σ tokens)` accumulated in dataset order.
pub fn perplexity<M: LanguageModel>(model: &M, pairs: &[ExamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("perplexity of an empty pair list".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for p in pairs {
        let (nll, n) = pair_nll(model, p)?;
        total += nll;
        tokens += n;
    }
    Ok((total / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantScore {
    pub perplexity: f64,
    pub bleu: BleuBreakdown,
    /// Fraction of pairs decoded to exactly the gold target.
    pub exact_match: f64,
    pub outputs: Vec<Vec<TokenId>>,
}

/// Teacher-forced perplexity on gold targets plus BLEU of decoded outputs
/// against the target bodies. Sampling uses one generator seeded from
/// `config.seed` across all pairs in order.
pub fn evaluate_variant<M: LanguageModel>(model: &M, pairs: &[ExamplePair], config: &DecodeConfig) -> Result<VariantScore> {
    config.validate()?;
    let perplexity = perplexity(model, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = match config.strategy {
            Strategy::Greedy => greedy_decode(model, &p.source, config.max_len)?,
            Strategy::Sample => sample_decode_with(model, &p.source, config, &mut rng)?,
        };
        outputs.push(out);
        references.push(p.target[1..p.target.len() - 1].to_vec());
    }
    let bleu = bleu_corpus(&outputs, &references, 4)?;
    let exact = outputs.iter().zip(&references).filter(|(a, b)| a == b).count();
    Ok(VariantScore {
        perplexity,
        bleu,
        exact_match: exact as f64 / pairs.len() as f64,
        outputs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub perplexity: f64,
    /// BLEU on the unit scale.
    pub bleu: f64,
    pub decode: String,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "model,perplexity,bleu,decode,dataset,seed";

/// Sorts rows by perplexity, lowest first.
pub fn report(mut rows: Vec<ReportRow>) -> Result<EvalReport> {
    if let Some(r) = rows.iter().find(|r| !r.perplexity.is_finite() || !r.bleu.is_finite()) {
        return Err(Error::Contract(format!("non-finite scores for {}", r.model)));
    }
    rows.sort_by(|a, b| a.perplexity.total_cmp(&b.perplexity).then_with(|| a.model.cmp(&b.model)));
    Ok(EvalReport { rows })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// BLEU ×100 with one decimal, e.g. 0.29612 → "29.6".
pub fn format_bleu(bleu: f64) -> String {
    format!("{:.1}", bleu * 100.0)
}

pub fn format_perplexity(ppl: f64) -> String {
    format!("{ppl:.3}")
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&r.model),
                format_perplexity(r.perplexity),
                format_bleu(r.bleu),
                csv_field(&r.decode),
                csv_field(&r.dataset),
                r.seed
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.model.clone(), format_perplexity(r.perplexity), format_bleu(r.bleu)])
            .collect();
        let header = ["Model".to_owned(), "Perplexity".to_owned(), "BLEU".to_owned()];
        let mut widths = header.clone().map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String; 3]| {
            format!("{:<w0$}  {:>w1$}  {:>w2$}\n", row[0], row[1], row[2], w0 = widths[0], w1 = widths[1], w2 = widths[2])
        };
        let mut out = line(&header);
        out.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 4)));
        for row in &cells {
            out.push_str(&line(row));
        }
        out
    }
}
