//! Evaluation harness: n-gram diversity, self-perplexity under the loaded
//! model, embedding-based attribute relevance, and an optional remote
//! toxicity scorer.

pub mod toxicity;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::AttributeLexicon;
use crate::model::Model;
use crate::steer::{mu, rho, GenerationRecord};
use crate::tokenizer::BpeVocab;

/// How texts are pooled when computing distinct n-gram ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistAggregation {
    /// Ratio per text, averaged over texts.
    #[default]
    PerTextMean,
    /// One ratio over the concatenated corpus counts.
    CorpusPooled,
}

/// Distinct n-gram ratio over whitespace words. Texts shorter than `n` words
/// contribute nothing; it is an error if every text is too short.
pub fn dist_n(texts: &[impl AsRef<str>], n: usize, aggregation: DistAggregation) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::invalid("dist-n needs at least one text"));
    }
    if n == 0 {
        return Err(Error::invalid("dist-n needs n >= 1"));
    }

    let mut per_text = Vec::new();
    let mut pooled_unique: HashSet<Vec<&str>> = HashSet::new();
    let mut pooled_total = 0usize;
    for text in texts {
        let words: Vec<&str> = text.as_ref().split_whitespace().collect();
        if words.len() < n {
            continue;
        }
        let grams: Vec<Vec<&str>> = words.windows(n).map(|w| w.to_vec()).collect();
        let unique: HashSet<&Vec<&str>> = grams.iter().collect();
        per_text.push(unique.len() as f64 / grams.len() as f64);
        pooled_total += grams.len();
        pooled_unique.extend(grams.iter().cloned());
    }
    if per_text.is_empty() {
        return Err(Error::invalid(format!(
            "every text is shorter than {n} words"
        )));
    }
    Ok(match aggregation {
        DistAggregation::PerTextMean => per_text.iter().sum::<f64>() / per_text.len() as f64,
        DistAggregation::CorpusPooled => pooled_unique.len() as f64 / pooled_total as f64,
    })
}

/// Perplexity of a text under the unsteered model: the exponential of the
/// mean negative log-likelihood of each token given its prefix. The first
/// token is conditioned on, not scored.
pub fn self_perplexity(model: &Model, vocab: &BpeVocab, text: &str) -> Result<f64> {
    let tokens = vocab.encode(text);
    self_perplexity_of_tokens(model, &tokens)
}

pub fn self_perplexity_of_tokens(model: &Model, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::invalid(format!(
            "perplexity needs at least two tokens, got {}",
            tokens.len()
        )));
    }
    let mut cache = model.new_cache();
    let empty = crate::model::SteeringSet::new();
    let mut nll_sum = 0.0f64;
    for i in 0..tokens.len() - 1 {
        let logits = model.forward_cached(&mut cache, &tokens[i..=i], &empty)?;
        let slice = logits.as_slice().expect("contiguous logits");
        let next = tokens[i + 1] as usize;
        // log-softmax in f64 for a stable sum
        let max = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let log_z = slice
            .iter()
            .map(|&v| ((v as f64) - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        nll_sum -= slice[next] as f64 - log_z;
    }
    Ok((nll_sum / (tokens.len() - 1) as f64).exp())
}

/// Relevance outcome for one attribute's records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttributeOutcome {
    pub records: usize,
    /// Mean sentence score of the records targeting this attribute.
    pub mean_mu: f64,
    /// Fraction of records whose target score beats every competitor's.
    pub dominant_fraction: f64,
}

/// Re-scores generated texts against every lexicon and reports per-attribute
/// means and dominance fractions.
pub fn attribute_report(
    records: &[GenerationRecord],
    model: &Model,
    vocab: &BpeVocab,
    lexicons: &[AttributeLexicon],
) -> Result<BTreeMap<String, AttributeOutcome>> {
    if records.is_empty() {
        return Err(Error::invalid("attribute report needs at least one record"));
    }
    if lexicons.len() < 2 {
        return Err(Error::invalid("attribute report needs at least two lexicons"));
    }

    let mut sums: BTreeMap<String, (usize, f64, usize)> = BTreeMap::new();
    for record in records {
        let tokens = vocab.encode(&record.text);
        if tokens.is_empty() {
            return Err(Error::invalid("record text encodes to no tokens"));
        }
        let rho_all: Vec<f64> = lexicons
            .iter()
            .map(|lex| rho(model, &tokens, lex))
            .collect::<Result<_>>()?;
        for target_name in &record.attributes {
            let target = lexicons
                .iter()
                .position(|l| &l.name == target_name)
                .ok_or_else(|| Error::invalid(format!("unknown attribute {target_name}")))?;
            let (mu_target, _) = mu(&rho_all, target)?;
            let dominant = (0..lexicons.len())
                .filter(|&j| j != target)
                .all(|j| mu_target > mu(&rho_all, j).expect("same inputs").0);
            let entry = sums.entry(target_name.clone()).or_insert((0, 0.0, 0));
            entry.0 += 1;
            entry.1 += mu_target;
            entry.2 += dominant as usize;
        }
    }

    Ok(sums
        .into_iter()
        .map(|(name, (count, mu_sum, dom))| {
            (
                name,
                AttributeOutcome {
                    records: count,
                    mean_mu: mu_sum / count as f64,
                    dominant_fraction: dom as f64 / count as f64,
                },
            )
        })
        .collect())
}

/// Summary of an evaluation run over a set of generation records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub acceptance_rate: f64,
    pub attribute_relevance: BTreeMap<String, AttributeOutcome>,
    pub mean_perplexity: Option<f64>,
    pub dist_1: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    /// Mean wall-clock seconds per valid (accepted) output; present only when
    /// the records carry timing.
    pub mean_seconds_per_valid: Option<f64>,
}

/// Computes the full report. Perplexity is the expensive part and can be
/// switched off.
pub fn evaluate(
    records: &[GenerationRecord],
    model: &Model,
    vocab: &BpeVocab,
    lexicons: &[AttributeLexicon],
    aggregation: DistAggregation,
    with_perplexity: bool,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("evaluation needs at least one record"));
    }
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let accepted = records.iter().filter(|r| r.accepted).count();

    let mean_perplexity = if with_perplexity {
        let mut sum = 0.0;
        let mut counted = 0usize;
        for text in &texts {
            let tokens = vocab.encode(text);
            if tokens.len() >= 2 {
                sum += self_perplexity_of_tokens(model, &tokens)?;
                counted += 1;
            }
        }
        (counted > 0).then(|| sum / counted as f64)
    } else {
        None
    };

    let timing: Vec<u64> = records.iter().filter_map(|r| r.elapsed_ms).collect();
    let mean_seconds_per_valid = if timing.len() == records.len() && accepted > 0 {
        Some(timing.iter().sum::<u64>() as f64 / 1000.0 / accepted as f64)
    } else {
        None
    };

    Ok(EvalReport {
        records: records.len(),
        acceptance_rate: accepted as f64 / records.len() as f64,
        attribute_relevance: attribute_report(records, model, vocab, lexicons)?,
        mean_perplexity,
        dist_1: dist_n(&texts, 1, aggregation)?,
        dist_2: dist_n(&texts, 2, aggregation)?,
        dist_3: dist_n(&texts, 3, aggregation)?,
        mean_seconds_per_valid,
    })
}

/// Reads newline-delimited generation records.
pub fn read_records_jsonl(path: impl AsRef<std::path::Path>) -> Result<Vec<GenerationRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes newline-delimited generation records.
pub fn write_records_jsonl(
    path: impl AsRef<std::path::Path>,
    records: &[GenerationRecord],
) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
