//! Attribute keyword lexicons: file ingestion, relevance-based refinement,
//! and the keyword embeddings used by monitoring and scoring.
//!
//! A keyword is kept when its relevance to its own attribute beats the mean
//! relevance to every competing attribute. Relevance is the cosine similarity
//! between the keyword embedding (mean of sub-token input embeddings, unit
//! normalized) and the attribute's anchor embedding.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{BpeVocab, PositionHint};

/// Cosine similarity floored at zero, so relevance lives in [0, 1] for unit
/// vectors. Accumulated in f64.
pub fn cosine_relevance(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).max(0.0)
}

/// The refinement kernel: target relevance scaled by the inverse mean of the
/// competing relevances. `None` when every competing relevance is zero.
pub fn g_score(r_target: f64, r_others: &[f64]) -> Option<f64> {
    let denom: f64 = r_others.iter().sum();
    if denom == 0.0 {
        return None;
    }
    Some(r_target * r_others.len() as f64 / denom)
}

/// How the attribute anchor embedding is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Embedding of the attribute's name word.
    #[default]
    NameWord,
    /// Normalized centroid of the raw keyword embeddings.
    Centroid,
}

/// One keyword that survived refinement.
#[derive(Debug, Clone)]
pub struct RefinedKeyword {
    pub keyword: String,
    /// Refinement score; at least one except for flagged keywords.
    pub score: f64,
    /// Set when every competing relevance was zero, which leaves the score
    /// undefined; the keyword is kept and marked.
    pub flagged: bool,
    /// Unit-normalized mean of sub-token embeddings (leading-space form).
    pub embedding: Array1<f32>,
    /// Full sub-token split of the leading-space form.
    pub token_ids: Vec<u32>,
}

/// Per-keyword refinement outcome for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRecord {
    pub attribute: String,
    pub keyword: String,
    pub score: Option<f64>,
    pub kept: bool,
    pub flagged: bool,
}

/// An attribute with its raw keywords and, after refinement, the kept
/// keywords with their embeddings.
#[derive(Debug, Clone)]
pub struct AttributeLexicon {
    pub name: String,
    pub raw_keywords: Vec<String>,
    pub refined: Vec<RefinedKeyword>,
    pub anchor: Option<Array1<f32>>,
}

impl AttributeLexicon {
    pub fn new(name: impl Into<String>, keywords: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = keywords
            .into_iter()
            .map(|k| k.trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        Self {
            name: name.into().trim().to_lowercase(),
            raw_keywords: set.into_iter().collect(),
            refined: Vec::new(),
            anchor: None,
        }
    }

    pub fn is_refined(&self) -> bool {
        !self.refined.is_empty()
    }

    pub fn refined_keywords(&self) -> impl Iterator<Item = &str> {
        self.refined.iter().map(|k| k.keyword.as_str())
    }

    /// Removes another lexicon's keywords from this one's raw set. Used to
    /// keep excluded vocabulary (for example toxic terms) out of a control
    /// lexicon before refinement.
    pub fn subtract_keywords(&mut self, other: &AttributeLexicon) {
        let drop: BTreeSet<&str> = other.raw_keywords.iter().map(String::as_str).collect();
        self.raw_keywords.retain(|k| !drop.contains(k.as_str()));
    }
}

fn parse_json_lexicons(text: &str, origin: &Path) -> Result<Vec<AttributeLexicon>> {
    let map: std::collections::BTreeMap<String, Vec<String>> = serde_json::from_str(text)
        .map_err(|e| Error::invalid(format!("{}: {e}", origin.display())))?;
    Ok(map
        .into_iter()
        .map(|(name, kws)| AttributeLexicon::new(name, kws))
        .collect())
}

/// Loads attribute lexicons. A `.json` file holds an object mapping attribute
/// names to keyword arrays; any other file is one keyword per line with the
/// attribute named by the file stem. At least two attributes are required,
/// since refinement and scoring are relative to competing attributes.
pub fn load_lexicons(paths: &[impl AsRef<Path>]) -> Result<Vec<AttributeLexicon>> {
    let mut lexicons: Vec<AttributeLexicon> = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if text.trim().is_empty() {
            return Err(Error::invalid(format!(
                "lexicon file {} is empty",
                path.display()
            )));
        }
        let mut parsed = if path.extension().is_some_and(|e| e == "json") {
            parse_json_lexicons(&text, path)?
        } else {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("cannot name lexicon {}", path.display())))?;
            vec![AttributeLexicon::new(
                name,
                text.lines().map(str::to_string),
            )]
        };
        for lex in &parsed {
            if lex.raw_keywords.is_empty() {
                return Err(Error::invalid(format!(
                    "attribute {} has no keywords",
                    lex.name
                )));
            }
            if lexicons.iter().any(|l| l.name == lex.name) {
                return Err(Error::invalid(format!("duplicate attribute {}", lex.name)));
            }
        }
        lexicons.append(&mut parsed);
    }
    if lexicons.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two attributes, got {}",
            lexicons.len()
        )));
    }
    Ok(lexicons)
}

/// Unit-normalized keyword embedding: sub-token input embeddings of the
/// leading-space form, mean-pooled.
pub fn keyword_embedding(model: &Model, vocab: &BpeVocab, keyword: &str) -> Result<Array1<f32>> {
    let ids = vocab.keyword_token_ids(keyword, PositionHint::WordInitial)?;
    pooled_embedding(model, &ids)
}

pub(crate) fn pooled_embedding(model: &Model, ids: &[u32]) -> Result<Array1<f32>> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot embed an empty token sequence"));
    }
    let d = model.config().d_model;
    let mut sum = Array1::<f32>::zeros(d);
    for &id in ids {
        sum += &model.embedding_of(id)?;
    }
    let mut mean = sum / ids.len() as f32;
    let norm = mean.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid(
            "token embedding pooled to the zero vector; cannot normalize",
        ));
    }
    mean.mapv_inplace(|v| (v as f64 / norm) as f32);
    Ok(mean)
}

/// Computes anchors and keyword embeddings for every lexicon. Must run before
/// `refine`.
pub fn compute_embeddings(
    lexicons: &mut [AttributeLexicon],
    model: &Model,
    vocab: &BpeVocab,
    anchor_mode: AnchorMode,
) -> Result<()> {
    for lex in lexicons.iter_mut() {
        lex.refined = lex
            .raw_keywords
            .iter()
            .map(|kw| -> Result<RefinedKeyword> {
                let token_ids = vocab.keyword_token_ids(kw, PositionHint::WordInitial)?;
                let embedding = pooled_embedding(model, &token_ids)?;
                Ok(RefinedKeyword {
                    keyword: kw.clone(),
                    score: 0.0,
                    flagged: false,
                    embedding,
                    token_ids,
                })
            })
            .collect::<Result<_>>()?;

        lex.anchor = Some(match anchor_mode {
            AnchorMode::NameWord => keyword_embedding(model, vocab, &lex.name)?,
            AnchorMode::Centroid => {
                let d = model.config().d_model;
                let mut sum = Array1::<f32>::zeros(d);
                for kw in &lex.refined {
                    sum += &kw.embedding;
                }
                let norm = sum.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid(format!(
                        "attribute {} centroid is the zero vector",
                        lex.name
                    )));
                }
                sum.mapv_inplace(|v| (v as f64 / norm) as f32);
                sum
            }
        });
    }
    Ok(())
}

/// Filters every lexicon's keywords by the refinement score, keeping those
/// at least as relevant to their own attribute as to the average competitor.
/// Keywords whose competing relevances are all zero are kept and flagged.
/// Returns one record per raw keyword for reporting.
pub fn refine(lexicons: &mut [AttributeLexicon]) -> Result<Vec<RefineRecord>> {
    if lexicons.len() < 2 {
        return Err(Error::invalid("refinement needs at least two attributes"));
    }
    if lexicons.iter().any(|l| l.anchor.is_none()) {
        return Err(Error::invalid(
            "embeddings must be computed before refinement",
        ));
    }

    let anchors: Vec<Array1<f32>> = lexicons
        .iter()
        .map(|l| l.anchor.clone().expect("anchor computed"))
        .collect();

    let mut records = Vec::new();
    for i in 0..lexicons.len() {
        // survivors of an earlier pass re-score identically, so a second
        // refinement is a no-op
        let mut candidates: Vec<RefinedKeyword> = std::mem::take(&mut lexicons[i].refined);
        let mut kept = Vec::with_capacity(candidates.len());
        for mut kw in candidates.drain(..) {
            let r_target = cosine_relevance(kw.embedding.view(), anchors[i].view());
            let r_others: Vec<f64> = (0..lexicons.len())
                .filter(|&j| j != i)
                .map(|j| cosine_relevance(kw.embedding.view(), anchors[j].view()))
                .collect();
            match g_score(r_target, &r_others) {
                Some(score) => {
                    let keep = score >= 1.0;
                    records.push(RefineRecord {
                        attribute: lexicons[i].name.clone(),
                        keyword: kw.keyword.clone(),
                        score: Some(score),
                        kept: keep,
                        flagged: false,
                    });
                    if keep {
                        kw.score = score;
                        kept.push(kw);
                    }
                }
                None => {
                    records.push(RefineRecord {
                        attribute: lexicons[i].name.clone(),
                        keyword: kw.keyword.clone(),
                        score: None,
                        kept: true,
                        flagged: true,
                    });
                    kw.score = f64::INFINITY;
                    kw.flagged = true;
                    kept.push(kw);
                }
            }
        }
        lexicons[i].refined = kept;
    }
    Ok(records)
}

/// Renders the refined sets back into the JSON lexicon format.
pub fn export_refined(lexicons: &[AttributeLexicon]) -> serde_json::Value {
    let map: std::collections::BTreeMap<&str, Vec<&str>> = lexicons
        .iter()
        .map(|l| (l.name.as_str(), l.refined_keywords().collect()))
        .collect();
    serde_json::json!(map)
}
