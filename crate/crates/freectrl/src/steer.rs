//! The steered generation loop: monitoring scores, weight adaptation,
//! token sampling, final filtering, and multi-attribute switching.
//!
//! Each step scores the sentence so far against every attribute, converts the
//! target's score gap into a steering weight through a logistic, applies that
//! weight uniformly to the control center, samples the next token, and
//! records everything in the trace. Finished sentences must beat the score
//! threshold or the attempt is rejected and redrawn.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlCenter;
use crate::error::{Error, Result};
use crate::lexicon::{cosine_relevance, AttributeLexicon};
use crate::model::{softmax_distribution, Model, OutputDistribution, SteeringSet};
use crate::tokenizer::BpeVocab;

/// Fallback sentence score when every competing attribute scores zero, which
/// leaves the ratio undefined. Large so the filter treats the sentence as
/// fully on-target; the step is flagged in the trace.
pub const ZERO_DENOMINATOR_SCORE: f64 = 1e9;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Softmax temperature; higher flattens the distribution.
    pub temperature: f32,
    /// Keep only the k most probable tokens before drawing.
    pub top_k: Option<usize>,
    /// Keep the smallest prefix of the distribution with at least this mass.
    pub top_p: Option<f64>,
    /// Argmax decoding; the random stream is left untouched.
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: None,
            greedy: false,
        }
    }
}

/// How the per-step weight is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum WeightMode {
    /// Logistic of (gap x sentence length): for a fixed positive gap the
    /// weight grows toward lambda as the sentence lengthens.
    AsPrinted,
    /// Negated exponent: the weight decays toward zero as the sentence
    /// lengthens, matching the reading that early steps need the push most.
    Decaying,
    /// Fixed weight every step, no monitoring gate. Ablation mode.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    /// Vectors located per keyword when centers are built.
    pub k: usize,
    /// Sentence-score threshold (the filter bound and the adaptation target).
    pub mu_threshold: f64,
    /// Scaling factor: the supremum of adaptive weights.
    pub lambda: f64,
    /// Profiling weight used when locating vectors.
    pub u_max: f32,
    pub max_new_tokens: usize,
    pub sampling: SamplingParams,
    /// Retry budget when the filter rejects a finished sentence.
    pub max_attempts: u32,
    pub weight_mode: WeightMode,
}

impl SteerConfig {
    /// Single-attribute topic control defaults.
    pub fn topic_single() -> Self {
        Self {
            k: 30,
            mu_threshold: 1.15,
            lambda: 1.5,
            u_max: 50.0,
            max_new_tokens: 64,
            sampling: SamplingParams::default(),
            max_attempts: 5,
            weight_mode: WeightMode::AsPrinted,
        }
    }

    /// Single-attribute sentiment and detoxification defaults.
    pub fn sentiment_single() -> Self {
        Self {
            lambda: 0.3,
            ..Self::topic_single()
        }
    }

    /// Multi-attribute defaults.
    pub fn multi() -> Self {
        Self {
            k: 200,
            mu_threshold: 1.1,
            lambda: 0.5,
            ..Self::topic_single()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if !(self.mu_threshold >= 0.0) {
            return Err(Error::invalid("mu threshold must be non-negative"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Monitoring score: mean over sentence tokens of the best cosine relevance
/// to any refined keyword of the attribute. Lives in [0, 1].
pub fn rho(model: &Model, sentence: &[u32], lexicon: &AttributeLexicon) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::invalid("cannot score an empty sentence"));
    }
    if lexicon.refined.is_empty() {
        return Err(Error::invalid(format!(
            "attribute {} has no refined keywords",
            lexicon.name
        )));
    }
    let mut sum = 0.0;
    for &token in sentence {
        sum += token_relevance(model, token, lexicon)?;
    }
    Ok(sum / sentence.len() as f64)
}

fn token_relevance(model: &Model, token: u32, lexicon: &AttributeLexicon) -> Result<f64> {
    let emb = model.embedding_of(token)?;
    let best = lexicon
        .refined
        .iter()
        .map(|kw| cosine_relevance(emb, kw.embedding.view()))
        .fold(0.0f64, f64::max);
    Ok(best)
}

/// Sentence score: the target's monitoring score over the mean of every
/// competitor's. Returns the score and whether the zero-denominator fallback
/// fired.
pub fn mu(rho_all: &[f64], target: usize) -> Result<(f64, bool)> {
    if rho_all.len() < 2 {
        return Err(Error::invalid("sentence score needs at least two attributes"));
    }
    if target >= rho_all.len() {
        return Err(Error::invalid(format!(
            "target index {target} out of range for {} attributes",
            rho_all.len()
        )));
    }
    if rho_all.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::invalid("monitoring scores must lie in [0, 1]"));
    }
    let denom: f64 = rho_all
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &r)| r)
        .sum();
    if denom == 0.0 {
        return Ok((ZERO_DENOMINATOR_SCORE, true));
    }
    Ok((rho_all[target] * (rho_all.len() - 1) as f64 / denom, false))
}

/// Weight for the next step. Zero exactly when the score already meets the
/// threshold; otherwise a logistic of the gap scaled by sentence length,
/// bounded by lambda. In float the logistic saturates to lambda once the
/// exponent underflows.
pub fn adapt_weight(mu_hat: f64, sentence_len: usize, cfg: &SteerConfig) -> Result<f64> {
    if sentence_len == 0 {
        return Err(Error::invalid("sentence length must be at least 1"));
    }
    let gap = cfg.mu_threshold - mu_hat;
    let omega = match cfg.weight_mode {
        WeightMode::Constant(w) => w,
        WeightMode::AsPrinted => {
            if gap > 0.0 {
                cfg.lambda / (1.0 + (-gap * sentence_len as f64).exp())
            } else {
                0.0
            }
        }
        WeightMode::Decaying => {
            if gap > 0.0 {
                cfg.lambda / (1.0 + (gap * sentence_len as f64).exp())
            } else {
                0.0
            }
        }
    };
    Ok(omega)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draws one token. Deterministic given the rng state. Top-k keeps the k most
/// probable tokens (ties to the lower id), nucleus keeps the smallest
/// highest-probability prefix reaching the target mass; both renormalize.
pub fn sample_token(
    dist: &OutputDistribution,
    params: &SamplingParams,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    if dist.is_empty() {
        return Err(Error::invalid("cannot sample from an empty distribution"));
    }
    if params.greedy {
        return Ok(dist.top_k(1)[0].0);
    }
    if let Some(k) = params.top_k {
        if k == 0 {
            return Err(Error::invalid("top-k must be at least 1"));
        }
    }
    if let Some(p) = params.top_p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid("top-p must lie in (0, 1]"));
        }
    }

    let mut ranked = dist.top_k(dist.len());
    if let Some(k) = params.top_k {
        ranked.truncate(k.max(1));
    }
    if let Some(p) = params.top_p {
        let mut mass = 0.0f64;
        let mut cut = ranked.len();
        for (i, &(_, q)) in ranked.iter().enumerate() {
            mass += q as f64;
            if mass >= p {
                cut = i + 1;
                break;
            }
        }
        ranked.truncate(cut);
    }

    let total: f64 = ranked.iter().map(|&(_, q)| q as f64).sum();
    let draw = rng.random::<f64>() * total;
    let mut acc = 0.0f64;
    for &(token, q) in &ranked {
        acc += q as f64;
        if draw < acc {
            return Ok(token);
        }
    }
    Ok(ranked.last().expect("non-empty after truncation").0)
}

// ---------------------------------------------------------------------------
// Traces and records
// ---------------------------------------------------------------------------

/// Everything observed at one generation step, keyed by attribute name where
/// per-attribute. `omega` holds the weights computed for each target; only
/// the active attribute's weight is applied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Sentence length (prompt plus generated) the scores were computed on.
    pub sentence_len: usize,
    pub rho: BTreeMap<String, f64>,
    pub mu: BTreeMap<String, f64>,
    pub last_token_mu: BTreeMap<String, f64>,
    pub mu_hat: BTreeMap<String, f64>,
    pub omega: BTreeMap<String, f64>,
    pub active: Option<String>,
    pub applied_omega: f64,
    pub token: u32,
    /// Set when the zero-denominator fallback fired for any score this step.
    pub score_flagged: bool,
}

/// Outcome of one generation job. `text` is the full sentence (prompt
/// included), which is also what the scores were computed over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub attributes: Vec<String>,
    pub text: String,
    pub accepted: bool,
    pub attempts: u32,
    pub final_mu: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

// ---------------------------------------------------------------------------
// The generation engine
// ---------------------------------------------------------------------------

/// Immutable generation context: model, tokenizer, every loaded lexicon
/// (competitors included), and the configuration.
pub struct Steerer<'a> {
    pub model: &'a Model,
    pub vocab: &'a BpeVocab,
    pub lexicons: &'a [AttributeLexicon],
    pub config: &'a SteerConfig,
}

/// Per-attribute incremental monitoring state: the running sum of per-token
/// best relevances, so sentence scores update in constant time per token.
struct Monitor {
    sums: Vec<f64>,
    last: Vec<f64>,
    len: usize,
}

impl Monitor {
    fn rho_all(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.len as f64).collect()
    }
}

impl<'a> Steerer<'a> {
    fn attribute_index(&self, name: &str) -> Result<usize> {
        self.lexicons
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown attribute {name}")))
    }

    fn push_token(&self, monitor: &mut Monitor, token: u32) -> Result<()> {
        for (i, lex) in self.lexicons.iter().enumerate() {
            let rel = token_relevance(self.model, token, lex)?;
            monitor.sums[i] += rel;
            monitor.last[i] = rel;
        }
        monitor.len += 1;
        Ok(())
    }

    fn monitor_for(&self, tokens: &[u32]) -> Result<Monitor> {
        let mut monitor = Monitor {
            sums: vec![0.0; self.lexicons.len()],
            last: vec![0.0; self.lexicons.len()],
            len: 0,
        };
        for &t in tokens {
            self.push_token(&mut monitor, t)?;
        }
        Ok(monitor)
    }

    fn validate_inputs(&self, targets: &[usize], centers: &[&ControlCenter]) -> Result<()> {
        self.config.validate()?;
        if self.lexicons.len() < 2 {
            return Err(Error::invalid(
                "generation needs at least two loaded attributes",
            ));
        }
        for (&t, center) in targets.iter().zip(centers) {
            if self.lexicons[t].refined.is_empty() {
                return Err(Error::invalid(format!(
                    "attribute {} has no refined keywords",
                    self.lexicons[t].name
                )));
            }
            if center.attribute != self.lexicons[t].name {
                return Err(Error::invalid(format!(
                    "center {} does not match attribute {}",
                    center.attribute, self.lexicons[t].name
                )));
            }
            if center.fingerprint != self.model.fingerprint() {
                return Err(Error::FingerprintMismatch {
                    expected: center.fingerprint.clone(),
                    got: self.model.fingerprint(),
                });
            }
            if center.is_empty() {
                return Err(Error::invalid(format!(
                    "center {} has no member vectors",
                    center.attribute
                )));
            }
        }
        Ok(())
    }

    /// Steered generation toward one attribute. Retries with fresh draws
    /// until the filter passes or the attempt budget runs out; a rejection
    /// carries the best-scoring failed attempt.
    pub fn generate_single(
        &self,
        prompt: &str,
        target: &str,
        center: &ControlCenter,
        rng: &mut ChaCha8Rng,
        keep_trace: bool,
    ) -> Result<GenerationRecord> {
        self.generate_multi(prompt, &[target], &[center], rng, keep_trace)
    }

    /// Steered generation toward several attributes. At every step the
    /// computed weights compete and only the highest one's center is applied
    /// (declaration order wins ties). The filter must pass for every target.
    pub fn generate_multi(
        &self,
        prompt: &str,
        targets: &[&str],
        centers: &[&ControlCenter],
        rng: &mut ChaCha8Rng,
        keep_trace: bool,
    ) -> Result<GenerationRecord> {
        if targets.is_empty() {
            return Err(Error::invalid("no target attributes given"));
        }
        if targets.len() != centers.len() {
            return Err(Error::invalid(format!(
                "{} targets but {} centers",
                targets.len(),
                centers.len()
            )));
        }
        let target_idx: Vec<usize> = targets
            .iter()
            .map(|t| self.attribute_index(t))
            .collect::<Result<_>>()?;
        self.validate_inputs(&target_idx, centers)?;

        let prompt_tokens = self.vocab.encode(prompt);
        if prompt_tokens.is_empty() {
            return Err(Error::invalid("prompt encodes to no tokens"));
        }
        let prompt_monitor = self.monitor_for(&prompt_tokens)?;

        let mut best: Option<GenerationRecord> = None;
        for attempt in 1..=self.config.max_attempts {
            let record = self.run_attempt(
                prompt,
                &prompt_tokens,
                &prompt_monitor,
                &target_idx,
                centers,
                rng,
                keep_trace,
                attempt,
            )?;
            if record.accepted {
                return Ok(record);
            }
            let better = match &best {
                None => true,
                Some(b) => worst_target_mu(&record) > worst_target_mu(b),
            };
            if better {
                best = Some(record);
            }
        }
        let mut rejected = best.expect("at least one attempt ran");
        rejected.attempts = self.config.max_attempts;
        Ok(rejected)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_attempt(
        &self,
        prompt: &str,
        prompt_tokens: &[u32],
        prompt_monitor: &Monitor,
        target_idx: &[usize],
        centers: &[&ControlCenter],
        rng: &mut ChaCha8Rng,
        keep_trace: bool,
        attempt: u32,
    ) -> Result<GenerationRecord> {
        let eot = self.vocab.end_of_text_id();
        let mut monitor = Monitor {
            sums: prompt_monitor.sums.clone(),
            last: prompt_monitor.last.clone(),
            len: prompt_monitor.len,
        };
        let mut tokens: Vec<u32> = prompt_tokens.to_vec();
        let mut cache = self.model.new_cache();
        let mut pending: Vec<u32> = prompt_tokens.to_vec();
        let mut trace: Vec<StepTrace> = Vec::new();

        let positions_left = self
            .model
            .config()
            .max_positions
            .checked_sub(prompt_tokens.len())
            .ok_or_else(|| Error::invalid("prompt exceeds the model's position limit"))?;
        let budget = self.config.max_new_tokens.min(positions_left);
        if budget == 0 {
            return Err(Error::invalid("no positions left to generate into"));
        }

        for step in 1..=budget {
            let l_t = monitor.len;
            let rho_all = monitor.rho_all();

            let mut omegas = Vec::with_capacity(target_idx.len());
            let mut step_flagged = false;
            let mut rho_map = BTreeMap::new();
            let mut mu_map = BTreeMap::new();
            let mut last_mu_map = BTreeMap::new();
            let mut mu_hat_map = BTreeMap::new();
            let mut omega_map = BTreeMap::new();
            for (i, lex) in self.lexicons.iter().enumerate() {
                rho_map.insert(lex.name.clone(), rho_all[i]);
                let (mu_i, fl) = mu(&rho_all, i)?;
                step_flagged |= fl && target_idx.contains(&i);
                mu_map.insert(lex.name.clone(), mu_i);
            }
            for &t in target_idx {
                let name = &self.lexicons[t].name;
                let (mu_t, _) = mu(&rho_all, t)?;
                let (mu_last, fl_last) = mu(&monitor.last, t)?;
                step_flagged |= fl_last;
                let mu_hat = mu_t.max(mu_last);
                let omega = adapt_weight(mu_hat, l_t, self.config)?;
                last_mu_map.insert(name.clone(), mu_last);
                mu_hat_map.insert(name.clone(), mu_hat);
                omega_map.insert(name.clone(), omega);
                omegas.push(omega);
            }

            // highest weight wins; earlier declaration wins exact ties
            let (active_pos, &active_omega) = omegas
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .expect("at least one target");
            let (steering, active_name) = if active_omega > 0.0 {
                (
                    centers[active_pos].steering_set(active_omega as f32),
                    Some(self.lexicons[target_idx[active_pos]].name.clone()),
                )
            } else {
                (SteeringSet::new(), None)
            };

            let logits = self.model.forward_cached(&mut cache, &pending, &steering)?;
            pending.clear();
            let dist = softmax_distribution(
                logits.as_slice().expect("contiguous logits"),
                self.config.sampling.temperature,
            )?;
            let token = sample_token(&dist, &self.config.sampling, rng)?;

            if Some(token) == eot {
                break;
            }

            if keep_trace {
                trace.push(StepTrace {
                    step,
                    sentence_len: l_t,
                    rho: rho_map,
                    mu: mu_map,
                    last_token_mu: last_mu_map,
                    mu_hat: mu_hat_map,
                    omega: omega_map,
                    active: active_name,
                    applied_omega: if active_omega > 0.0 { active_omega } else { 0.0 },
                    token,
                    score_flagged: step_flagged,
                });
            }

            tokens.push(token);
            pending.push(token);
            self.push_token(&mut monitor, token)?;
        }

        // final screening scores the canonical tokenization of the finished
        // sentence, so re-scoring a saved record reproduces the decision
        let text = self.vocab.decode(&tokens);
        let canonical = self.vocab.encode(&text);
        let final_monitor = self.monitor_for(&canonical)?;
        let rho_final = final_monitor.rho_all();
        let mut final_mu = BTreeMap::new();
        let mut accepted = true;
        for &t in target_idx {
            let (mu_t, _) = mu(&rho_final, t)?;
            final_mu.insert(self.lexicons[t].name.clone(), mu_t);
            accepted &= mu_t > self.config.mu_threshold;
        }

        Ok(GenerationRecord {
            prompt: prompt.to_string(),
            attributes: target_idx
                .iter()
                .map(|&t| self.lexicons[t].name.clone())
                .collect(),
            text,
            accepted,
            attempts: attempt,
            final_mu,
            trace: keep_trace.then_some(trace),
            elapsed_ms: None,
        })
    }
}

fn worst_target_mu(record: &GenerationRecord) -> f64 {
    record
        .final_mu
        .values()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cfg() -> SteerConfig {
        SteerConfig::topic_single()
    }

    #[test]
    fn equal_scores_give_unit_sentence_score() {
        let (m, flagged) = mu(&[0.4, 0.4, 0.4], 1).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        assert!(!flagged);
    }

    #[test]
    fn sentence_score_direct_evaluation() {
        // target 0.6 against competitors 0.2 and 0.4: 0.6 * 2 / 0.6
        let (m, _) = mu(&[0.6, 0.2, 0.4], 0).unwrap();
        assert!((m - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sentence_score_is_scale_invariant() {
        let base = [0.2, 0.1, 0.3];
        let scaled: Vec<f64> = base.iter().map(|r| r * 3.0).collect();
        // keep inputs in range by scaling down instead
        let shrunk: Vec<f64> = base.iter().map(|r| r / 3.0).collect();
        let (m0, _) = mu(&base, 0).unwrap();
        let (m1, _) = mu(&shrunk, 0).unwrap();
        assert!((m0 - m1).abs() < 1e-12);
        assert!(scaled.iter().all(|&r| r <= 1.0));
        let (m2, _) = mu(&scaled, 0).unwrap();
        assert!((m0 - m2).abs() < 1e-12);
    }

    #[test]
    fn zero_competitors_fall_back_to_sentinel() {
        let (m, flagged) = mu(&[0.5, 0.0, 0.0], 0).unwrap();
        assert_eq!(m, ZERO_DENOMINATOR_SCORE);
        assert!(flagged);
    }

    #[test]
    fn sentence_score_rejects_out_of_range_inputs() {
        assert!(mu(&[1.5, 0.2], 0).is_err());
        assert!(mu(&[0.5], 0).is_err());
        assert!(mu(&[0.5, 0.2], 7).is_err());
    }

    #[test]
    fn weight_is_zero_once_threshold_is_met() {
        let omega = adapt_weight(1.3, 4, &cfg()).unwrap();
        assert_eq!(omega, 0.0);
        // exactly at the threshold the gap is zero, not positive
        let omega = adapt_weight(1.15, 4, &cfg()).unwrap();
        assert_eq!(omega, 0.0);
    }

    #[test]
    fn weight_direct_evaluation() {
        // gap 0.2 over three tokens: lambda / (1 + exp(-0.6))
        let omega = adapt_weight(0.95, 3, &cfg()).unwrap();
        let oracle = 1.5 / (1.0 + (-0.2f64 * 3.0).exp());
        assert_eq!(omega, oracle);
        assert!((omega - 0.968_485_3).abs() < 1e-6);
    }

    #[test]
    fn weight_approaches_lambda_for_long_sentences() {
        let omega = adapt_weight(0.95, 10_000, &cfg()).unwrap();
        assert!((omega - 1.5).abs() < 1e-9);
    }

    #[test]
    fn decaying_mode_shrinks_with_length() {
        let mut c = cfg();
        c.weight_mode = WeightMode::Decaying;
        let short = adapt_weight(0.95, 2, &c).unwrap();
        let long = adapt_weight(0.95, 50, &c).unwrap();
        assert!(short > long);
        assert!(long >= 0.0);
    }

    #[test]
    fn constant_mode_ignores_scores() {
        let mut c = cfg();
        c.weight_mode = WeightMode::Constant(1.5);
        assert_eq!(adapt_weight(0.2, 3, &c).unwrap(), 1.5);
        assert_eq!(adapt_weight(99.0, 3, &c).unwrap(), 1.5);
    }

    proptest! {
        #[test]
        fn weight_branch_structure(mu_hat in 0.0f64..3.0, len in 1usize..200) {
            let c = cfg();
            let omega = adapt_weight(mu_hat, len, &c).unwrap();
            prop_assert!(omega >= 0.0 && omega <= c.lambda);
            let gap = c.mu_threshold - mu_hat;
            prop_assert_eq!(omega == 0.0, gap <= 0.0);
        }

        #[test]
        fn weight_grows_with_the_gap(len in 1usize..100, lo in 0.0f64..0.5, delta in 0.01f64..0.5) {
            let c = cfg();
            // larger gap means smaller mu_hat
            let small_gap = adapt_weight(c.mu_threshold - lo, len, &c).unwrap();
            let big_gap = adapt_weight(c.mu_threshold - lo - delta, len, &c).unwrap();
            if lo > 0.0 {
                prop_assert!(big_gap >= small_gap);
            }
        }

        #[test]
        fn scaling_all_scores_preserves_mu(rhos in prop::collection::vec(0.01f64..=1.0, 2..6), c in 0.1f64..1.0) {
            let scaled: Vec<f64> = rhos.iter().map(|r| r * c).collect();
            let (m0, _) = mu(&rhos, 0).unwrap();
            let (m1, _) = mu(&scaled, 0).unwrap();
            prop_assert!((m0 - m1).abs() < 1e-9);
        }
    }

    fn toy_distribution(probs: &[f32]) -> OutputDistribution {
        let logits: Vec<f32> = probs.iter().map(|p| p.ln()).collect();
        softmax_distribution(&logits, 1.0).unwrap()
    }

    #[test]
    fn greedy_picks_the_argmax() {
        let dist = toy_distribution(&[0.1, 0.6, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = SamplingParams {
            greedy: true,
            ..Default::default()
        };
        assert_eq!(sample_token(&dist, &params, &mut rng).unwrap(), 1);
    }

    #[test]
    fn top_k_one_picks_the_argmax() {
        let dist = toy_distribution(&[0.25, 0.15, 0.6]);
        let params = SamplingParams {
            top_k: Some(1),
            ..Default::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_token(&dist, &params, &mut rng).unwrap(), 2);
        }
    }

    /// Independent nucleus draw: sort descending, cut at the mass bound,
    /// renormalize, inverse-cdf with the same stream.
    fn reference_nucleus_draw(probs: &[f32], p: f64, seed: u64) -> u32 {
        let mut ranked: Vec<(u32, f32)> = probs.iter().enumerate().map(|(i, &q)| (i as u32, q)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut mass = 0.0f64;
        let mut kept = Vec::new();
        for (t, q) in ranked {
            kept.push((t, q));
            mass += q as f64;
            if mass >= p {
                break;
            }
        }
        let total: f64 = kept.iter().map(|&(_, q)| q as f64).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for &(t, q) in &kept {
            acc += q as f64;
            if draw < acc {
                return t;
            }
        }
        kept.last().unwrap().0
    }

    #[test]
    fn nucleus_matches_reference_sampler() {
        let dist = toy_distribution(&[0.05, 0.3, 0.02, 0.4, 0.13, 0.1]);
        let params = SamplingParams {
            top_p: Some(0.9),
            ..Default::default()
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = sample_token(&dist, &params, &mut rng).unwrap();
            let want = reference_nucleus_draw(dist.probs(), 0.9, seed);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn degenerate_sampling_parameters_are_errors() {
        let dist = toy_distribution(&[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad_k = SamplingParams {
            top_k: Some(0),
            ..Default::default()
        };
        assert!(sample_token(&dist, &bad_k, &mut rng).is_err());
        let bad_p = SamplingParams {
            top_p: Some(0.0),
            ..Default::default()
        };
        assert!(sample_token(&dist, &bad_p, &mut rng).is_err());
        let bad_p2 = SamplingParams {
            top_p: Some(1.5),
            ..Default::default()
        };
        assert!(sample_token(&dist, &bad_p2, &mut rng).is_err());
    }
}
