//! Decoder-only transformer (GPT-2 layout) with additive value-vector
//! steering hooks.
//!
//! The feedforward block of every layer is a key-value memory: the second
//! projection matrix stores one value vector per row, and the activated first
//! projection produces the coefficient that weights each row. Steering adds
//! `u * v` for selected rows to the feedforward output before the residual
//! addition, so an empty steering set is a strict no-op and the steered minus
//! baseline difference is exactly the weighted vector sum.

mod checkpoint;
mod nn;

pub use checkpoint::{load_checkpoint, save_checkpoint, RawCheckpoint};

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use nn::BlockTrace;
pub(crate) use nn::{gelu, Block, LayerNorm};

/// Shape of a loaded model. Derived from checkpoint tensor shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Total number of value vectors across all layers.
    pub fn value_vector_count(&self) -> usize {
        self.n_layers * self.d_ffn
    }

    /// Stable hash of the configuration, used to bind persisted artifacts
    /// (atlases, control centers) to the model they were built from.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "layers={};d_model={};d_ffn={};heads={};vocab={};positions={}",
            self.n_layers, self.d_model, self.d_ffn, self.n_heads, self.vocab_size, self.max_positions
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Address of one value vector: a row of one layer's second feedforward
/// projection. Layers are numbered from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueVectorRef {
    pub layer: usize,
    pub row: usize,
}

impl ValueVectorRef {
    pub const fn new(layer: usize, row: usize) -> Self {
        Self { layer, row }
    }
}

impl fmt::Display for ValueVectorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.row)
    }
}

/// Scalar weights applied to value vectors during a forward pass. Empty means
/// an unmodified pass; zero-weight entries are skipped entirely so they never
/// perturb the computation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SteeringSet {
    entries: BTreeMap<ValueVectorRef, f32>,
}

impl SteeringSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(vector: ValueVectorRef, weight: f32) -> Self {
        let mut set = Self::new();
        set.insert(vector, weight);
        set
    }

    /// One uniform weight over many vectors.
    pub fn uniform<I: IntoIterator<Item = ValueVectorRef>>(vectors: I, weight: f32) -> Self {
        let mut set = Self::new();
        for v in vectors {
            set.insert(v, weight);
        }
        set
    }

    pub fn insert(&mut self, vector: ValueVectorRef, weight: f32) {
        self.entries.insert(vector, weight);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ValueVectorRef, &f32)> {
        self.entries.iter()
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (vref, &w) in &self.entries {
            if vref.layer >= config.n_layers || vref.row >= config.d_ffn {
                return Err(Error::VectorOutOfRange {
                    layer: vref.layer,
                    row: vref.row,
                    n_layers: config.n_layers,
                    d_ffn: config.d_ffn,
                });
            }
            if !w.is_finite() {
                return Err(Error::invalid(format!(
                    "steering weight for {vref} is not finite"
                )));
            }
            if w < 0.0 {
                return Err(Error::invalid(format!(
                    "steering weight for {vref} is negative ({w})"
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<(ValueVectorRef, f32)> for SteeringSet {
    fn from_iter<T: IntoIterator<Item = (ValueVectorRef, f32)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// A next-token probability distribution over the full vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDistribution {
    probs: Vec<f32>,
}

impl OutputDistribution {
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: u32) -> f32 {
        self.probs[token as usize]
    }

    /// Token ids ranked by descending probability; equal probabilities are
    /// ordered by ascending id so rankings are reproducible.
    pub fn top_k(&self, k: usize) -> Vec<(u32, f32)> {
        let mut ranked: Vec<(u32, f32)> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as u32, p))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    /// Set of the top-k token ids (unordered).
    pub fn top_k_set(&self, k: usize) -> std::collections::BTreeSet<u32> {
        self.top_k(k).into_iter().map(|(t, _)| t).collect()
    }
}

/// Converts logits into a probability distribution at the given temperature.
/// Temperature 1 reproduces the model distribution; larger values flatten it.
pub fn softmax_distribution(logits: &[f32], temperature: f32) -> Result<OutputDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("cannot softmax an empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits contain a non-finite value"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut probs: Vec<f32> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f32 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(OutputDistribution { probs })
}

/// Attention key/value cache for incremental decoding. Steering weights can
/// change between steps; each new position is processed under the weights in
/// effect at its step.
pub struct KvCache {
    keys: Vec<Array2<f32>>,
    values: Vec<Array2<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Baseline per-layer activations for a fixed prompt, captured once so that
/// single-vector steered passes can restart at the steered layer instead of
/// recomputing the whole prefix. Resuming is bit-identical to a full steered
/// forward because the junction summands are reused unchanged.
pub struct PrefixStates {
    traces: Vec<BlockTrace>,
    n_positions: usize,
}

/// The loaded transformer. Weights are immutable after load; every forward
/// pass owns its own activation buffers, so a single instance can be shared
/// freely across threads.
#[derive(Debug)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) wte: Array2<f32>,
    pub(crate) wpe: Array2<f32>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNorm,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Row of the input embedding matrix for one token.
    pub fn embedding_of(&self, token: u32) -> Result<ArrayView1<'_, f32>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(self.wte.row(token as usize))
    }

    /// The value vector addressed by `vref`.
    pub fn value_vector(&self, vref: ValueVectorRef) -> Result<ArrayView1<'_, f32>> {
        self.check_vref(vref)?;
        Ok(self.blocks[vref.layer].mlp.c_proj_w.row(vref.row))
    }

    /// First feedforward projection of a layer, `[d_model, d_ffn]`. The
    /// columns are the keys that gate each value vector.
    pub fn key_matrix(&self, layer: usize) -> Result<&Array2<f32>> {
        self.check_layer(layer)?;
        Ok(&self.blocks[layer].mlp.c_fc_w)
    }

    /// Second feedforward projection of a layer, `[d_ffn, d_model]`. The rows
    /// are the value vectors.
    pub fn value_matrix(&self, layer: usize) -> Result<&Array2<f32>> {
        self.check_layer(layer)?;
        Ok(&self.blocks[layer].mlp.c_proj_w)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    fn check_vref(&self, vref: ValueVectorRef) -> Result<()> {
        if vref.layer >= self.config.n_layers || vref.row >= self.config.d_ffn {
            return Err(Error::VectorOutOfRange {
                layer: vref.layer,
                row: vref.row,
                n_layers: self.config.n_layers,
                d_ffn: self.config.d_ffn,
            });
        }
        Ok(())
    }

    /// Coefficient vector produced by one layer's keys for a feedforward
    /// input `x` (the post-norm vector entering the block's feedforward).
    /// The coefficient-weighted sum of the layer's value vectors equals the
    /// matrix-form feedforward product.
    pub fn ffn_decompose(&self, x: ArrayView1<f32>, layer: usize) -> Result<Array1<f32>> {
        self.check_layer(layer)?;
        if x.len() != self.config.d_model {
            return Err(Error::invalid(format!(
                "feedforward input has dimension {}, expected {}",
                x.len(),
                self.config.d_model
            )));
        }
        let mlp = &self.blocks[layer].mlp;
        let mut m = x.dot(&mlp.c_fc_w) + &mlp.c_fc_b;
        m.mapv_inplace(gelu);
        Ok(m)
    }

    /// One layer's feedforward output for a single position, with the
    /// steering entries of that layer added on top.
    pub fn ffn_forward(
        &self,
        x: ArrayView1<f32>,
        layer: usize,
        steering: &SteeringSet,
    ) -> Result<Array1<f32>> {
        steering.validate(&self.config)?;
        let coeffs = self.ffn_decompose(x, layer)?;
        let mlp = &self.blocks[layer].mlp;
        let mut out = coeffs.dot(&mlp.c_proj_w) + &mlp.c_proj_b;
        if let Some(add) = self.steer_adds(steering)?[layer].as_ref() {
            out += add;
        }
        Ok(out)
    }

    /// Per-layer steering additions, `u * v` summed over the entries of each
    /// layer. Zero weights are skipped so they cannot perturb bit patterns.
    fn steer_adds(&self, steering: &SteeringSet) -> Result<Vec<Option<Array1<f32>>>> {
        steering.validate(&self.config)?;
        let mut adds: Vec<Option<Array1<f32>>> = vec![None; self.config.n_layers];
        for (vref, &w) in steering.iter() {
            if w == 0.0 {
                continue;
            }
            let v = self.blocks[vref.layer].mlp.c_proj_w.row(vref.row);
            let scaled = v.mapv(|x| w * x);
            match &mut adds[vref.layer] {
                Some(acc) => *acc += &scaled,
                slot => *slot = Some(scaled),
            }
        }
        Ok(adds)
    }

    fn embed(&self, tokens: &[u32], position_offset: usize) -> Result<Array2<f32>> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        let total = position_offset + tokens.len();
        if total > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.config.max_positions,
            });
        }
        let mut h = Array2::<f32>::zeros((tokens.len(), self.config.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab_size: self.config.vocab_size,
                });
            }
            let row = &self.wte.row(t as usize) + &self.wpe.row(position_offset + i);
            h.row_mut(i).assign(&row);
        }
        Ok(h)
    }

    fn unembed_last(&self, h: &Array2<f32>) -> Array1<f32> {
        let last = self.ln_f.forward_row(h.row(h.nrows() - 1));
        self.wte.dot(&last)
    }

    /// Full forward pass, returning logits for the last position. Steering is
    /// applied to every position at each steered layer.
    pub fn forward(&self, tokens: &[u32], steering: &SteeringSet) -> Result<Array1<f32>> {
        let adds = self.steer_adds(steering)?;
        let mut h = self.embed(tokens, 0)?;
        for (block, add) in self.blocks.iter().zip(&adds) {
            let (out, _, _, _) = block.forward(&h, None, add.as_ref(), false);
            h = out;
        }
        Ok(self.unembed_last(&h))
    }

    /// Starts an incremental decoding session.
    pub fn new_cache(&self) -> KvCache {
        KvCache {
            keys: (0..self.config.n_layers)
                .map(|_| Array2::zeros((0, self.config.d_model)))
                .collect(),
            values: (0..self.config.n_layers)
                .map(|_| Array2::zeros((0, self.config.d_model)))
                .collect(),
            len: 0,
        }
    }

    /// Processes `new_tokens` on top of the cached positions and returns the
    /// logits for the final position. The steering set applies to the new
    /// positions only; earlier positions keep whatever was in effect when
    /// they were processed.
    pub fn forward_cached(
        &self,
        cache: &mut KvCache,
        new_tokens: &[u32],
        steering: &SteeringSet,
    ) -> Result<Array1<f32>> {
        let adds = self.steer_adds(steering)?;
        let mut h = self.embed(new_tokens, cache.len)?;
        for (layer, (block, add)) in self.blocks.iter().zip(&adds).enumerate() {
            let past = (cache.len > 0).then(|| (cache.keys[layer].view(), cache.values[layer].view()));
            let (out, k_new, v_new, _) = block.forward(&h, past, add.as_ref(), false);
            h = out;
            cache.keys[layer] = if cache.len == 0 {
                k_new
            } else {
                ndarray::concatenate(ndarray::Axis(0), &[cache.keys[layer].view(), k_new.view()])
                    .expect("kv append")
            };
            cache.values[layer] = if cache.len == 0 {
                v_new
            } else {
                ndarray::concatenate(ndarray::Axis(0), &[cache.values[layer].view(), v_new.view()])
                    .expect("kv append")
            };
        }
        cache.len += new_tokens.len();
        Ok(self.unembed_last(&h))
    }

    /// Runs the unsteered model over a prompt once, capturing the junction
    /// summands of every layer for later steered resumption.
    pub fn prefix_states(&self, tokens: &[u32]) -> Result<PrefixStates> {
        let mut h = self.embed(tokens, 0)?;
        let mut traces = Vec::with_capacity(self.config.n_layers);
        for block in &self.blocks {
            let (out, _, _, trace) = block.forward(&h, None, None, true);
            h = out;
            traces.push(trace.expect("capture requested"));
        }
        Ok(PrefixStates {
            traces,
            n_positions: tokens.len(),
        })
    }

    /// Logits of a forward pass in which a single vector is steered with
    /// weight `u`, replayed from the captured prefix. Equivalent to (and
    /// bit-identical with) `forward` on the same prompt and steering.
    pub fn resume_steered(
        &self,
        states: &PrefixStates,
        vref: ValueVectorRef,
        u: f32,
    ) -> Result<Array1<f32>> {
        self.check_vref(vref)?;
        if !u.is_finite() || u < 0.0 {
            return Err(Error::invalid(format!("steering weight {u} out of range")));
        }
        let trace = &states.traces[vref.layer];
        let mut steered = trace.ffn_out.clone();
        if u != 0.0 {
            let add = self.blocks[vref.layer]
                .mlp
                .c_proj_w
                .row(vref.row)
                .mapv(|x| u * x);
            for mut row in steered.rows_mut() {
                row += &add;
            }
        }
        let mut h = &trace.x_mid + &steered;
        for block in &self.blocks[vref.layer + 1..] {
            let (out, _, _, _) = block.forward(&h, None, None, false);
            h = out;
        }
        debug_assert_eq!(h.nrows(), states.n_positions);
        Ok(self.unembed_last(&h))
    }
}
