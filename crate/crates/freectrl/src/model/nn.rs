//! Transformer building blocks: layer norm, causal self-attention, and the
//! feedforward block whose second projection holds the value vectors.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// GPT-2 uses the tanh approximation of GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Row-wise softmax in place with max subtraction.
pub(crate) fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.weight[j] + self.bias[j];
            }
        }
        out
    }

    pub fn forward_row(&self, x: ArrayView1<f32>) -> Array1<f32> {
        let n = x.len() as f32;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        Array1::from_iter(
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * self.weight[j] + self.bias[j]),
        )
    }
}

/// Causal multi-head self-attention with GPT-2's fused qkv projection.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub c_attn_w: Array2<f32>, // [d_model, 3*d_model]
    pub c_attn_b: Array1<f32>,
    pub c_proj_w: Array2<f32>, // [d_model, d_model]
    pub c_proj_b: Array1<f32>,
    pub n_heads: usize,
}

impl Attention {
    /// Attends over `past` keys/values (if any) followed by the new positions.
    /// Returns the attention output plus the new keys and values so the caller
    /// can extend its cache.
    pub fn forward(
        &self,
        x: &Array2<f32>,
        past: Option<(ArrayView2<f32>, ArrayView2<f32>)>,
    ) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let (seq, d_model) = x.dim();
        let head_dim = d_model / self.n_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let qkv = x.dot(&self.c_attn_w) + &self.c_attn_b;
        let q = qkv.slice(s![.., 0..d_model]).to_owned();
        let k_new = qkv.slice(s![.., d_model..2 * d_model]).to_owned();
        let v_new = qkv.slice(s![.., 2 * d_model..3 * d_model]).to_owned();

        let (k_all, v_all, past_len) = match past {
            Some((pk, pv)) => {
                let len = pk.nrows();
                (
                    concatenate(Axis(0), &[pk, k_new.view()]).expect("kv concat"),
                    concatenate(Axis(0), &[pv, v_new.view()]).expect("kv concat"),
                    len,
                )
            }
            None => (k_new.clone(), v_new.clone(), 0),
        };
        let total = past_len + seq;

        let mut ctx = Array2::<f32>::zeros((seq, d_model));
        for h in 0..self.n_heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let q_h = q.slice(s![.., cols.clone()]);
            let k_h = k_all.slice(s![.., cols.clone()]);
            let v_h = v_all.slice(s![.., cols.clone()]);

            let mut scores = q_h.dot(&k_h.t());
            scores.mapv_inplace(|v| v * scale);
            // causal mask: local row i sits at absolute position past_len + i
            for i in 0..seq {
                for j in (past_len + i + 1)..total {
                    scores[[i, j]] = f32::NEG_INFINITY;
                }
            }
            softmax_rows(&mut scores);
            let out_h = scores.dot(&v_h);
            ctx.slice_mut(s![.., cols]).assign(&out_h);
        }

        let out = ctx.dot(&self.c_proj_w) + &self.c_proj_b;
        (out, k_new, v_new)
    }
}

/// The feedforward block. Rows of `c_proj_w` are the value vectors; the
/// activated first projection produces the coefficients that weight them.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub c_fc_w: Array2<f32>, // [d_model, d_ffn]
    pub c_fc_b: Array1<f32>,
    pub c_proj_w: Array2<f32>, // [d_ffn, d_model]
    pub c_proj_b: Array1<f32>,
}

impl Mlp {
    /// Activated coefficients for every value vector, one row per position.
    pub fn coefficients(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut m = x.dot(&self.c_fc_w) + &self.c_fc_b;
        m.mapv_inplace(gelu);
        m
    }

    /// Plain feedforward output with no steering applied.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        self.coefficients(x).dot(&self.c_proj_w) + &self.c_proj_b
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln_1: LayerNorm,
    pub attn: Attention,
    pub ln_2: LayerNorm,
    pub mlp: Mlp,
}

/// Per-layer capture of the two summands at the feedforward residual
/// junction, kept so steered variants can be replayed from this layer on
/// without recomputing the prefix.
pub(crate) struct BlockTrace {
    /// Residual stream after the attention addition (input to the junction).
    pub x_mid: Array2<f32>,
    /// Feedforward output before any steering addition.
    pub ffn_out: Array2<f32>,
}

impl Block {
    /// Runs one block. `steer_add` is added to the feedforward output of every
    /// position before the residual addition. Returns the block output, the
    /// new attention keys/values, and the captured junction summands when
    /// requested.
    pub fn forward(
        &self,
        h: &Array2<f32>,
        past: Option<(ArrayView2<f32>, ArrayView2<f32>)>,
        steer_add: Option<&Array1<f32>>,
        capture: bool,
    ) -> (Array2<f32>, Array2<f32>, Array2<f32>, Option<BlockTrace>) {
        let (attn_out, k, v) = self.attn.forward(&self.ln_1.forward(h), past);
        let x_mid = h + &attn_out;

        let ffn_out = self.mlp.forward(&self.ln_2.forward(&x_mid));
        let trace = capture.then(|| BlockTrace {
            x_mid: x_mid.clone(),
            ffn_out: ffn_out.clone(),
        });

        let mut steered = ffn_out;
        if let Some(add) = steer_add {
            for mut row in steered.rows_mut() {
                row += add;
            }
        }
        (x_mid + steered, k, v, trace)
    }
}
