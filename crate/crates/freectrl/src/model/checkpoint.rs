//! Checkpoint I/O for the flat named-tensor container format, using the
//! public GPT-2 tensor layout (`wte`, `wpe`, `h.{i}.*`, `ln_f`).
//!
//! All weights are widened to 32-bit floats on load. The head count is read
//! from a `config.json` sibling when present, otherwise inferred from the
//! conventional 64-wide head dimension.

use std::collections::BTreeMap;
use std::path::Path;

use half::{bf16, f16};
use ndarray::{Array1, Array2};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::nn::{Attention, Block, LayerNorm, Mlp};
use crate::model::{Model, ModelConfig};

const LAYER_NORM_EPS: f32 = 1e-5;
const CONVENTIONAL_HEAD_DIM: usize = 64;

fn widen(name: &str, view: &TensorView) -> Result<Vec<f32>> {
    let bytes = view.data();
    let values = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect(),
        other => {
            return Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: format!("{other:?}"),
            })
        }
    };
    Ok(values)
}

struct TensorReader<'a> {
    tensors: &'a SafeTensors<'a>,
}

impl TensorReader<'_> {
    fn view(&self, name: &str) -> Result<TensorView<'_>> {
        self.tensors
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_string()))
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let view = self.view(name)?;
        if view.shape() != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: format!("[{rows}, {cols}]"),
                got: view.shape().to_vec(),
            });
        }
        let data = widen(name, &view)?;
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Container(format!("tensor {name}: {e}")))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        let view = self.view(name)?;
        if view.shape() != [len] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: format!("[{len}]"),
                got: view.shape().to_vec(),
            });
        }
        Ok(Array1::from_vec(widen(name, &view)?))
    }

    fn layer_norm(&self, prefix: &str, d_model: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.vector(&format!("{prefix}.weight"), d_model)?,
            bias: self.vector(&format!("{prefix}.bias"), d_model)?,
            eps: LAYER_NORM_EPS,
        })
    }
}

fn read_heads_sidecar(checkpoint_path: &Path) -> Option<usize> {
    let sidecar = checkpoint_path.parent()?.join("config.json");
    let text = std::fs::read_to_string(sidecar).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value
        .get("n_head")
        .or_else(|| value.get("n_heads"))
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
}

/// Loads a GPT-2 layout checkpoint. The configuration is derived from tensor
/// shapes; every missing or misshapen tensor is reported by name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buffer = std::fs::read(path)?;
    let tensors = SafeTensors::deserialize(&buffer)
        .map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
    let reader = TensorReader { tensors: &tensors };

    let n_layers = tensors
        .names()
        .iter()
        .filter_map(|name| {
            let rest = name.strip_prefix("h.")?;
            let idx: usize = rest.split('.').next()?.parse().ok()?;
            Some(idx + 1)
        })
        .max()
        .ok_or_else(|| Error::MissingTensor("h.0.mlp.c_fc.weight".to_string()))?;

    let wte_view = reader.view("wte.weight")?;
    let &[vocab_size, d_model] = wte_view.shape() else {
        return Err(Error::ShapeMismatch {
            name: "wte.weight".to_string(),
            expected: "[vocab, d_model]".to_string(),
            got: wte_view.shape().to_vec(),
        });
    };
    let wte = reader.matrix("wte.weight", vocab_size, d_model)?;

    let wpe_view = reader.view("wpe.weight")?;
    let &[max_positions, wpe_width] = wpe_view.shape() else {
        return Err(Error::ShapeMismatch {
            name: "wpe.weight".to_string(),
            expected: "[positions, d_model]".to_string(),
            got: wpe_view.shape().to_vec(),
        });
    };
    if wpe_width != d_model {
        return Err(Error::ShapeMismatch {
            name: "wpe.weight".to_string(),
            expected: format!("[*, {d_model}]"),
            got: wpe_view.shape().to_vec(),
        });
    }
    let wpe = reader.matrix("wpe.weight", max_positions, d_model)?;

    let fc_view = reader.view("h.0.mlp.c_fc.weight")?;
    let &[fc_in, d_ffn] = fc_view.shape() else {
        return Err(Error::ShapeMismatch {
            name: "h.0.mlp.c_fc.weight".to_string(),
            expected: "[d_model, d_ffn]".to_string(),
            got: fc_view.shape().to_vec(),
        });
    };
    if fc_in != d_model {
        return Err(Error::ShapeMismatch {
            name: "h.0.mlp.c_fc.weight".to_string(),
            expected: format!("[{d_model}, *]"),
            got: fc_view.shape().to_vec(),
        });
    }

    let n_heads = match read_heads_sidecar(path) {
        Some(h) => h,
        None if d_model % CONVENTIONAL_HEAD_DIM == 0 => d_model / CONVENTIONAL_HEAD_DIM,
        None => {
            return Err(Error::Container(format!(
                "cannot infer head count: d_model {d_model} is not a multiple of \
                 {CONVENTIONAL_HEAD_DIM} and no config.json sidecar was found"
            )))
        }
    };
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Container(format!(
            "head count {n_heads} does not divide d_model {d_model}"
        )));
    }

    let mut blocks = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let p = format!("h.{i}");
        blocks.push(Block {
            ln_1: reader.layer_norm(&format!("{p}.ln_1"), d_model)?,
            attn: Attention {
                c_attn_w: reader.matrix(&format!("{p}.attn.c_attn.weight"), d_model, 3 * d_model)?,
                c_attn_b: reader.vector(&format!("{p}.attn.c_attn.bias"), 3 * d_model)?,
                c_proj_w: reader.matrix(&format!("{p}.attn.c_proj.weight"), d_model, d_model)?,
                c_proj_b: reader.vector(&format!("{p}.attn.c_proj.bias"), d_model)?,
                n_heads,
            },
            ln_2: reader.layer_norm(&format!("{p}.ln_2"), d_model)?,
            mlp: Mlp {
                c_fc_w: reader.matrix(&format!("{p}.mlp.c_fc.weight"), d_model, d_ffn)?,
                c_fc_b: reader.vector(&format!("{p}.mlp.c_fc.bias"), d_ffn)?,
                c_proj_w: reader.matrix(&format!("{p}.mlp.c_proj.weight"), d_ffn, d_model)?,
                c_proj_b: reader.vector(&format!("{p}.mlp.c_proj.bias"), d_model)?,
            },
        });
    }

    let ln_f = reader.layer_norm("ln_f", d_model)?;

    let config = ModelConfig {
        n_layers,
        d_model,
        d_ffn,
        n_heads,
        vocab_size,
        max_positions,
    };

    Ok(Model {
        config,
        wte,
        wpe,
        blocks,
        ln_f,
    })
}

/// An in-memory set of named float tensors that can be written out as a
/// checkpoint container. Used to produce small test checkpoints.
#[derive(Debug, Default, Clone)]
pub struct RawCheckpoint {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

struct OwnedView<'a> {
    shape: &'a [usize],
    bytes: Vec<u8>,
}

impl safetensors::View for OwnedView<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

impl RawCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not match data length"
        );
        self.tensors.insert(name, (shape, data));
    }

    pub fn remove(&mut self, name: &str) -> bool {
        self.tensors.remove(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(shape, data)| (shape.as_slice(), data.as_slice()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, self)
    }
}

/// Writes the tensors as a container file with 32-bit little-endian payloads.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &RawCheckpoint) -> Result<()> {
    let views = checkpoint.tensors.iter().map(|(name, (shape, data))| {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        (
            name.as_str(),
            OwnedView {
                shape: shape.as_slice(),
                bytes,
            },
        )
    });
    let buffer = safetensors::serialize(views, None)
        .map_err(|e| Error::Container(format!("serialize: {e}")))?;
    std::fs::write(path, buffer)?;
    Ok(())
}
