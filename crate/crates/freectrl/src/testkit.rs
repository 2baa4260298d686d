//! Deterministic miniature fixtures: a tiny GPT-2 layout checkpoint with
//! scripted embedding clusters, a matching byte-level tokenizer, and two
//! degenerate checkpoints with closed-form output distributions. Everything
//! is reproducible from a seed so tests can freeze expectations.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ModelConfig, RawCheckpoint};

/// Shape of the miniature model.
pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ffn: 64,
        n_heads: 2,
        vocab_size: 265,
        max_positions: 64,
    }
}

/// Keywords whose embeddings are scripted onto one shared axis (cluster A).
pub const CLUSTER_A_WORDS: [&str; 3] = ["xa", "xb", "xc"];
/// Keywords scripted onto an orthogonal axis (cluster B).
pub const CLUSTER_B_WORDS: [&str; 3] = ["ya", "yb", "yc"];
/// Attribute names for the two scripted clusters (their name words are the
/// first keywords, so anchors land on the cluster axes).
pub const ATTR_A: &str = "xa";
pub const ATTR_B: &str = "ya";

/// Token ids of the leading-space cluster words, in word order.
pub const CLUSTER_A_TOKEN_IDS: [u32; 3] = [258, 259, 260];
pub const CLUSTER_B_TOKEN_IDS: [u32; 3] = [262, 263, 264];

/// Byte tokens with scripted embeddings: `p`/`q` sit on orthogonal axes,
/// `m`/`n` point in exactly opposite directions.
pub const TOKEN_P: u32 = b'p' as u32;
pub const TOKEN_Q: u32 = b'q' as u32;
pub const TOKEN_M: u32 = b'm' as u32;
pub const TOKEN_N: u32 = b'n' as u32;

/// Rows of the last layer's value matrix scripted to push cluster A tokens.
pub const CLUSTER_A_VALUE_ROWS: [usize; 4] = [0, 1, 2, 3];
/// Rows scripted to push cluster B tokens.
pub const CLUSTER_B_VALUE_ROWS: [usize; 4] = [4, 5, 6, 7];

const CLUSTER_EMBED_NORM: f32 = 1.0;
const VALUE_VECTOR_NORM: f32 = 2.5;
const INIT_SCALE: f32 = 0.08;

// ---------------------------------------------------------------------------
// Tokenizer fixture
// ---------------------------------------------------------------------------

fn byte_token(b: u8) -> String {
    let printable =
        (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    let c = if printable {
        char::from_u32(b as u32).unwrap()
    } else {
        let n = (0..b).filter(|&x| {
            !((b'!'..=b'~').contains(&x) || (0xA1..=0xAC).contains(&x) || (0xAE..=0xFF).contains(&x))
        }).count() as u32;
        char::from_u32(256 + n).unwrap()
    };
    c.to_string()
}

/// Merge rules building ` xa`, ` xb`, ` xc`, ` ya`, ` yb`, ` yc` from bytes.
fn fixture_merges() -> Vec<(String, String)> {
    let g = byte_token(b' ');
    vec![
        (g.clone(), "x".to_string()),
        (format!("{g}x"), "a".to_string()),
        (format!("{g}x"), "b".to_string()),
        (format!("{g}x"), "c".to_string()),
        (g.clone(), "y".to_string()),
        (format!("{g}y"), "a".to_string()),
        (format!("{g}y"), "b".to_string()),
        (format!("{g}y"), "c".to_string()),
    ]
}

/// Vocabulary and merge files for the miniature tokenizer: all 256 byte
/// tokens, the end-of-text marker, then one token per merge.
pub fn fixture_tokenizer_files() -> (String, String) {
    let mut entries: Vec<(String, u32)> = (0..=255u8).map(|b| (byte_token(b), b as u32)).collect();
    entries.push(("<|endoftext|>".to_string(), 256));
    let mut merges_text = String::from("#version: fixture\n");
    for (i, (left, right)) in fixture_merges().into_iter().enumerate() {
        entries.push((format!("{left}{right}"), 257 + i as u32));
        merges_text.push_str(&format!("{left} {right}\n"));
    }
    let map: serde_json::Map<String, serde_json::Value> = entries
        .into_iter()
        .map(|(tok, id)| (tok, serde_json::json!(id)))
        .collect();
    (
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).unwrap(),
        merges_text,
    )
}

/// Writes `vocab.json` and `merges.txt` into `dir`.
pub fn write_fixture_tokenizer(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (vocab, merges) = fixture_tokenizer_files();
    let vocab_path = dir.join("vocab.json");
    let merges_path = dir.join("merges.txt");
    std::fs::write(&vocab_path, vocab)?;
    std::fs::write(&merges_path, merges)?;
    Ok((vocab_path, merges_path))
}

// ---------------------------------------------------------------------------
// Checkpoint fixtures
// ---------------------------------------------------------------------------

fn unit_axis(d: usize, axis: usize, norm: f32) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[axis] = norm;
    v
}

fn scripted_cluster_row(d: usize, axis: usize, jitter_axis: usize, jitter: f32) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[axis] = 1.0;
    v[jitter_axis] = jitter;
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x *= CLUSTER_EMBED_NORM / norm);
    v
}

/// Random checkpoint with the scripted rows patched in:
/// - cluster A token embeddings near axis 0, cluster B near axis 1;
/// - `p`/`q` on axes 6 and 7, `m`/`n` on plus and minus axis 5;
/// - last-layer value rows pushing each cluster's axis.
pub fn fixture_checkpoint(seed: u64) -> RawCheckpoint {
    let cfg = fixture_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = RawCheckpoint::new();

    let rand_mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..rows * cols)
            .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect()
    };

    let mut wte = rand_mat(cfg.vocab_size, cfg.d_model, &mut rng);
    let patch_row = |wte: &mut Vec<f32>, token: u32, row: Vec<f32>| {
        let start = token as usize * cfg.d_model;
        wte[start..start + cfg.d_model].copy_from_slice(&row);
    };
    for (i, &tok) in CLUSTER_A_TOKEN_IDS.iter().enumerate() {
        patch_row(&mut wte, tok, scripted_cluster_row(cfg.d_model, 0, 2 + i, 0.05));
    }
    for (i, &tok) in CLUSTER_B_TOKEN_IDS.iter().enumerate() {
        patch_row(&mut wte, tok, scripted_cluster_row(cfg.d_model, 1, 2 + i, 0.05));
    }
    patch_row(&mut wte, TOKEN_P, unit_axis(cfg.d_model, 6, 0.1));
    patch_row(&mut wte, TOKEN_Q, unit_axis(cfg.d_model, 7, 0.1));
    patch_row(&mut wte, TOKEN_M, unit_axis(cfg.d_model, 5, 0.1));
    patch_row(&mut wte, TOKEN_N, unit_axis(cfg.d_model, 5, -0.1));
    ckpt.insert("wte.weight", vec![cfg.vocab_size, cfg.d_model], wte);

    ckpt.insert(
        "wpe.weight",
        vec![cfg.max_positions, cfg.d_model],
        rand_mat(cfg.max_positions, cfg.d_model, &mut rng),
    );

    for layer in 0..cfg.n_layers {
        let p = format!("h.{layer}");
        ckpt.insert(format!("{p}.ln_1.weight"), vec![cfg.d_model], vec![1.0; cfg.d_model]);
        ckpt.insert(format!("{p}.ln_1.bias"), vec![cfg.d_model], vec![0.0; cfg.d_model]);
        ckpt.insert(
            format!("{p}.attn.c_attn.weight"),
            vec![cfg.d_model, 3 * cfg.d_model],
            rand_mat(cfg.d_model, 3 * cfg.d_model, &mut rng),
        );
        ckpt.insert(
            format!("{p}.attn.c_attn.bias"),
            vec![3 * cfg.d_model],
            vec![0.0; 3 * cfg.d_model],
        );
        ckpt.insert(
            format!("{p}.attn.c_proj.weight"),
            vec![cfg.d_model, cfg.d_model],
            rand_mat(cfg.d_model, cfg.d_model, &mut rng),
        );
        ckpt.insert(format!("{p}.attn.c_proj.bias"), vec![cfg.d_model], vec![0.0; cfg.d_model]);
        ckpt.insert(format!("{p}.ln_2.weight"), vec![cfg.d_model], vec![1.0; cfg.d_model]);
        ckpt.insert(format!("{p}.ln_2.bias"), vec![cfg.d_model], vec![0.0; cfg.d_model]);
        ckpt.insert(
            format!("{p}.mlp.c_fc.weight"),
            vec![cfg.d_model, cfg.d_ffn],
            rand_mat(cfg.d_model, cfg.d_ffn, &mut rng),
        );
        ckpt.insert(format!("{p}.mlp.c_fc.bias"), vec![cfg.d_ffn], vec![0.0; cfg.d_ffn]);

        let mut c_proj = rand_mat(cfg.d_ffn, cfg.d_model, &mut rng);
        if layer == cfg.n_layers - 1 {
            for (i, &row) in CLUSTER_A_VALUE_ROWS.iter().enumerate() {
                let mut v = unit_axis(cfg.d_model, 0, VALUE_VECTOR_NORM);
                v[4] = 0.01 * (i + 1) as f32;
                c_proj[row * cfg.d_model..(row + 1) * cfg.d_model].copy_from_slice(&v);
            }
            for (i, &row) in CLUSTER_B_VALUE_ROWS.iter().enumerate() {
                let mut v = unit_axis(cfg.d_model, 1, VALUE_VECTOR_NORM);
                v[4] = 0.01 * (i + 1) as f32;
                c_proj[row * cfg.d_model..(row + 1) * cfg.d_model].copy_from_slice(&v);
            }
        }
        ckpt.insert(format!("{p}.mlp.c_proj.weight"), vec![cfg.d_ffn, cfg.d_model], c_proj);
        ckpt.insert(format!("{p}.mlp.c_proj.bias"), vec![cfg.d_model], vec![0.0; cfg.d_model]);
    }

    ckpt.insert("ln_f.weight", vec![cfg.d_model], vec![1.0; cfg.d_model]);
    ckpt.insert("ln_f.bias", vec![cfg.d_model], vec![0.0; cfg.d_model]);
    ckpt
}

/// Degenerate checkpoints with closed-form next-token distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Every forward pass yields the uniform distribution.
    Uniform,
    /// Every forward pass puts essentially all mass on one token.
    ConstantToken(u32),
}

/// Builds a checkpoint whose transformer stack is inert (all projections
/// zero, final norm gain zero), so the logits are `wte . ln_f_bias` at every
/// position.
pub fn degenerate_checkpoint(kind: Degenerate) -> RawCheckpoint {
    let cfg = fixture_config();
    let mut ckpt = RawCheckpoint::new();

    let mut wte = vec![0.0; cfg.vocab_size * cfg.d_model];
    let mut ln_f_bias = vec![0.0; cfg.d_model];
    if let Degenerate::ConstantToken(token) = kind {
        ln_f_bias[0] = 1.0;
        wte[token as usize * cfg.d_model] = 100.0;
    }
    ckpt.insert("wte.weight", vec![cfg.vocab_size, cfg.d_model], wte);
    ckpt.insert(
        "wpe.weight",
        vec![cfg.max_positions, cfg.d_model],
        vec![0.0; cfg.max_positions * cfg.d_model],
    );
    for layer in 0..cfg.n_layers {
        let p = format!("h.{layer}");
        for (name, len) in [
            (format!("{p}.ln_1.weight"), cfg.d_model),
            (format!("{p}.ln_1.bias"), cfg.d_model),
            (format!("{p}.attn.c_attn.bias"), 3 * cfg.d_model),
            (format!("{p}.attn.c_proj.bias"), cfg.d_model),
            (format!("{p}.ln_2.weight"), cfg.d_model),
            (format!("{p}.ln_2.bias"), cfg.d_model),
            (format!("{p}.mlp.c_fc.bias"), cfg.d_ffn),
            (format!("{p}.mlp.c_proj.bias"), cfg.d_model),
        ] {
            ckpt.insert(name, vec![len], vec![0.0; len]);
        }
        ckpt.insert(
            format!("{p}.attn.c_attn.weight"),
            vec![cfg.d_model, 3 * cfg.d_model],
            vec![0.0; cfg.d_model * 3 * cfg.d_model],
        );
        ckpt.insert(
            format!("{p}.attn.c_proj.weight"),
            vec![cfg.d_model, cfg.d_model],
            vec![0.0; cfg.d_model * cfg.d_model],
        );
        ckpt.insert(
            format!("{p}.mlp.c_fc.weight"),
            vec![cfg.d_model, cfg.d_ffn],
            vec![0.0; cfg.d_model * cfg.d_ffn],
        );
        ckpt.insert(
            format!("{p}.mlp.c_proj.weight"),
            vec![cfg.d_ffn, cfg.d_model],
            vec![0.0; cfg.d_ffn * cfg.d_model],
        );
    }
    ckpt.insert("ln_f.weight", vec![cfg.d_model], vec![0.0; cfg.d_model]);
    ckpt.insert("ln_f.bias", vec![cfg.d_model], ln_f_bias);
    ckpt
}

/// Writes a checkpoint plus the `config.json` sidecar carrying the head
/// count, returning the checkpoint path.
pub fn write_checkpoint(dir: &Path, ckpt: &RawCheckpoint) -> Result<PathBuf> {
    let path = dir.join("model.safetensors");
    ckpt.save(&path)?;
    let cfg = fixture_config();
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "n_head": cfg.n_heads }))?,
    )?;
    Ok(path)
}

/// Writes the standard random fixture model and tokenizer into `dir`,
/// returning (checkpoint, vocab, merges) paths.
pub fn write_fixture_model(dir: &Path, seed: u64) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let ckpt_path = write_checkpoint(dir, &fixture_checkpoint(seed))?;
    let (vocab_path, merges_path) = write_fixture_tokenizer(dir)?;
    Ok((ckpt_path, vocab_path, merges_path))
}
