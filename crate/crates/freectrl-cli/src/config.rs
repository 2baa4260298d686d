//! Layered run configuration: TOML file sections per subcommand, overridden
//! by command-line flags, validated with field-level messages. The effective
//! configuration is echoed into every run manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

fn default_umax() -> f32 {
    50.0
}

fn default_top_m() -> usize {
    50
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtlasSection {
    /// Inclusive start and exclusive end, as "A..B". Whole model when unset.
    pub layers: Option<String>,
    /// Profile a uniform sample of this many vectors instead of a layer range.
    pub sample: Option<usize>,
    pub umax: f32,
    pub top_m: usize,
}

impl Default for AtlasSection {
    fn default() -> Self {
        Self {
            layers: None,
            sample: None,
            umax: default_umax(),
            top_m: default_top_m(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenterSection {
    pub lexicons: Vec<PathBuf>,
    pub attributes: Vec<String>,
    pub k: usize,
    pub umax: f32,
    /// Optional prebuilt atlas to locate vectors from.
    pub atlas: Option<PathBuf>,
    /// `target=competitor` pairs whose keywords are removed before refining.
    pub subtract: Vec<String>,
    pub anchor_mode: String,
}

impl Default for CenterSection {
    fn default() -> Self {
        Self {
            lexicons: Vec::new(),
            attributes: Vec::new(),
            k: 30,
            umax: default_umax(),
            atlas: None,
            subtract: Vec::new(),
            anchor_mode: "name-word".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub lexicons: Vec<PathBuf>,
    pub attributes: Vec<String>,
    pub centers: Vec<PathBuf>,
    /// "single" runs each attribute separately; "multi" steers them jointly.
    pub mode: String,
    pub prompt: Option<String>,
    pub all_prompts: bool,
    pub n: usize,
    pub max_new_tokens: usize,
    pub mu_omega: f64,
    pub lambda: f64,
    pub umax: f32,
    pub k: usize,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub greedy: bool,
    pub max_attempts: u32,
    pub weight_mode: String,
    pub constant_weight: Option<f64>,
    pub subtract: Vec<String>,
    pub anchor_mode: String,
    pub trace: bool,
    pub timing: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            lexicons: Vec::new(),
            attributes: Vec::new(),
            centers: Vec::new(),
            mode: "single".to_string(),
            prompt: None,
            all_prompts: false,
            n: 5,
            max_new_tokens: 64,
            mu_omega: 1.15,
            lambda: 1.5,
            umax: default_umax(),
            k: 30,
            temperature: 1.0,
            top_k: None,
            top_p: None,
            greedy: false,
            max_attempts: 5,
            weight_mode: "as-printed".to_string(),
            constant_weight: None,
            subtract: Vec::new(),
            anchor_mode: "name-word".to_string(),
            trace: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub records: Option<PathBuf>,
    pub lexicons: Vec<PathBuf>,
    pub anchor_mode: String,
    pub perplexity: bool,
    pub toxicity: bool,
    pub dist_aggregation: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            records: None,
            lexicons: Vec::new(),
            anchor_mode: "name-word".to_string(),
            perplexity: true,
            toxicity: false,
            dist_aggregation: "per-text-mean".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub sample: usize,
    pub weights: Vec<f32>,
    pub coverage_k: Vec<usize>,
    pub prompts: Option<usize>,
    pub umax: f32,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            sample: 50,
            weights: vec![1.0, 5.0, 10.0, 20.0, 30.0, 50.0],
            coverage_k: vec![1, 10, 50],
            prompts: Some(5),
            umax: default_umax(),
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub atlas: AtlasSection,
    pub center: CenterSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub profile_report: ProfileSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Parses "A..B" into a half-open layer range.
pub fn parse_layer_range(text: &str) -> Result<std::ops::Range<usize>> {
    let Some((a, b)) = text.split_once("..") else {
        bail!("layers: expected START..END, got {text:?}");
    };
    let start: usize = a.trim().parse().context("layers: start is not a number")?;
    let end: usize = b.trim().parse().context("layers: end is not a number")?;
    if start >= end {
        bail!("layers: empty range {text:?}");
    }
    Ok(start..end)
}

/// Parses `target=competitor` subtraction pairs.
pub fn parse_subtract(pairs: &[String]) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(a, b)| (a.trim().to_lowercase(), b.trim().to_lowercase()))
                .with_context(|| format!("subtract: expected TARGET=COMPETITOR, got {p:?}"))
        })
        .collect()
}

pub fn require_file(path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    let Some(p) = path else {
        bail!("{field}: required but not set (flag or config)");
    };
    if !p.exists() {
        bail!("{field}: {} does not exist", p.display());
    }
    Ok(p.clone())
}
