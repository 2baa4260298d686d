//! Value-vector profiling: converged distributions, convergence curves,
//! vocabulary coverage, prompt invariance, and location of the vectors that
//! most strongly promote a given token.
//!
//! Profiling a vector means running one forward pass with only that vector
//! steered at a large weight and reading the next-token distribution. A
//! captured prefix makes the sweep cheap: the pass restarts at the steered
//! layer, so early layers are computed once per prompt instead of once per
//! vector.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_distribution, Model, OutputDistribution, ValueVectorRef};

/// Default converged-profile weight. Far into the regime where the steered
/// distribution has stabilized, so it serves as the reference profile.
pub const DEFAULT_U_MAX: f32 = 50.0;

/// Default number of top tokens kept per profiled vector.
pub const DEFAULT_TOP_M: usize = 50;

// ---------------------------------------------------------------------------
// Spearman rank correlation
// ---------------------------------------------------------------------------

/// Doubled one-based average ranks. Doubling keeps tied ranks integral: a tie
/// run occupying sorted positions i..=j (zero-based) gets doubled rank
/// `i + j + 2` for every member.
fn doubled_average_ranks(values: &[f32]) -> Vec<i64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));

    let mut ranks = vec![0i64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let doubled = (i + j + 2) as i64;
        for &idx in &order[i..=j] {
            ranks[idx] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation with average-rank tie handling. Exact integer
/// accumulation; identical (or exactly mirrored) rankings return exactly
/// plus or minus one.
pub fn spearman(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "spearman inputs have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least two values"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman inputs contain non-finite values"));
    }

    let ra = doubled_average_ranks(a);
    let rb = doubled_average_ranks(b);
    let n = a.len() as i128;

    let sum_ab: i128 = ra.iter().zip(&rb).map(|(&x, &y)| x as i128 * y as i128).sum();
    let sum_aa: i128 = ra.iter().map(|&x| x as i128 * x as i128).sum();
    let sum_bb: i128 = rb.iter().map(|&x| x as i128 * x as i128).sum();
    // doubled ranks always sum to n(n+1)
    let total: i128 = n * (n + 1);

    let num = n * sum_ab - total * total;
    let den_a = n * sum_aa - total * total;
    let den_b = n * sum_bb - total * total;

    if den_a == 0 || den_b == 0 {
        return Err(Error::invalid(
            "spearman is undefined for zero-variance ranks",
        ));
    }
    if ra == rb {
        return Ok(1.0);
    }
    let mirrored = ra
        .iter()
        .zip(&rb)
        .all(|(&x, &y)| x + y == 2 * (a.len() as i64 + 1));
    if mirrored {
        return Ok(-1.0);
    }

    let rho = num as f64 / ((den_a as f64).sqrt() * (den_b as f64).sqrt());
    Ok(rho.clamp(-1.0, 1.0))
}

/// Jaccard overlap of two token sets.
pub fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

/// The stabilized distribution one vector produces at a given weight, with
/// its leading tokens ranked by descending probability (ties by ascending
/// token id).
#[derive(Debug, Clone)]
pub struct ConvergedProfile {
    pub vector: ValueVectorRef,
    pub u: f32,
    pub dist: OutputDistribution,
    pub top_tokens: Vec<(u32, f32)>,
}

/// Output distribution after one forward pass with a single steered vector.
pub fn converged_distribution(
    model: &Model,
    vector: ValueVectorRef,
    u: f32,
    prompt: &[u32],
) -> Result<OutputDistribution> {
    if prompt.is_empty() {
        return Err(Error::invalid("profiling prompt is empty"));
    }
    let states = model.prefix_states(prompt)?;
    let logits = model.resume_steered(&states, vector, u)?;
    softmax_distribution(logits.as_slice().unwrap(), 1.0)
}

/// Profiles one vector, keeping its `top_m` strongest tokens.
pub fn profile_vector(
    model: &Model,
    vector: ValueVectorRef,
    u: f32,
    prompt: &[u32],
    top_m: usize,
) -> Result<ConvergedProfile> {
    let dist = converged_distribution(model, vector, u, prompt)?;
    let top_tokens = dist.top_k(top_m);
    Ok(ConvergedProfile {
        vector,
        u,
        dist,
        top_tokens,
    })
}

/// Mean Spearman correlation against the final-weight profile, per weight.
/// The last grid point is the reference itself, so the curve ends at exactly
/// one.
pub fn convergence_curve(
    model: &Model,
    vectors: &[ValueVectorRef],
    weights: &[f32],
    prompt: &[u32],
) -> Result<Vec<(f32, f64)>> {
    if vectors.is_empty() {
        return Err(Error::invalid("convergence curve needs at least one vector"));
    }
    if weights.is_empty() {
        return Err(Error::invalid("convergence curve needs a weight grid"));
    }
    if weights.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("weight grid must be strictly ascending"));
    }
    let states = model.prefix_states(prompt)?;
    let u_ref = *weights.last().unwrap();

    let per_vector: Vec<Vec<f64>> = vectors
        .par_iter()
        .map(|&vref| -> Result<Vec<f64>> {
            let reference = softmax_distribution(
                model.resume_steered(&states, vref, u_ref)?.as_slice().unwrap(),
                1.0,
            )?;
            weights
                .iter()
                .map(|&u| {
                    let dist = softmax_distribution(
                        model.resume_steered(&states, vref, u)?.as_slice().unwrap(),
                        1.0,
                    )?;
                    spearman(dist.probs(), reference.probs())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(weights
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let mean = per_vector.iter().map(|row| row[i]).sum::<f64>() / vectors.len() as f64;
            (u, mean)
        })
        .collect())
}

/// Fraction of the vocabulary covered by the union of every sampled vector's
/// top-k tokens at weight `u`. Monotone in both `k` and the sample.
pub fn coverage(
    model: &Model,
    vectors: &[ValueVectorRef],
    k: usize,
    u: f32,
    prompt: &[u32],
) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::invalid("coverage needs at least one vector"));
    }
    if k == 0 {
        return Err(Error::invalid("coverage needs k >= 1"));
    }
    let states = model.prefix_states(prompt)?;
    let union = vectors
        .par_iter()
        .map(|&vref| -> Result<BTreeSet<u32>> {
            let dist = softmax_distribution(
                model.resume_steered(&states, vref, u)?.as_slice().unwrap(),
                1.0,
            )?;
            Ok(dist.top_k_set(k))
        })
        .try_reduce(BTreeSet::new, |mut acc, set| {
            acc.extend(set);
            Ok(acc)
        })?;
    Ok(union.len() as f64 / model.config().vocab_size as f64)
}

/// Per-vector mean pairwise Jaccard overlap of top-ten token sets across
/// prompts. Values near one mean the vector promotes the same tokens no
/// matter the prompt.
pub fn prompt_invariance_report(
    model: &Model,
    vectors: &[ValueVectorRef],
    prompts: &[Vec<u32>],
    u: f32,
) -> Result<Vec<(ValueVectorRef, f64)>> {
    if vectors.is_empty() {
        return Err(Error::invalid("prompt invariance needs at least one vector"));
    }
    if prompts.len() < 2 {
        return Err(Error::invalid("prompt invariance needs at least two prompts"));
    }
    let states: Vec<_> = prompts
        .iter()
        .map(|p| model.prefix_states(p))
        .collect::<Result<_>>()?;

    vectors
        .par_iter()
        .map(|&vref| -> Result<(ValueVectorRef, f64)> {
            let sets: Vec<BTreeSet<u32>> = states
                .iter()
                .map(|s| -> Result<BTreeSet<u32>> {
                    let dist = softmax_distribution(
                        model.resume_steered(s, vref, u)?.as_slice().unwrap(),
                        1.0,
                    )?;
                    Ok(dist.top_k_set(10))
                })
                .collect::<Result<_>>()?;
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    sum += jaccard(&sets[i], &sets[j]);
                    pairs += 1;
                }
            }
            Ok((vref, sum / pairs as f64))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Locating vectors for a token
// ---------------------------------------------------------------------------

/// Which value vectors to sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SearchSpace {
    /// Every vector of every layer.
    Full,
    /// Every vector of the layers in the range.
    Layers(Range<usize>),
}

impl SearchSpace {
    pub fn vectors(&self, model: &Model) -> Result<Vec<ValueVectorRef>> {
        let cfg = model.config();
        let layers = match self {
            SearchSpace::Full => 0..cfg.n_layers,
            SearchSpace::Layers(r) => {
                if r.start >= r.end || r.end > cfg.n_layers {
                    return Err(Error::invalid(format!(
                        "layer range {}..{} invalid for {} layers",
                        r.start, r.end, cfg.n_layers
                    )));
                }
                r.clone()
            }
        };
        Ok(layers
            .flat_map(|layer| (0..cfg.d_ffn).map(move |row| ValueVectorRef::new(layer, row)))
            .collect())
    }
}

/// Uniform sample of distinct value vectors, reproducible from the seed.
pub fn sample_vectors(model: &Model, count: usize, seed: u64) -> Result<Vec<ValueVectorRef>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let total = model.config().value_vector_count();
    if count == 0 || count > total {
        return Err(Error::invalid(format!(
            "sample size {count} out of range for {total} vectors"
        )));
    }
    let mut all = SearchSpace::Full.vectors(model)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(count);
    all.sort();
    Ok(all)
}

/// The `k` vectors whose converged distributions give `token_id` the highest
/// probability, sorted by descending probability with ties broken by
/// ascending (layer, row).
pub fn locate_vectors_for_token(
    model: &Model,
    token_id: u32,
    k: usize,
    u_max: f32,
    search: &SearchSpace,
    prompt: &[u32],
) -> Result<Vec<(ValueVectorRef, f32)>> {
    if token_id as usize >= model.config().vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token_id,
            vocab_size: model.config().vocab_size,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let candidates = search.vectors(model)?;
    let states = model.prefix_states(prompt)?;

    let mut scored: Vec<(ValueVectorRef, f32)> = candidates
        .par_iter()
        .map(|&vref| -> Result<(ValueVectorRef, f32)> {
            let dist = softmax_distribution(
                model.resume_steered(&states, vref, u_max)?.as_slice().unwrap(),
                1.0,
            )?;
            Ok((vref, dist.prob(token_id)))
        })
        .collect::<Result<_>>()?;

    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

// ---------------------------------------------------------------------------
// Persisted atlas
// ---------------------------------------------------------------------------

const ATLAS_MAGIC: &[u8; 8] = b"FCATLAS1";

/// One profiled vector and its strongest tokens at the profiling weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasEntry {
    pub vector: ValueVectorRef,
    pub top_tokens: Vec<(u32, f32)>,
}

/// Sidecar metadata persisted next to the binary index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasMeta {
    pub fingerprint: String,
    pub u_max: f32,
    pub top_m: usize,
    pub prompt_tokens: Vec<u32>,
    pub entry_count: usize,
}

/// Forward lists (vector to top tokens) plus the reverse map (token to the
/// vectors whose top list contains it). The reverse map is rebuilt from the
/// forward lists, so the two cannot drift apart.
#[derive(Debug, Clone)]
pub struct AtlasIndex {
    meta: AtlasMeta,
    entries: Vec<AtlasEntry>,
    reverse: HashMap<u32, Vec<(ValueVectorRef, f32)>>,
}

impl AtlasIndex {
    fn assemble(meta: AtlasMeta, entries: Vec<AtlasEntry>) -> Self {
        let mut reverse: HashMap<u32, Vec<(ValueVectorRef, f32)>> = HashMap::new();
        for entry in &entries {
            for &(token, prob) in &entry.top_tokens {
                reverse.entry(token).or_default().push((entry.vector, prob));
            }
        }
        for list in reverse.values_mut() {
            list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        }
        Self {
            meta,
            entries,
            reverse,
        }
    }

    pub fn meta(&self) -> &AtlasMeta {
        &self.meta
    }

    pub fn entries(&self) -> &[AtlasEntry] {
        &self.entries
    }

    /// Vectors known to promote `token`, strongest first. The list only sees
    /// vectors whose top-m window contains the token, so it can be shorter
    /// than requested.
    pub fn top_vectors_for_token(&self, token: u32, k: usize) -> Vec<(ValueVectorRef, f32)> {
        let mut list = self.reverse.get(&token).cloned().unwrap_or_default();
        list.truncate(k);
        list
    }

    /// Tokens promoted by `vector`, strongest first.
    pub fn top_tokens_for_vector(&self, vector: ValueVectorRef) -> Option<&[(u32, f32)]> {
        self.entries
            .iter()
            .find(|e| e.vector == vector)
            .map(|e| e.top_tokens.as_slice())
    }
}

/// Profiles every vector in `vectors` and assembles the index.
pub fn build_atlas(
    model: &Model,
    vectors: &[ValueVectorRef],
    u_max: f32,
    top_m: usize,
    prompt: &[u32],
) -> Result<AtlasIndex> {
    if vectors.is_empty() {
        return Err(Error::invalid("atlas build needs at least one vector"));
    }
    if top_m == 0 {
        return Err(Error::invalid("atlas build needs top_m >= 1"));
    }
    let states = model.prefix_states(prompt)?;
    let mut entries: Vec<AtlasEntry> = vectors
        .par_iter()
        .map(|&vref| -> Result<AtlasEntry> {
            let dist = softmax_distribution(
                model.resume_steered(&states, vref, u_max)?.as_slice().unwrap(),
                1.0,
            )?;
            Ok(AtlasEntry {
                vector: vref,
                top_tokens: dist.top_k(top_m),
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by_key(|e| e.vector);

    let meta = AtlasMeta {
        fingerprint: model.fingerprint(),
        u_max,
        top_m,
        prompt_tokens: prompt.to_vec(),
        entry_count: entries.len(),
    };
    Ok(AtlasIndex::assemble(meta, entries))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes the binary index plus its JSON sidecar.
pub fn atlas_save(index: &AtlasIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(ATLAS_MAGIC);
    out.extend_from_slice(&(index.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(index.meta.top_m as u32).to_le_bytes());
    for entry in &index.entries {
        out.extend_from_slice(&(entry.vector.layer as u32).to_le_bytes());
        out.extend_from_slice(&(entry.vector.row as u32).to_le_bytes());
        out.extend_from_slice(&(entry.top_tokens.len() as u32).to_le_bytes());
        for &(token, prob) in &entry.top_tokens {
            out.extend_from_slice(&token.to_le_bytes());
            out.extend_from_slice(&prob.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;

    let sidecar = std::fs::File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(sidecar, &index.meta)?;
    Ok(())
}

/// Reads an index and verifies it was built for the given model.
pub fn atlas_load(path: impl AsRef<Path>, model: &Model) -> Result<AtlasIndex> {
    let path = path.as_ref();
    let meta: AtlasMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: meta.fingerprint,
            got: model.fingerprint(),
        });
    }

    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let slice = self
                .bytes
                .get(self.pos..self.pos + n)
                .ok_or_else(|| Error::invalid("atlas file truncated"))?;
            self.pos += n;
            Ok(slice)
        }
        fn take_u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    if cur.take(8)? != ATLAS_MAGIC {
        return Err(Error::invalid("not an atlas index file"));
    }
    let entry_count = cur.take_u32()? as usize;
    let top_m = cur.take_u32()? as usize;
    if entry_count != meta.entry_count || top_m != meta.top_m {
        return Err(Error::invalid(
            "atlas sidecar metadata disagrees with the binary index",
        ));
    }

    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let layer = cur.take_u32()? as usize;
        let row = cur.take_u32()? as usize;
        let len = cur.take_u32()? as usize;
        let mut top_tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let token = cur.take_u32()?;
            let prob = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            top_tokens.push((token, prob));
        }
        entries.push(AtlasEntry {
            vector: ValueVectorRef::new(layer, row),
            top_tokens,
        });
    }

    Ok(AtlasIndex::assemble(meta, entries))
}
