//! Control centers: per-attribute unions of the value vectors located for
//! each refined keyword, with provenance back to the keywords that found
//! them.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::atlas::{locate_vectors_for_token, AtlasIndex, SearchSpace};
use crate::error::{Error, Result};
use crate::lexicon::AttributeLexicon;
use crate::model::{Model, SteeringSet, ValueVectorRef};

/// One member vector and the keywords whose top-k lists contained it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterMember {
    pub vector: ValueVectorRef,
    pub keywords: Vec<String>,
}

/// The control unit for one attribute. During generation a single scalar
/// weight applies uniformly to every member vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCenter {
    pub attribute: String,
    pub k: usize,
    pub u_max: f32,
    pub fingerprint: String,
    pub members: Vec<CenterMember>,
}

impl ControlCenter {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn vectors(&self) -> impl Iterator<Item = ValueVectorRef> + '_ {
        self.members.iter().map(|m| m.vector)
    }

    /// Uniform steering set over every member.
    pub fn steering_set(&self, weight: f32) -> SteeringSet {
        SteeringSet::uniform(self.vectors(), weight)
    }
}

fn assemble_members(per_keyword: Vec<(String, Vec<ValueVectorRef>)>) -> Vec<CenterMember> {
    let mut by_vector: BTreeMap<ValueVectorRef, Vec<String>> = BTreeMap::new();
    for (keyword, vectors) in per_keyword {
        for vref in vectors {
            let kws = by_vector.entry(vref).or_default();
            if !kws.contains(&keyword) {
                kws.push(keyword.clone());
            }
        }
    }
    by_vector
        .into_iter()
        .map(|(vector, mut keywords)| {
            keywords.sort();
            CenterMember { vector, keywords }
        })
        .collect()
}

/// Builds the control center for one attribute by locating the top-k vectors
/// of every refined keyword and taking the union.
pub fn build_center(
    model: &Model,
    lexicon: &AttributeLexicon,
    k: usize,
    u_max: f32,
    search: &SearchSpace,
    prompt: &[u32],
) -> Result<ControlCenter> {
    if lexicon.refined.is_empty() {
        return Err(Error::invalid(format!(
            "attribute {} has no refined keywords; refine the lexicon first",
            lexicon.name
        )));
    }
    let per_keyword = lexicon
        .refined
        .iter()
        .map(|kw| -> Result<(String, Vec<ValueVectorRef>)> {
            let token = kw.token_ids[0];
            let located = locate_vectors_for_token(model, token, k, u_max, search, prompt)?;
            Ok((kw.keyword.clone(), located.into_iter().map(|(v, _)| v).collect()))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ControlCenter {
        attribute: lexicon.name.clone(),
        k,
        u_max,
        fingerprint: model.fingerprint(),
        members: assemble_members(per_keyword),
    })
}

/// Builds a center from a prebuilt atlas instead of live sweeps. Keywords
/// whose first sub-token never appears in any profiled vector's top list
/// contribute nothing and are reported in the result's second element.
pub fn build_center_from_atlas(
    atlas: &AtlasIndex,
    lexicon: &AttributeLexicon,
    k: usize,
) -> Result<(ControlCenter, Vec<String>)> {
    if lexicon.refined.is_empty() {
        return Err(Error::invalid(format!(
            "attribute {} has no refined keywords; refine the lexicon first",
            lexicon.name
        )));
    }
    let mut missing = Vec::new();
    let mut per_keyword = Vec::new();
    for kw in &lexicon.refined {
        let located = atlas.top_vectors_for_token(kw.token_ids[0], k);
        if located.is_empty() {
            missing.push(kw.keyword.clone());
        }
        per_keyword.push((
            kw.keyword.clone(),
            located.into_iter().map(|(v, _)| v).collect(),
        ));
    }
    Ok((
        ControlCenter {
            attribute: lexicon.name.clone(),
            k,
            u_max: atlas.meta().u_max,
            fingerprint: atlas.meta().fingerprint.clone(),
            members: assemble_members(per_keyword),
        },
        missing,
    ))
}

/// Writes the center as JSON: members are `[layer, row, keyword...]` rows.
pub fn center_save(center: &ControlCenter, path: impl AsRef<Path>) -> Result<()> {
    let members: Vec<Value> = center
        .members
        .iter()
        .map(|m| {
            let mut row = vec![json!(m.vector.layer), json!(m.vector.row)];
            row.extend(m.keywords.iter().map(|k| json!(k)));
            Value::Array(row)
        })
        .collect();
    let doc = json!({
        "attribute": center.attribute,
        "k": center.k,
        "u_max": center.u_max,
        "fingerprint": center.fingerprint,
        "members": members,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a center and verifies it was built for the given model.
pub fn center_load(path: impl AsRef<Path>, model: &Model) -> Result<ControlCenter> {
    let path = path.as_ref();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::invalid(format!("{}: not a center file", path.display())))?;

    let field = |name: &str| -> Result<&Value> {
        obj.get(name)
            .ok_or_else(|| Error::invalid(format!("{}: missing field {name}", path.display())))
    };

    let fingerprint = field("fingerprint")?
        .as_str()
        .ok_or_else(|| Error::invalid("fingerprint must be a string"))?
        .to_string();
    if fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint,
            got: model.fingerprint(),
        });
    }

    let members = field("members")?
        .as_array()
        .ok_or_else(|| Error::invalid("members must be an array"))?
        .iter()
        .map(|row| -> Result<CenterMember> {
            let row = row
                .as_array()
                .filter(|r| r.len() >= 2)
                .ok_or_else(|| Error::invalid("member rows are [layer, row, keyword...]"))?;
            let layer = row[0]
                .as_u64()
                .ok_or_else(|| Error::invalid("member layer must be an integer"))?;
            let vrow = row[1]
                .as_u64()
                .ok_or_else(|| Error::invalid("member row must be an integer"))?;
            let keywords = row[2..]
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::invalid("member keywords must be strings"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CenterMember {
                vector: ValueVectorRef::new(layer as usize, vrow as usize),
                keywords,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ControlCenter {
        attribute: field("attribute")?
            .as_str()
            .ok_or_else(|| Error::invalid("attribute must be a string"))?
            .to_string(),
        k: field("k")?
            .as_u64()
            .ok_or_else(|| Error::invalid("k must be an integer"))? as usize,
        u_max: field("u_max")?
            .as_f64()
            .ok_or_else(|| Error::invalid("u_max must be a number"))? as f32,
        fingerprint,
        members,
    })
}
