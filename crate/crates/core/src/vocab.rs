//! Label schemas, expanded vocabularies, conflict records and prompt sampling.
//!
//! Documents use the JSON-like layout of dataset label files: single-quoted
//! keys and strings are accepted on input (they are parsed as JSON5), output is
//! plain JSON.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Minimum number of alternatives every non-background entry must carry.
pub const MIN_ALTERNATIVES: usize = 5;
pub const BACKGROUND: &str = "background";

fn parse_document(raw: &str) -> Result<Value> {
    match json5::from_str::<Value>(raw) {
        Ok(v) => Ok(v),
        // label files are often quoted as a bare `'labels': {...}` fragment
        Err(first) => json5::from_str::<Value>(&format!("{{{}}}", raw.trim().trim_end_matches(',')))
            .map_err(|_| Error::Parse(first.to_string())),
    }
}

/// Whitespace-collapsed, lower-cased form used for duplicate detection.
pub fn normalize_alternative(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A label ID or a sorted, duplicate-free tuple of IDs.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConceptKey {
    Single(u32),
    Combined(Vec<u32>),
}

impl ConceptKey {
    pub fn combined(mut ids: Vec<u32>) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        match ids.len() {
            0 => Err(Error::Schema("combined key without IDs".into())),
            _ => Ok(ConceptKey::Combined(ids)),
        }
    }

    pub fn ids(&self) -> Vec<u32> {
        match self {
            ConceptKey::Single(id) => vec![*id],
            ConceptKey::Combined(ids) => ids.clone(),
        }
    }
}

impl fmt::Display for ConceptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptKey::Single(id) => write!(f, "{id}"),
            ConceptKey::Combined(ids) => {
                let parts: Vec<String> = ids.iter().map(u32::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for ConceptKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Schema(format!("label key {s:?} is not a list of IDs")))
            })
            .collect::<Result<Vec<_>>>()?;
        if s.contains(',') {
            ConceptKey::combined(ids)
        } else {
            Ok(ConceptKey::Single(ids[0]))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelIds {
    Single(u32),
    Combined(Vec<u32>),
}

impl LabelIds {
    fn to_value(&self) -> Value {
        match self {
            LabelIds::Single(id) => Value::from(*id),
            LabelIds::Combined(ids) => Value::from(ids.clone()),
        }
    }
}

fn parse_id(v: &Value, label: &str) -> Result<u32> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| Error::Schema(format!("label {label:?} has non-integer or negative ID {v}")))
}

/// Mapping of dataset label texts to one label ID or a list of IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSchema {
    pub dataset_id: String,
    pub labels: BTreeMap<String, LabelIds>,
}

impl LabelSchema {
    pub fn parse(raw: &str) -> Result<Self> {
        let doc = parse_document(raw)?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Schema("label document is not a key-value structure".into()))?;
        let labels = obj
            .get("labels")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Schema("missing 'labels' map".into()))?;
        let dataset_id = obj
            .get("dataset_id")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let mut out = BTreeMap::new();
        for (text, v) in labels {
            let ids = match v {
                Value::Array(items) => {
                    let mut ids = items
                        .iter()
                        .map(|i| parse_id(i, text))
                        .collect::<Result<Vec<_>>>()?;
                    if ids.is_empty() {
                        return Err(Error::Schema(format!("label {text:?} maps to an empty list")));
                    }
                    ids.sort_unstable();
                    ids.dedup();
                    LabelIds::Combined(ids)
                }
                other => LabelIds::Single(parse_id(other, text)?),
            };
            out.insert(text.clone(), ids);
        }
        match out.get(BACKGROUND) {
            Some(LabelIds::Single(0)) => {}
            Some(_) => return Err(Error::Schema("'background' must map to 0".into())),
            None => return Err(Error::Schema("missing 'background' label".into())),
        }
        Ok(LabelSchema {
            dataset_id,
            labels: out,
        })
    }

    pub fn to_json(&self) -> String {
        let labels: Map<String, Value> = self
            .labels
            .iter()
            .map(|(k, v)| (k.clone(), v.to_value()))
            .collect();
        let mut doc = Map::new();
        doc.insert("dataset_id".into(), Value::from(self.dataset_id.clone()));
        doc.insert("labels".into(), Value::Object(labels));
        serde_json::to_string_pretty(&Value::Object(doc)).expect("schema serializes")
    }

    /// IDs that appear as a label's sole ID.
    pub fn singleton_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .labels
            .values()
            .filter_map(|v| match v {
                LabelIds::Single(id) => Some(*id),
                LabelIds::Combined(_) => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn parse_label_schema(raw: &str) -> Result<LabelSchema> {
    LabelSchema::parse(raw)
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CombinedEntry {
    pub alternatives: Vec<String>,
    /// Grouped instances may reference IDs absent from `single_labels`.
    pub grouped: bool,
}

/// ID-keyed alternative label lists. The first alternative of every entry is
/// its canonical name.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ExpandedVocabulary {
    pub single_labels: BTreeMap<u32, Vec<String>>,
    pub combined_labels: BTreeMap<Vec<u32>, CombinedEntry>,
}

fn string_list(v: &Value, key: &str) -> Result<Vec<String>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::Schema(format!("entry {key:?} is not a list of strings")))?;
    items
        .iter()
        .map(|s| {
            s.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Schema(format!("entry {key:?} contains a non-string")))
        })
        .collect()
}

impl ExpandedVocabulary {
    pub fn parse(raw: &str) -> Result<Self> {
        let doc = parse_document(raw)?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Schema("vocabulary is not a key-value structure".into()))?;
        let mut vocab = ExpandedVocabulary::default();
        if let Some(single) = obj.get("single_labels") {
            let single = single
                .as_object()
                .ok_or_else(|| Error::Schema("'single_labels' is not a map".into()))?;
            for (k, v) in single {
                let id = match k.parse::<ConceptKey>()? {
                    ConceptKey::Single(id) => id,
                    ConceptKey::Combined(_) => {
                        return Err(Error::Schema(format!("single label key {k:?} lists several IDs")))
                    }
                };
                vocab.single_labels.insert(id, string_list(v, k)?);
            }
        } else {
            return Err(Error::Schema("missing 'single_labels'".into()));
        }
        if let Some(combined) = obj.get("combined_labels") {
            let combined = combined
                .as_object()
                .ok_or_else(|| Error::Schema("'combined_labels' is not a map".into()))?;
            for (k, v) in combined {
                let ids = k.parse::<ConceptKey>()?.ids();
                let ids = match ConceptKey::combined(ids)? {
                    ConceptKey::Combined(ids) => ids,
                    ConceptKey::Single(_) => unreachable!(),
                };
                let entry = match v {
                    Value::Object(o) => CombinedEntry {
                        alternatives: string_list(
                            o.get("alternatives").unwrap_or(&Value::Null),
                            k,
                        )?,
                        grouped: o.get("grouped").and_then(Value::as_bool).unwrap_or(false),
                    },
                    other => CombinedEntry {
                        alternatives: string_list(other, k)?,
                        grouped: false,
                    },
                };
                vocab.combined_labels.insert(ids, entry);
            }
        }
        Ok(vocab)
    }

    pub fn to_json(&self) -> String {
        let single: Map<String, Value> = self
            .single_labels
            .iter()
            .map(|(k, v)| (k.to_string(), Value::from(v.clone())))
            .collect();
        let combined: Map<String, Value> = self
            .combined_labels
            .iter()
            .map(|(k, e)| {
                let key = ConceptKey::Combined(k.clone()).to_string();
                let v = if e.grouped {
                    serde_json::json!({"alternatives": e.alternatives, "grouped": true})
                } else {
                    Value::from(e.alternatives.clone())
                };
                (key, v)
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "single_labels": single,
            "combined_labels": combined,
        }))
        .expect("vocabulary serializes")
    }

    pub fn alternatives(&self, key: &ConceptKey) -> Option<&[String]> {
        match key {
            ConceptKey::Single(id) => self.single_labels.get(id).map(Vec::as_slice),
            ConceptKey::Combined(ids) => self
                .combined_labels
                .get(ids)
                .map(|e| e.alternatives.as_slice()),
        }
    }

    pub fn keys(&self) -> Vec<ConceptKey> {
        self.single_labels
            .keys()
            .map(|&id| ConceptKey::Single(id))
            .chain(
                self.combined_labels
                    .keys()
                    .map(|ids| ConceptKey::Combined(ids.clone())),
            )
            .collect()
    }

    /// Finds the entry listing `name` among its alternatives.
    pub fn key_for_name(&self, name: &str) -> Option<ConceptKey> {
        let wanted = normalize_alternative(name);
        self.keys().into_iter().find(|k| {
            self.alternatives(k)
                .map(|alts| alts.iter().any(|a| normalize_alternative(a) == wanted))
                .unwrap_or(false)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// A schema singleton ID has no `single_labels` entry.
    MissingSingleLabel,
    /// A non-grouped combined key references an ID without a single entry.
    DanglingCombinedReference,
    /// A non-background entry has fewer than five alternatives.
    TooFewAlternatives,
    /// The same alternative (case/whitespace-insensitive) under two keys.
    DuplicateAlternative,
    /// Background carries something other than exactly `["background"]`.
    DecoratedBackground,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::MissingSingleLabel => "missing-single-label",
            Rule::DanglingCombinedReference => "dangling-combined-reference",
            Rule::TooFewAlternatives => "too-few-alternatives",
            Rule::DuplicateAlternative => "duplicate-alternative",
            Rule::DecoratedBackground => "decorated-background",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: Rule,
    pub key: String,
    pub message: String,
}

pub fn validate_expansion(schema: &LabelSchema, vocab: &ExpandedVocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    for id in schema.singleton_ids() {
        if !vocab.single_labels.contains_key(&id) {
            out.push(Violation {
                rule_id: Rule::MissingSingleLabel,
                key: id.to_string(),
                message: format!("label ID {id} has no entry in single_labels"),
            });
        }
    }
    for (ids, entry) in &vocab.combined_labels {
        if entry.grouped {
            continue;
        }
        let missing: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|id| !vocab.single_labels.contains_key(id))
            .collect();
        if !missing.is_empty() {
            out.push(Violation {
                rule_id: Rule::DanglingCombinedReference,
                key: ConceptKey::Combined(ids.clone()).to_string(),
                message: format!("combined label references undefined IDs {missing:?}"),
            });
        }
    }
    for key in vocab.keys() {
        if key == ConceptKey::Single(0) {
            continue;
        }
        let n = vocab.alternatives(&key).map_or(0, <[String]>::len);
        if n < MIN_ALTERNATIVES {
            out.push(Violation {
                rule_id: Rule::TooFewAlternatives,
                key: key.to_string(),
                message: format!("{n} alternatives, at least {MIN_ALTERNATIVES} required"),
            });
        }
    }
    let mut seen: HashMap<String, ConceptKey> = HashMap::new();
    for key in vocab.keys() {
        for alt in vocab.alternatives(&key).unwrap_or_default() {
            let norm = normalize_alternative(alt);
            match seen.get(&norm) {
                Some(first) if *first != key => out.push(Violation {
                    rule_id: Rule::DuplicateAlternative,
                    key: key.to_string(),
                    message: format!("{alt:?} is already used by {first}"),
                }),
                Some(_) => {}
                None => {
                    seen.insert(norm, key.clone());
                }
            }
        }
    }
    if let Some(bg) = vocab.single_labels.get(&0) {
        if bg.len() != 1 || normalize_alternative(&bg[0]) != BACKGROUND {
            out.push(Violation {
                rule_id: Rule::DecoratedBackground,
                key: "0".into(),
                message: format!("background must be exactly [\"background\"], got {bg:?}"),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictSeverity {
    None,
    Minor,
    Major,
}

/// Outcome of a cross-dataset label-definition comparison.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictRecord {
    pub has_conflict: bool,
    pub conflict_severity: ConflictSeverity,
    pub conflict_description: String,
    pub recommendations: Vec<String>,
    pub affected_datasets: Vec<String>,
}

impl ConflictRecord {
    pub fn parse(raw: &str) -> Result<Self> {
        let doc = parse_document(raw)?;
        let rec: ConflictRecord =
            serde_json::from_value(doc).map_err(|e| Error::Parse(e.to_string()))?;
        let severe = rec.conflict_severity != ConflictSeverity::None;
        if rec.has_conflict != severe {
            return Err(Error::Consistency(format!(
                "has_conflict={} contradicts severity {:?}",
                rec.has_conflict, rec.conflict_severity
            )));
        }
        Ok(rec)
    }
}

pub fn parse_conflict_record(raw: &str) -> Result<ConflictRecord> {
    ConflictRecord::parse(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSamplingPolicy {
    pub default_probability: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub foreground_oversample_probability: f64,
}

impl Default for PromptSamplingPolicy {
    fn default() -> Self {
        PromptSamplingPolicy {
            default_probability: 0.25,
            n_positive: 2,
            n_negative: 1,
            foreground_oversample_probability: 0.85,
        }
    }
}

impl PromptSamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.default_probability) || !prob(self.foreground_oversample_probability) {
            return Err(Error::Config("sampling probabilities must lie in [0, 1]".into()));
        }
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(Error::Config("prompt counts must be positive".into()));
        }
        Ok(())
    }
}

/// Canonical (first) alternative with the policy's default probability,
/// otherwise a uniform draw over the remaining ones.
pub fn sample_variant<'a, R: Rng + ?Sized>(
    alternatives: &'a [String],
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<&'a str> {
    match alternatives {
        [] => Err(Error::Sampling("no alternatives to sample from".into())),
        [only] => Ok(only),
        [canonical, rest @ ..] => {
            if rng.gen::<f64>() < policy.default_probability {
                Ok(canonical)
            } else {
                Ok(&rest[rng.gen_range(0..rest.len())])
            }
        }
    }
}

pub fn sample_prompt_variant<'a, R: Rng + ?Sized>(
    vocab: &'a ExpandedVocabulary,
    key: &ConceptKey,
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<&'a str> {
    let alts = vocab
        .alternatives(key)
        .ok_or_else(|| Error::Lookup(format!("concept {key} is not in the vocabulary")))?;
    sample_variant(alts, rng, policy)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet<K> {
    pub positives: Vec<(K, String)>,
    pub negatives: Vec<(K, String)>,
}

fn draw_keys<K: Clone, R: Rng + ?Sized>(pool: &[K], n: usize, rng: &mut R) -> Vec<K> {
    if pool.len() >= n {
        pool.choose_multiple(rng, n).cloned().collect()
    } else {
        (0..n)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect()
    }
}

/// Draws the positive and negative prompts for one training image. Keys are
/// drawn without replacement when the pool is large enough.
pub fn sample_prompt_set<'a, K, F, R>(
    present: &[K],
    absent: &[K],
    alternatives: F,
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<PromptSet<K>>
where
    K: Clone + fmt::Debug,
    F: Fn(&K) -> Option<&'a [String]>,
    R: Rng + ?Sized,
{
    if present.is_empty() {
        return Err(Error::Sampling("no present concept for positive prompts".into()));
    }
    if absent.is_empty() {
        return Err(Error::Sampling("no absent concept for the negative prompt".into()));
    }
    let draw = |keys: Vec<K>, rng: &mut R| -> Result<Vec<(K, String)>> {
        keys.into_iter()
            .map(|k| {
                let alts = alternatives(&k)
                    .ok_or_else(|| Error::Lookup(format!("concept {k:?} has no prompts")))?;
                let text = sample_variant(alts, rng, policy)?.to_string();
                Ok((k, text))
            })
            .collect()
    };
    let pos_keys = draw_keys(present, policy.n_positive, rng);
    let positives = draw(pos_keys, rng)?;
    let neg_keys = draw_keys(absent, policy.n_negative, rng);
    let negatives = draw(neg_keys, rng)?;
    Ok(PromptSet {
        positives,
        negatives,
    })
}

pub fn sample_training_prompts<R: Rng + ?Sized>(
    present: &[ConceptKey],
    absent: &[ConceptKey],
    vocab: &ExpandedVocabulary,
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<PromptSet<ConceptKey>> {
    for k in present.iter().chain(absent) {
        if vocab.alternatives(k).is_none() {
            return Err(Error::Lookup(format!("concept {k} is not in the vocabulary")));
        }
    }
    sample_prompt_set(present, absent, |k| vocab.alternatives(k), rng, policy)
}
