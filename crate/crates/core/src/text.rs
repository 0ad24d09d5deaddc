//! Prompt embedding: the instruction template, a pluggable encoder contract,
//! a deterministic stub encoder and a precomputed embedding cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INSTRUCTION_PREFIX: &str = "Instruct: Given an anatomical term query, retrieve the precise anatomical entity and location it represents. Query: ";
pub const INSTRUCTION_SUFFIX: &str = ".";

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Wraps a raw prompt in the fixed retrieval instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub prefix: &'static str,
    pub suffix: &'static str,
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        InstructionTemplate {
            prefix: INSTRUCTION_PREFIX,
            suffix: INSTRUCTION_SUFFIX,
        }
    }
}

impl InstructionTemplate {
    pub fn render(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        Ok(format!("{}{}{}", self.prefix, prompt, self.suffix))
    }
}

pub fn format_instruction(prompt: &str) -> Result<String> {
    InstructionTemplate::default().render(prompt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub source_text: String,
    pub embedder_id: String,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn cosine(a: &TextEmbedding, b: &TextEmbedding) -> f64 {
    let dot: f64 = a
        .vector
        .iter()
        .zip(&b.vector)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    dot / (a.norm() * b.norm())
}

/// Result of one encoder call. `fallback` is set when a lexicon encoder did
/// not recognise the text and hashed it instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub embedding: TextEmbedding,
    pub fallback: bool,
}

/// Anything that maps prompt text to a fixed-dimension vector.
pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn mode(&self) -> EmbedMode;
    fn encode(&self, text: &str) -> Result<Embedded>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Hash,
    Lexicon,
}

impl EmbedMode {
    fn code(self) -> u8 {
        match self {
            EmbedMode::Hash => 0,
            EmbedMode::Lexicon => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(EmbedMode::Hash),
            1 => Ok(EmbedMode::Lexicon),
            other => Err(Error::Parse(format!("unknown embedder mode code {other}"))),
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedMode::Hash => f.write_str("hash"),
            EmbedMode::Lexicon => f.write_str("lexicon"),
        }
    }
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(EmbedMode::Hash),
            "lexicon" => Ok(EmbedMode::Lexicon),
            other => Err(Error::InvalidInput(format!("unknown embedder mode {other:?}"))),
        }
    }
}

/// 64-bit FNV-1a, stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalize_key(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

const SYNONYM_OFFSET_NORM: f64 = 0.1;

/// Deterministic stand-in for a frozen sentence encoder.
///
/// `Hash` mode hashes character n-grams (n = 2..=4) of the instruction-wrapped
/// text into `dim` signed buckets; only n-grams overlapping the query span
/// contribute, so the shared template does not swamp the signal. `Lexicon`
/// mode maps registered synonyms of one concept to a shared random base vector
/// plus a small offset orthogonal to it.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    mode: EmbedMode,
    dim: usize,
    seed: u64,
    id: String,
    template: InstructionTemplate,
    lexicon: HashMap<String, String>,
}

impl StubEmbedder {
    pub fn new(mode: EmbedMode, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        Ok(StubEmbedder {
            mode,
            dim,
            seed,
            id: format!("stub-{mode}-d{dim}-s{seed}"),
            template: InstructionTemplate::default(),
            lexicon: HashMap::new(),
        })
    }

    pub fn hash(dim: usize) -> Result<Self> {
        Self::new(EmbedMode::Hash, dim, 0)
    }

    pub fn lexicon(dim: usize, seed: u64) -> Result<Self> {
        Self::new(EmbedMode::Lexicon, dim, seed)
    }

    /// Registers `synonyms` as surface forms of `concept`.
    pub fn register<S: AsRef<str>>(&mut self, concept: &str, synonyms: &[S]) {
        for s in synonyms {
            self.lexicon
                .insert(normalize_key(s.as_ref()), concept.to_string());
        }
    }

    pub fn concept_of(&self, text: &str) -> Option<&str> {
        self.lexicon.get(&normalize_key(text)).map(String::as_str)
    }

    pub fn embed(&self, text: &str) -> Result<Embedded> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("text is empty".into()));
        }
        let (raw, fallback) = match self.mode {
            EmbedMode::Hash => (self.hash_vector(text)?, false),
            EmbedMode::Lexicon => match self.concept_of(text) {
                Some(concept) => (self.lexicon_vector(concept, text), false),
                None => (self.hash_vector(text)?, true),
            },
        };
        Ok(Embedded {
            embedding: TextEmbedding {
                vector: unit_f32(&raw),
                source_text: text.to_string(),
                embedder_id: self.id.clone(),
            },
            fallback,
        })
    }

    fn hash_vector(&self, text: &str) -> Result<Vec<f64>> {
        let wrapped: Vec<char> = self.template.render(text)?.chars().collect();
        let start = self.template.prefix.chars().count();
        let end = start + text.chars().count();
        let mut v = vec![0.0f64; self.dim];
        let mut buf = String::new();
        for n in 2..=4usize {
            for i in 0..wrapped.len().saturating_sub(n - 1) {
                // keep n-grams that touch the query span
                if i + n <= start || i >= end {
                    continue;
                }
                buf.clear();
                buf.extend(&wrapped[i..i + n]);
                let h = fnv1a(buf.as_bytes()) ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let bucket = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
                v[bucket] += sign;
            }
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        Ok(v)
    }

    fn gaussian(&self, key: &str, salt: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()) ^ self.seed ^ salt);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn lexicon_vector(&self, concept: &str, text: &str) -> Vec<f64> {
        let base = unit(&self.gaussian(concept, 0x5eed_0001));
        let mut offset = self.gaussian(&normalize_key(text), 0x5eed_0002);
        let along: f64 = offset.iter().zip(&base).map(|(a, b)| a * b).sum();
        for (o, b) in offset.iter_mut().zip(&base) {
            *o -= along * b;
        }
        let offset = unit(&offset);
        base.iter()
            .zip(&offset)
            .map(|(b, o)| b + SYNONYM_OFFSET_NORM * o)
            .collect()
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    unit(v).into_iter().map(|x| x as f32).collect()
}

impl TextEncoder for StubEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn mode(&self) -> EmbedMode {
        self.mode
    }

    fn encode(&self, text: &str) -> Result<Embedded> {
        self.embed(text)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"VLSEGEMB";
const CACHE_VERSION: u32 = 1;

/// Embeddings precomputed for a fixed set of raw prompt texts.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    embedder_id: String,
    mode: EmbedMode,
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(embedder_id: &str, mode: EmbedMode, dim: usize) -> Self {
        EmbeddingCache {
            embedder_id: embedder_id.to_string(),
            mode,
            dim,
            entries: BTreeMap::new(),
        }
    }

    /// Embeds every distinct text once. Texts the encoder could only hash are
    /// logged as warnings.
    pub fn precompute<E: TextEncoder + ?Sized, S: AsRef<str>>(
        encoder: &E,
        texts: &[S],
    ) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("no texts to embed".into()));
        }
        let mut cache = EmbeddingCache::new(encoder.id(), encoder.mode(), encoder.dim());
        for t in texts {
            let t = t.as_ref();
            if cache.entries.contains_key(t) {
                continue;
            }
            let e = encoder.encode(t)?;
            if e.fallback {
                log::warn!("{t:?} is not in the lexicon; using hashed embedding");
            }
            cache.entries.insert(t.to_string(), e.embedding.vector);
        }
        Ok(cache)
    }

    pub fn insert(&mut self, embedding: TextEmbedding) -> Result<()> {
        if embedding.embedder_id != self.embedder_id {
            return Err(Error::InvalidInput(format!(
                "embedding from {} cannot join cache of {}",
                embedding.embedder_id, self.embedder_id
            )));
        }
        if embedding.dim() != self.dim {
            return Err(Error::Shape(format!(
                "embedding dimension {} != cache dimension {}",
                embedding.dim(),
                self.dim
            )));
        }
        self.entries.insert(embedding.source_text, embedding.vector);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<TextEmbedding> {
        self.entries.get(text).map(|v| TextEmbedding {
            vector: v.clone(),
            source_text: text.to_string(),
            embedder_id: self.embedder_id.clone(),
        })
    }

    pub fn vector(&self, text: &str) -> Option<&[f32]> {
        self.entries.get(text).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn mode(&self) -> EmbedMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Binary layout (all integers little-endian):
    /// magic `VLSEGEMB`, u32 version, u32 id length, id bytes, u8 mode,
    /// u32 dimension, u64 entry count, then per entry: u32 text length,
    /// UTF-8 text, `dim` f32 values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.embedder_id.len() as u32).to_le_bytes())?;
        w.write_all(self.embedder_id.as_bytes())?;
        w.write_all(&[self.mode.code()])?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (text, v) in &self.entries {
            w.write_all(&(text.len() as u32).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Parse("not an embedding cache file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::Parse(format!("unsupported cache version {version}")));
        }
        let id = read_string(&mut r)?;
        let mut mode = [0u8; 1];
        read_exact(&mut r, &mut mode)?;
        let mode = EmbedMode::from_code(mode[0])?;
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let mut cache = EmbeddingCache::new(&id, mode, dim);
        for _ in 0..count {
            let text = read_string(&mut r)?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                v.push(f32::from_le_bytes(b));
            }
            cache.entries.insert(text, v);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Parse(format!("truncated cache file: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| Error::Parse(format!("cache text is not UTF-8: {e}")))
}
