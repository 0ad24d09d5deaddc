//! Synthetic corpora, generated in memory or stored on disk.
//!
//! Layout under a dataset root (all paths in the manifest are relative to it):
//!
//! ```text
//! manifest.json            format version, generation config, case list
//! vocab.json               expanded vocabulary of the scene concepts
//! schema.json              label schema of the scene concepts
//! embeddings.bin           embedding cache of every prompt in the corpus
//! cases/<id>/volume.f32    little-endian f32, C-order over the case shape
//! cases/<id>/mask_<k>.u8   one byte (0 or 1) per voxel, one file per target
//! cases/<id>/prompts.json  {"positive": {key: [..]}, "negative": {key: [..]}}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synth::{generate_scene, rasterize, SceneConfig, SpatialQualifier, Target, TrainingSample};
use crate::tensor::{voxel_count, Dims, Field, Mask};
use crate::text::{EmbedMode, EmbeddingCache, StubEmbedder, TextEncoder, DEFAULT_EMBED_DIM};
use crate::vocab::ExpandedVocabulary;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split {s:?}"))),
        }
    }
}

/// How prompt texts are embedded for a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub mode: EmbedMode,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            mode: EmbedMode::Lexicon,
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl EmbedderSpec {
    /// In lexicon mode every target key is registered as its own concept with
    /// all of its prompt phrasings as synonyms.
    pub fn build(&self, scene: &SceneConfig) -> Result<StubEmbedder> {
        let mut e = StubEmbedder::new(self.mode, self.dim, self.seed)?;
        if self.mode == EmbedMode::Lexicon {
            for (key, prompts) in target_prompts(scene) {
                e.register(&key, &prompts);
            }
        }
        Ok(e)
    }
}

/// Every target key a scene configuration can produce, with its prompts.
pub fn target_prompts(scene: &SceneConfig) -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    for c in &scene.concepts {
        let mut synonyms = vec![c.name.clone()];
        synonyms.extend(c.synonyms.iter().cloned());
        let mut targets = vec![Target::concept(&c.name), Target::bright(&c.name)];
        for axis in &scene.qualifier_axes {
            for q in SpatialQualifier::for_axis(*axis) {
                targets.push(Target::qualified(&c.name, q));
            }
        }
        for t in targets {
            out.insert(t.to_string(), t.prompts(&synonyms));
        }
    }
    out
}

/// Embedding lookups backed by a precomputed cache, falling back to the
/// embedder for texts outside it.
#[derive(Clone, Debug)]
pub struct PromptEmbedder {
    embedder: StubEmbedder,
    cache: EmbeddingCache,
}

impl PromptEmbedder {
    pub fn new(embedder: StubEmbedder, cache: EmbeddingCache) -> Result<Self> {
        if cache.embedder_id() != embedder.id() || cache.dim() != embedder.dim() {
            return Err(Error::Consistency(format!(
                "embedding cache from {:?} does not match embedder {:?}",
                cache.embedder_id(),
                embedder.id()
            )));
        }
        Ok(PromptEmbedder { embedder, cache })
    }

    pub fn for_scene(scene: &SceneConfig, spec: &EmbedderSpec) -> Result<Self> {
        let embedder = spec.build(scene)?;
        let texts: Vec<String> = target_prompts(scene).into_values().flatten().collect();
        let cache = EmbeddingCache::precompute(&embedder, &texts)?;
        Ok(PromptEmbedder { embedder, cache })
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embedder(&self) -> &StubEmbedder {
        &self.embedder
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn vector(&self, text: &str) -> Result<Vec<f32>> {
        if let Some(v) = self.cache.vector(text) {
            return Ok(v.to_vec());
        }
        let e = self.embedder.embed(text)?;
        if e.fallback {
            log::debug!("{text:?} is outside the lexicon; using hashed embedding");
        }
        Ok(e.embedding.vector)
    }
}

/// Everything needed to regenerate a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub embedder: EmbedderSpec,
}

impl DataConfig {
    /// 64^3 scenes, 200 training cases and a 40-case held-out test split.
    pub fn desk() -> Self {
        DataConfig {
            scene: SceneConfig::desk(),
            n_train: 200,
            n_val: 20,
            n_test: 40,
            seed: 0,
            embedder: EmbedderSpec::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Cases are laid out train, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        if i < self.n_train {
            Split::Train
        } else if i < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn case_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, &[i as u64])
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.total() == 0 {
            return Err(Error::Config("dataset has no cases".into()));
        }
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }

    /// Generates case `i` from its own seed.
    pub fn generate_case(&self, vocab: &ExpandedVocabulary, i: usize) -> Result<TrainingSample> {
        let scene = generate_scene(&self.scene, self.case_seed(i))?;
        rasterize(&scene, vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub shape: Dims,
    pub volume: String,
    /// Target key to mask file.
    pub masks: BTreeMap<String, String>,
    pub prompts: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub data: DataConfig,
    pub vocabulary: String,
    pub schema: String,
    pub embeddings: String,
    pub cases: Vec<CaseEntry>,
}

#[derive(Serialize, Deserialize)]
struct PromptDoc {
    positive: BTreeMap<String, Vec<String>>,
    negative: BTreeMap<String, Vec<String>>,
}

enum Store {
    Memory(Vec<TrainingSample>),
    Disk(PathBuf),
}

/// A corpus: manifest plus case storage. Disk cases are read on demand.
pub struct Dataset {
    manifest: Manifest,
    store: Store,
}

fn case_entry(cfg: &DataConfig, i: usize, sample: &TrainingSample) -> CaseEntry {
    let id = format!("case_{i:05}");
    let dir = format!("cases/{id}");
    CaseEntry {
        split: cfg.split_of(i),
        seed: cfg.case_seed(i),
        shape: sample.dims(),
        volume: format!("{dir}/volume.f32"),
        masks: sample
            .masks
            .keys()
            .enumerate()
            .map(|(k, key)| (key.clone(), format!("{dir}/mask_{k:02}.u8")))
            .collect(),
        prompts: format!("{dir}/prompts.json"),
        id,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Generates every case into memory.
    pub fn generate(cfg: DataConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.scene.vocabulary();
        let mut cases = Vec::with_capacity(cfg.total());
        let mut samples = Vec::with_capacity(cfg.total());
        for i in 0..cfg.total() {
            let s = cfg.generate_case(&vocab, i)?;
            cases.push(case_entry(&cfg, i, &s));
            samples.push(s);
        }
        Ok(Dataset {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                data: cfg,
                vocabulary: "vocab.json".into(),
                schema: "schema.json".into(),
                embeddings: "embeddings.bin".into(),
                cases,
            },
            store: Store::Memory(samples),
        })
    }

    /// Generates the corpus case by case straight to `root`.
    pub fn write(cfg: &DataConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.scene.vocabulary();
        fs::create_dir_all(root.join("cases")).map_err(|e| Error::io(root, e))?;
        let mut manifest = Manifest {
            format_version: FORMAT_VERSION,
            data: cfg.clone(),
            vocabulary: "vocab.json".into(),
            schema: "schema.json".into(),
            embeddings: "embeddings.bin".into(),
            cases: Vec::with_capacity(cfg.total()),
        };
        let mut texts = BTreeSet::new();
        for i in 0..cfg.total() {
            let s = cfg.generate_case(&vocab, i)?;
            let entry = case_entry(cfg, i, &s);
            write_case(root, &entry, &s)?;
            texts.extend(s.prompt_bank.values().flatten().cloned());
            texts.extend(s.negative_bank.values().flatten().cloned());
            manifest.cases.push(entry);
            log::info!("wrote case {}/{}", i + 1, cfg.total());
        }
        write_file(&root.join(&manifest.vocabulary), vocab.to_json().as_bytes())?;
        write_file(
            &root.join(&manifest.schema),
            cfg.scene.label_schema().to_json().as_bytes(),
        )?;
        let embedder = cfg.embedder.build(&cfg.scene)?;
        let texts: Vec<String> = texts.into_iter().collect();
        EmbeddingCache::precompute(&embedder, &texts)?.save(&root.join(&manifest.embeddings))?;
        write_file(
            &root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(Dataset {
            manifest,
            store: Store::Disk(root.to_path_buf()),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "{}: unsupported format version {}",
                path.display(),
                manifest.format_version
            )));
        }
        manifest.data.validate()?;
        Ok(Dataset {
            manifest,
            store: Store::Disk(root.to_path_buf()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.data
    }

    pub fn len(&self) -> usize {
        self.manifest.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.cases.is_empty()
    }

    pub fn entry(&self, i: usize) -> &CaseEntry {
        &self.manifest.cases[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.cases[i].split == split)
            .collect()
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.store {
            Store::Disk(p) => Some(p),
            Store::Memory(_) => None,
        }
    }

    pub fn case(&self, i: usize) -> Result<TrainingSample> {
        let entry = self
            .manifest
            .cases
            .get(i)
            .ok_or_else(|| Error::Lookup(format!("case index {i} out of range")))?;
        match &self.store {
            Store::Memory(samples) => Ok(samples[i].clone()),
            Store::Disk(root) => read_case(root, entry),
        }
    }

    pub fn vocabulary(&self) -> ExpandedVocabulary {
        self.manifest.data.scene.vocabulary()
    }

    /// Embedder for this corpus, using the stored cache when there is one.
    pub fn prompt_embedder(&self) -> Result<PromptEmbedder> {
        let data = &self.manifest.data;
        match &self.store {
            Store::Memory(_) => PromptEmbedder::for_scene(&data.scene, &data.embedder),
            Store::Disk(root) => {
                let embedder = data.embedder.build(&data.scene)?;
                let cache = EmbeddingCache::load(&root.join(&self.manifest.embeddings))?;
                PromptEmbedder::new(embedder, cache)
            }
        }
    }

    /// Persists an in-memory corpus under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let Store::Memory(samples) = &self.store else {
            return Err(Error::InvalidInput("dataset is already on disk".into()));
        };
        fs::create_dir_all(root.join("cases")).map_err(|e| Error::io(root, e))?;
        for (entry, s) in self.manifest.cases.iter().zip(samples) {
            write_case(root, entry, s)?;
        }
        let data = &self.manifest.data;
        write_file(
            &root.join(&self.manifest.vocabulary),
            data.scene.vocabulary().to_json().as_bytes(),
        )?;
        write_file(
            &root.join(&self.manifest.schema),
            data.scene.label_schema().to_json().as_bytes(),
        )?;
        let texts: Vec<String> = samples
            .iter()
            .flat_map(|s| s.prompt_bank.values().chain(s.negative_bank.values()))
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let embedder = data.embedder.build(&data.scene)?;
        EmbeddingCache::precompute(&embedder, &texts)?.save(&root.join(&self.manifest.embeddings))?;
        write_file(
            &root.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )
    }
}

fn write_case(root: &Path, entry: &CaseEntry, s: &TrainingSample) -> Result<()> {
    let vol = root.join(&entry.volume);
    if let Some(dir) = vol.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = s.volume.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&vol, &bytes)?;
    for (key, file) in &entry.masks {
        write_file(&root.join(file), &s.masks[key].data)?;
    }
    let doc = PromptDoc {
        positive: s.prompt_bank.clone(),
        negative: s.negative_bank.clone(),
    };
    write_file(
        &root.join(&entry.prompts),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )
}

fn read_case(root: &Path, entry: &CaseEntry) -> Result<TrainingSample> {
    let n = voxel_count(entry.shape);
    let path = root.join(&entry.volume);
    let raw = read_file(&path)?;
    if raw.len() != 4 * n {
        return Err(Error::Parse(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            raw.len(),
            entry.shape
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let volume = Field::from_vec(1, entry.shape, data)?;
    let mut masks = BTreeMap::new();
    for (key, file) in &entry.masks {
        let path = root.join(file);
        let data = read_file(&path)?;
        if data.len() != n || data.iter().any(|&b| b > 1) {
            return Err(Error::Parse(format!(
                "{}: not a 0/1 mask of shape {:?}",
                path.display(),
                entry.shape
            )));
        }
        masks.insert(key.clone(), Mask::from_vec(entry.shape, data)?);
    }
    let path = root.join(&entry.prompts);
    let doc: PromptDoc = serde_json::from_slice(&read_file(&path)?)?;
    if doc.positive.keys().ne(masks.keys()) {
        return Err(Error::Consistency(format!(
            "{}: prompt keys do not match the mask files",
            path.display()
        )));
    }
    Ok(TrainingSample {
        volume,
        masks,
        prompt_bank: doc.positive,
        negative_bank: doc.negative,
    })
}
