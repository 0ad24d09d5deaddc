//! Inference, metric reports, prompt stability and the fusion ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{target_prompts, Dataset, PromptEmbedder, Split};
use crate::error::{shape_err, Error, Result};
use crate::loss::{dice_metric, hit_rate, sigmoid, HIT_THRESHOLD};
use crate::nn::{Checkpoint, FusionNet, NetworkConfig};
use crate::synth::Target;
use crate::tensor::{Field, Mask};
use crate::train::{train, TrainConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Foreground wherever `sigmoid(logit) >= threshold`.
pub fn threshold_logits(logits: &Field<f32>, threshold: f64) -> Result<Mask> {
    if logits.channels != 1 {
        return Err(shape_err!("expected one logit channel, got {}", logits.channels));
    }
    let data = logits
        .data
        .iter()
        .map(|&x| (sigmoid(x as f64) >= threshold) as u8)
        .collect();
    Mask::from_vec(logits.dims, data)
}

/// Anything that turns (volume, prompt) into a binary mask.
pub trait Predictor {
    fn predict(&mut self, volume: &Field<f32>, prompt: &str) -> Result<Mask>;

    fn predict_many(&mut self, volume: &Field<f32>, prompts: &[&str]) -> Result<Vec<Mask>> {
        prompts.iter().map(|p| self.predict(volume, p)).collect()
    }
}

/// A trained network with its embedder. The volume is encoded once per
/// `predict_many` call.
pub struct NetPredictor {
    net: FusionNet,
    params: Vec<f32>,
    embedder: PromptEmbedder,
    pub threshold: f64,
}

impl NetPredictor {
    pub fn new(checkpoint: Checkpoint, embedder: PromptEmbedder) -> Result<Self> {
        if embedder.dim() != checkpoint.config.text_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match text_dim {}",
                embedder.dim(),
                checkpoint.config.text_dim
            )));
        }
        Ok(NetPredictor {
            net: FusionNet::new(checkpoint.config)?,
            params: checkpoint.params,
            embedder,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.net.config()
    }

    /// Finest-scale logits for each prompt.
    pub fn logits(&self, volume: &Field<f32>, prompts: &[&str]) -> Result<Vec<Field<f32>>> {
        self.net.config().check_input_dims(volume.dims)?;
        let features = self.net.encode(&self.params, volume)?;
        let bottleneck = &features.stages[self.net.config().n_stages - 1];
        prompts
            .iter()
            .map(|p| {
                let q = self.embedder.vector(p)?;
                let guidance = self.net.prompt_decode(&self.params, &q, bottleneck)?;
                let mut bundle = self.net.decode(&self.params, &features, &guidance)?;
                Ok(bundle.logits.swap_remove(0))
            })
            .collect()
    }
}

impl Predictor for NetPredictor {
    fn predict(&mut self, volume: &Field<f32>, prompt: &str) -> Result<Mask> {
        Ok(self.predict_many(volume, &[prompt])?.remove(0))
    }

    fn predict_many(&mut self, volume: &Field<f32>, prompts: &[&str]) -> Result<Vec<Mask>> {
        self.logits(volume, prompts)?
            .iter()
            .map(|l| threshold_logits(l, self.threshold))
            .collect()
    }
}

/// Thresholded finest-scale prediction of one prompt.
pub fn predict(
    checkpoint: &Checkpoint,
    volume: &Field<f32>,
    prompt: &str,
    embedder: &PromptEmbedder,
) -> Result<Mask> {
    NetPredictor::new(checkpoint.clone(), embedder.clone())?.predict(volume, prompt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSelection {
    /// The first (canonical) phrasing of every target.
    Canonical,
    /// Every phrasing in the prompt banks.
    AllVariants,
}

impl std::str::FromStr for PromptSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(PromptSelection::Canonical),
            "all-variants" => Ok(PromptSelection::AllVariants),
            _ => Err(Error::Parse(format!("unknown prompt selection {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub prompt: String,
    pub dice: f64,
    pub target: String,
    pub positive: bool,
    pub spatial: bool,
    pub gt_voxels: usize,
    pub pred_voxels: usize,
    pub pred_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseError {
    pub case_id: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    Positive,
    Negative,
    /// Positive prompts with a spatial qualifier.
    Spatial,
}

impl Subset {
    pub fn contains(self, row: &EvalRow) -> bool {
        match self {
            Subset::All => true,
            Subset::Positive => row.positive,
            Subset::Negative => !row.positive,
            Subset::Spatial => row.positive && row.spatial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    pub mean_dice: f64,
    pub hit_rate_5: f64,
    pub mean_pred_fraction: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregates over the rows in `subset`; `None` when it is empty.
pub fn summarize(rows: &[EvalRow], subset: Subset) -> Option<Summary> {
    let picked: Vec<&EvalRow> = rows.iter().filter(|r| subset.contains(r)).collect();
    if picked.is_empty() {
        return None;
    }
    let dices: Vec<f64> = picked.iter().map(|r| r.dice).collect();
    let fractions: Vec<f64> = picked.iter().map(|r| r.pred_fraction).collect();
    Some(Summary {
        rows: picked.len(),
        mean_dice: mean(&dices),
        hit_rate_5: hit_rate(&dices, HIT_THRESHOLD).ok()?,
        mean_pred_fraction: mean(&fractions),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EvalRow>,
    pub errors: Vec<CaseError>,
    pub mean_dice: f64,
    pub hit_rate_5: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<EvalRow>, errors: Vec<CaseError>) -> Result<Self> {
        let all = summarize(&rows, Subset::All)
            .ok_or_else(|| Error::InvalidInput("no evaluation rows".into()))?;
        Ok(MetricReport {
            mean_dice: all.mean_dice,
            hit_rate_5: all.hit_rate_5,
            rows,
            errors,
        })
    }

    pub fn summary(&self, subset: Subset) -> Option<Summary> {
        summarize(&self.rows, subset)
    }

    /// Columns: case_id, prompt, dice, target, kind, spatial, gt_voxels,
    /// pred_voxels, pred_fraction.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "case_id\tprompt\tdice\ttarget\tkind\tspatial\tgt_voxels\tpred_voxels\tpred_fraction\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{:.6}\n",
                r.case_id,
                r.prompt,
                r.dice,
                r.target,
                if r.positive { "positive" } else { "negative" },
                r.spatial,
                r.gt_voxels,
                r.pred_voxels,
                r.pred_fraction
            ));
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let subsets = [
            ("all", Subset::All),
            ("positive", Subset::Positive),
            ("negative", Subset::Negative),
            ("spatial", Subset::Spatial),
        ];
        let mut m = serde_json::Map::new();
        for (name, s) in subsets {
            m.insert(name.into(), serde_json::to_value(self.summary(s)).unwrap());
        }
        m.insert("failed_cases".into(), serde_json::to_value(&self.errors).unwrap());
        serde_json::Value::Object(m)
    }
}

fn pick(texts: &[String], selection: PromptSelection) -> &[String] {
    match selection {
        PromptSelection::Canonical => &texts[..texts.len().min(1)],
        PromptSelection::AllVariants => texts,
    }
}

/// Scores every (case, prompt) pair of `split`, negatives included. Cases that
/// fail to load or predict are recorded and skipped.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &mut P,
    dataset: &Dataset,
    split: Split,
    selection: PromptSelection,
) -> Result<MetricReport> {
    let cases = dataset.indices(split);
    if cases.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} has no cases")));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for i in cases {
        let case_id = dataset.entry(i).id.clone();
        match evaluate_case(predictor, dataset, i, selection) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("{case_id}: {e}");
                errors.push(CaseError {
                    case_id,
                    message: e.to_string(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every case failed ({} errors)",
            errors.len()
        )));
    }
    MetricReport::from_rows(rows, errors)
}

fn evaluate_case<P: Predictor + ?Sized>(
    predictor: &mut P,
    dataset: &Dataset,
    i: usize,
    selection: PromptSelection,
) -> Result<Vec<EvalRow>> {
    let sample = dataset.case(i)?;
    let dims = sample.dims();
    let empty = Mask::zeros(dims);
    let mut jobs: Vec<(&str, &String, bool, &Mask)> = Vec::new();
    for (key, texts) in &sample.prompt_bank {
        for t in pick(texts, selection) {
            jobs.push((key, t, true, &sample.masks[key]));
        }
    }
    for (key, texts) in &sample.negative_bank {
        for t in pick(texts, selection) {
            jobs.push((key, t, false, &empty));
        }
    }
    let prompts: Vec<&str> = jobs.iter().map(|j| j.1.as_str()).collect();
    let preds = predictor.predict_many(&sample.volume, &prompts)?;
    let n = sample.volume.voxels() as f64;
    let case_id = &dataset.entry(i).id;
    jobs.iter()
        .zip(preds)
        .map(|(&(key, text, positive, gt), pred)| {
            Ok(EvalRow {
                case_id: case_id.clone(),
                prompt: text.clone(),
                dice: dice_metric(&pred, gt)?,
                target: key.to_string(),
                positive,
                spatial: key.parse::<Target>()?.is_spatial(),
                gt_voxels: gt.count(),
                pred_voxels: pred.count(),
                pred_fraction: pred.count() as f64 / n,
            })
        })
        .collect()
}

/// Every text reachable from `word` by one character substitution, deletion
/// or adjacent transposition, in a fixed order.
pub fn typo_candidates(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut push = |v: Vec<char>| {
        let s: String = v.into_iter().collect();
        if s != text && !s.trim().is_empty() && !out.contains(&s) {
            out.push(s);
        }
    };
    for i in 0..chars.len() {
        if !chars[i].is_alphabetic() {
            continue;
        }
        for c in 'a'..='z' {
            let mut v = chars.clone();
            v[i] = c;
            push(v);
        }
        let mut v = chars.clone();
        v.remove(i);
        push(v);
        if i + 1 < chars.len() && chars[i + 1].is_alphabetic() {
            let mut v = chars.clone();
            v.swap(i, i + 1);
            push(v);
        }
    }
    out
}

/// One seeded single-character edit of `text`: a substitution, deletion or
/// swap of neighbouring letters, chosen with equal probability.
pub fn make_typo(text: &str, seed: u64) -> Result<String> {
    let chars: Vec<char> = text.chars().collect();
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_alphabetic()).collect();
    if letters.len() < 2 {
        return Err(Error::InvalidInput(format!("{text:?} is too short for a typo")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let mut v = chars.clone();
        let i = *letters.choose(&mut rng).unwrap();
        match rng.gen_range(0..3) {
            0 => {
                let c = (b'a' + rng.gen_range(0..26u8)) as char;
                v[i] = c;
            }
            1 => {
                v.remove(i);
            }
            _ => {
                if i + 1 >= v.len() || !v[i + 1].is_alphabetic() {
                    continue;
                }
                v.swap(i, i + 1);
            }
        }
        let s: String = v.into_iter().collect();
        if s != text && !s.trim().is_empty() {
            return Ok(s);
        }
    }
    Err(Error::Sampling(format!("no typo found for {text:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Synonym,
    Typo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub target: String,
    pub variant: String,
    pub kind: VariantKind,
    pub mean_dice: f64,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub target: String,
    pub variants: usize,
    pub min: f64,
    pub max: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<VariantScore>,
    pub spreads: Vec<Spread>,
    pub skipped: Vec<String>,
}

impl StabilityReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("target\tvariant\tkind\tmean_dice\tcases\n");
        for r in &self.rows {
            let kind = match r.kind {
                VariantKind::Synonym => "synonym",
                VariantKind::Typo => "typo",
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\n",
                r.target, r.variant, kind, r.mean_dice, r.cases
            ));
        }
        s
    }

    pub fn spread_tsv(&self) -> String {
        let mut s = String::from("target\tvariants\tmin\tmax\tiqr\n");
        for r in &self.spreads {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                r.target, r.variants, r.min, r.max, r.iqr
            ));
        }
        s
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub split: Split,
    pub typo_seed: u64,
    /// Restrict to these target keys; all targets of the scene config if empty.
    pub targets: Vec<String>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            split: Split::Test,
            typo_seed: 0,
            targets: Vec::new(),
        }
    }
}

/// Variants of each target: every phrasing plus one seeded typo of each.
pub fn stability_variants(
    dataset: &Dataset,
    cfg: &StabilityConfig,
) -> Result<BTreeMap<String, Vec<(String, VariantKind)>>> {
    let mut out = BTreeMap::new();
    for (key, texts) in target_prompts(&dataset.config().scene) {
        if !cfg.targets.is_empty() && !cfg.targets.contains(&key) {
            continue;
        }
        let mut variants: Vec<(String, VariantKind)> = Vec::new();
        for (j, t) in texts.iter().enumerate() {
            if !variants.iter().any(|(v, _)| v == t) {
                variants.push((t.clone(), VariantKind::Synonym));
            }
            let seed = crate::seed::derive_seed(cfg.typo_seed, &[j as u64, key.len() as u64]);
            let typo = make_typo(t, seed)?;
            if !variants.iter().any(|(v, _)| *v == typo) {
                variants.push((typo, VariantKind::Typo));
            }
        }
        out.insert(key, variants);
    }
    Ok(out)
}

/// Mean Dice of every prompt variant of every target, over the cases of the
/// split where that target is present.
pub fn prompt_stability<P: Predictor + ?Sized>(
    predictor: &mut P,
    dataset: &Dataset,
    cfg: &StabilityConfig,
) -> Result<StabilityReport> {
    let mut variants = stability_variants(dataset, cfg)?;
    let mut skipped = Vec::new();
    variants.retain(|key, v| {
        if v.len() < 2 {
            log::warn!("skipping {key}: only {} prompt variant", v.len());
            skipped.push(key.clone());
            false
        } else {
            true
        }
    });
    let cases = dataset.indices(cfg.split);
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = variants
        .iter()
        .map(|(k, v)| (k.as_str(), (vec![0.0; v.len()], 0)))
        .collect();
    for i in cases {
        let sample = dataset.case(i)?;
        let present: Vec<&str> = variants
            .keys()
            .map(String::as_str)
            .filter(|k| sample.masks.contains_key(*k))
            .collect();
        let mut prompts = Vec::new();
        for k in &present {
            prompts.extend(variants[*k].iter().map(|(t, _)| t.as_str()));
        }
        if prompts.is_empty() {
            continue;
        }
        let preds = predictor.predict_many(&sample.volume, &prompts)?;
        let mut it = preds.iter();
        for k in present {
            let gt = &sample.masks[k];
            let entry = sums.get_mut(k).unwrap();
            for acc in entry.0.iter_mut() {
                *acc += dice_metric(it.next().unwrap(), gt)?;
            }
            entry.1 += 1;
        }
    }
    let mut rows = Vec::new();
    let mut spreads = Vec::new();
    for (key, vs) in &variants {
        let (totals, n) = &sums[key.as_str()];
        if *n == 0 {
            log::warn!("skipping {key}: absent from every case of the split");
            skipped.push(key.clone());
            continue;
        }
        let means: Vec<f64> = totals.iter().map(|t| t / *n as f64).collect();
        for ((text, kind), m) in vs.iter().zip(&means) {
            rows.push(VariantScore {
                target: key.clone(),
                variant: text.clone(),
                kind: *kind,
                mean_dice: *m,
                cases: *n,
            });
        }
        let mut sorted = means.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        spreads.push(Spread {
            target: key.clone(),
            variants: sorted.len(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        });
    }
    skipped.sort();
    Ok(StabilityReport {
        rows,
        spreads,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub fusion_stage_mask: Vec<bool>,
    pub deep_supervision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<AblationVariant>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_split")]
    pub split: Split,
    /// (better, worse) variant names whose spatial-subset gap is tested.
    pub ordering: Option<(String, String)>,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_eval_split() -> Split {
    Split::Test
}

fn default_margin() -> f64 {
    0.03
}

/// Fused-stage counts of the ablation rows, before clamping to the network.
pub const ABLATION_FUSION_COUNTS: [usize; 3] = [1, 3, 5];

impl AblationSpec {
    /// Rows with 1, 3 and 5 fused stages (capped at the decoder depth, finest
    /// first) without deep supervision, then the deepest fusion with it.
    pub fn standard_variants(base: &NetworkConfig) -> Vec<AblationVariant> {
        let depth = base.n_stages - 1;
        let mut out: Vec<AblationVariant> = Vec::new();
        for k in ABLATION_FUSION_COUNTS {
            let k = k.min(depth);
            let mask = NetworkConfig::finest_k_mask(base.n_stages, k);
            if out.iter().any(|v| v.fusion_stage_mask == mask) {
                continue;
            }
            out.push(AblationVariant {
                name: format!("fusion-{k}"),
                fusion_stage_mask: mask,
                deep_supervision: false,
            });
        }
        out.push(AblationVariant {
            name: format!("fusion-{depth}+ds"),
            fusion_stage_mask: NetworkConfig::finest_k_mask(base.n_stages, depth),
            deep_supervision: true,
        });
        out
    }

    pub fn standard(network: NetworkConfig, train: TrainConfig, seeds: Vec<u64>) -> Self {
        let variants = Self::standard_variants(&network);
        let ordering = Some((
            variants.last().unwrap().name.clone(),
            variants[0].name.clone(),
        ));
        AblationSpec {
            variants,
            network,
            train,
            seeds,
            split: Split::Test,
            ordering,
            margin: default_margin(),
        }
    }

    pub fn network_for(&self, v: &AblationVariant) -> Result<NetworkConfig> {
        let mut cfg = self.network.clone();
        cfg.fusion_stage_mask = v.fusion_stage_mask.clone();
        cfg.deep_supervision = v.deep_supervision;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.len() < 2 {
            return Err(Error::Config("an ablation needs at least two variants".into()));
        }
        if self.seeds.len() < 2 {
            return Err(Error::Config("an ablation needs at least two seeds".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::Config(format!("duplicate variant name {:?}", v.name)));
            }
            let net = self.network_for(v)?;
            self.train.validate(&net)?;
        }
        if let Some((a, b)) = &self.ordering {
            for n in [a, b] {
                if !self.variants.iter().any(|v| &v.name == n) {
                    return Err(Error::Config(format!("ordering names unknown variant {n:?}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub positive_dice: f64,
    pub spatial_dice: f64,
    pub negative_fraction: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Self {
        Aggregate {
            mean: mean(xs),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: AblationVariant,
    pub seeds: Vec<SeedResult>,
    pub positive: Aggregate,
    pub spatial: Aggregate,
    pub negative_fraction: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingResult {
    pub better: String,
    pub worse: String,
    pub difference: f64,
    pub margin: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<VariantResult>,
    pub ordering: Option<OrderingResult>,
}

impl AblationTable {
    /// Columns: variant, fused_stages, deep_supervision, subset, mean, min,
    /// max, per_seed (comma separated, in seed order).
    pub fn to_tsv(&self) -> String {
        let mut s =
            String::from("variant\tfused_stages\tdeep_supervision\tsubset\tmean\tmin\tmax\tper_seed\n");
        for r in &self.rows {
            let fused = r.variant.fusion_stage_mask.iter().filter(|&&b| b).count();
            let subsets: [(&str, &Aggregate, fn(&SeedResult) -> f64); 3] = [
                ("positive_dice", &r.positive, |x| x.positive_dice),
                ("spatial_dice", &r.spatial, |x| x.spatial_dice),
                ("negative_fraction", &r.negative_fraction, |x| x.negative_fraction),
            ];
            for (name, agg, get) in subsets {
                let per: Vec<String> = r.seeds.iter().map(|x| format!("{:.6}", get(x))).collect();
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                    r.variant.name,
                    fused,
                    r.variant.deep_supervision,
                    name,
                    agg.mean,
                    agg.min,
                    agg.max,
                    per.join(",")
                ));
            }
        }
        s
    }
}

/// Trains every (variant, seed) on the same data and budget and evaluates each
/// on the held-out split with canonical prompts. Any failure aborts the run.
pub fn run_ablation(dataset: &Dataset, spec: &AblationSpec, out_dir: Option<&Path>) -> Result<AblationTable> {
    spec.validate()?;
    let embedder = dataset.prompt_embedder()?;
    let mut rows = Vec::new();
    for v in &spec.variants {
        let net = spec.network_for(v)?;
        let mut seeds = Vec::new();
        for &seed in &spec.seeds {
            let mut tc = spec.train.clone();
            tc.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", v.name)));
            log::info!("ablation: training {} with seed {seed}", v.name);
            let outcome = train(dataset, &net, &tc, dir.as_deref())?;
            let mut predictor = NetPredictor::new(outcome.checkpoint, embedder.clone())?;
            let report = evaluate(&mut predictor, dataset, spec.split, PromptSelection::Canonical)?;
            if !report.errors.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{} seed {seed}: {} held-out cases failed",
                    v.name,
                    report.errors.len()
                )));
            }
            if let Some(d) = &dir {
                let path = d.join("eval.tsv");
                fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
            }
            let get = |s: Subset| report.summary(s);
            seeds.push(SeedResult {
                seed,
                positive_dice: get(Subset::Positive).map_or(f64::NAN, |s| s.mean_dice),
                spatial_dice: get(Subset::Spatial).map_or(f64::NAN, |s| s.mean_dice),
                negative_fraction: get(Subset::Negative).map_or(f64::NAN, |s| s.mean_pred_fraction),
                final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
            });
        }
        let col = |f: fn(&SeedResult) -> f64| Aggregate::of(&seeds.iter().map(f).collect::<Vec<_>>());
        rows.push(VariantResult {
            positive: col(|x| x.positive_dice),
            spatial: col(|x| x.spatial_dice),
            negative_fraction: col(|x| x.negative_fraction),
            variant: v.clone(),
            seeds,
        });
    }
    let ordering = spec.ordering.as_ref().map(|(better, worse)| {
        let find = |n: &str| rows.iter().find(|r| r.variant.name == n).unwrap();
        let difference = find(better).spatial.mean - find(worse).spatial.mean;
        OrderingResult {
            better: better.clone(),
            worse: worse.clone(),
            difference,
            margin: spec.margin,
            holds: difference >= spec.margin,
        }
    });
    let table = AblationTable { rows, ordering };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let path = d.join("ablation.tsv");
        fs::write(&path, table.to_tsv()).map_err(|e| Error::io(&path, e))?;
        let path = d.join("ablation.json");
        fs::write(&path, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundary_counts_as_foreground() {
        let l = Field::from_vec(1, [1, 1, 3], vec![-10.0f32, 0.0, 10.0]).unwrap();
        assert_eq!(threshold_logits(&l, 0.5).unwrap().data, vec![0, 1, 1]);
    }

    #[test]
    fn typo_generator_can_swap_letters() {
        assert!(typo_candidates("liver").contains(&"livre".to_string()));
        let hits: Vec<String> = (0..400).map(|s| make_typo("liver", s).unwrap()).collect();
        assert!(hits.iter().any(|t| t == "livre"));
        let cands = typo_candidates("liver");
        assert!(hits.iter().all(|t| cands.contains(t)));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.75), 3.25);
    }

    #[test]
    fn standard_rows_follow_fusion_counts() {
        let full = AblationSpec::standard_variants(&NetworkConfig::full_scale());
        let counts: Vec<(usize, bool)> = full
            .iter()
            .map(|v| (v.fusion_stage_mask.iter().filter(|&&b| b).count(), v.deep_supervision))
            .collect();
        assert_eq!(counts, vec![(1, false), (3, false), (5, false), (5, true)]);
        let desk = AblationSpec::standard_variants(&NetworkConfig::desk());
        let counts: Vec<usize> = desk
            .iter()
            .map(|v| v.fusion_stage_mask.iter().filter(|&&b| b).count())
            .collect();
        assert_eq!(counts, vec![1, 3, 3]);
    }
}
