//! Deterministic geometric scenes with exact per-target masks and spatially
//! grounded prompt banks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{voxel_count, Dims, Field, Mask};
use crate::vocab::{ExpandedVocabulary, LabelIds, LabelSchema, BACKGROUND};

/// Minimum |intensity - background| of every object.
pub const MIN_CONTRAST: f64 = 0.2;
/// Objects above this contrast also get a "bright ..." description.
pub const BRIGHT_CONTRAST: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape_kind: ShapeKind,
    pub center: [f64; 3],
    /// Radius (sphere uses axis 0), half-width or semi-axis per axis.
    pub extent: [f64; 3],
    pub intensity: f64,
    pub concept_key: String,
}

impl SceneObject {
    pub fn contains(&self, v: [f64; 3]) -> bool {
        let d = [
            v[0] - self.center[0],
            v[1] - self.center[1],
            v[2] - self.center[2],
        ];
        match self.shape_kind {
            ShapeKind::Sphere => {
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= self.extent[0] * self.extent[0]
            }
            ShapeKind::Box => (0..3).all(|i| d[i].abs() <= self.extent[i]),
            ShapeKind::Ellipsoid => {
                (0..3).map(|i| (d[i] / self.extent[i]).powi(2)).sum::<f64>() <= 1.0
            }
        }
    }

    pub fn fits(&self, grid: Dims) -> bool {
        (0..3).all(|i| {
            self.center[i] - self.extent[i] >= 0.0
                && self.center[i] + self.extent[i] <= (grid[i] - 1) as f64
        })
    }

    pub fn contrast(&self, background: f64) -> f64 {
        (self.intensity - background).abs()
    }

    fn bounding_radius(&self) -> f64 {
        match self.shape_kind {
            ShapeKind::Sphere => self.extent[0],
            ShapeKind::Box => self.extent.iter().map(|e| e * e).sum::<f64>().sqrt(),
            ShapeKind::Ellipsoid => self.extent.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Voxel index ranges (inclusive) that can contain the object.
    fn voxel_bounds(&self, grid: Dims) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        for i in 0..3 {
            let lo = (self.center[i] - self.extent[i]).floor().max(0.0) as usize;
            let hi = ((self.center[i] + self.extent[i]).ceil() as usize).min(grid[i] - 1);
            out[i] = (lo, hi);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    LeftRight,
    UpDown,
    FrontBack,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::LeftRight => 0,
            Axis::UpDown => 1,
            Axis::FrontBack => 2,
        }
    }

    pub const ALL: [Axis; 3] = [Axis::LeftRight, Axis::UpDown, Axis::FrontBack];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    FirstHalf,
    SecondHalf,
}

/// "In the left half" and friends. The first half is the lower-index half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpatialQualifier {
    pub axis: Axis,
    pub side: Side,
}

impl SpatialQualifier {
    /// Strict-half rule: a center exactly on the midplane matches neither side.
    pub fn applies_to(&self, center: [f64; 3], grid: Dims) -> bool {
        let i = self.axis.index();
        let mid = (grid[i] as f64 - 1.0) / 2.0;
        match self.side {
            Side::FirstHalf => center[i] < mid,
            Side::SecondHalf => center[i] > mid,
        }
    }

    pub fn phrase(&self) -> &'static str {
        match (self.axis, self.side) {
            (Axis::LeftRight, Side::FirstHalf) => "in the left half",
            (Axis::LeftRight, Side::SecondHalf) => "in the right half",
            (Axis::UpDown, Side::FirstHalf) => "in the upper half",
            (Axis::UpDown, Side::SecondHalf) => "in the lower half",
            (Axis::FrontBack, Side::FirstHalf) => "in the front half",
            (Axis::FrontBack, Side::SecondHalf) => "in the back half",
        }
    }

    fn code(&self) -> &'static str {
        match (self.axis, self.side) {
            (Axis::LeftRight, Side::FirstHalf) => "left",
            (Axis::LeftRight, Side::SecondHalf) => "right",
            (Axis::UpDown, Side::FirstHalf) => "upper",
            (Axis::UpDown, Side::SecondHalf) => "lower",
            (Axis::FrontBack, Side::FirstHalf) => "front",
            (Axis::FrontBack, Side::SecondHalf) => "back",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        let (axis, side) = match code {
            "left" => (Axis::LeftRight, Side::FirstHalf),
            "right" => (Axis::LeftRight, Side::SecondHalf),
            "upper" => (Axis::UpDown, Side::FirstHalf),
            "lower" => (Axis::UpDown, Side::SecondHalf),
            "front" => (Axis::FrontBack, Side::FirstHalf),
            "back" => (Axis::FrontBack, Side::SecondHalf),
            _ => return None,
        };
        Some(SpatialQualifier { axis, side })
    }

    pub fn for_axis(axis: Axis) -> [SpatialQualifier; 2] {
        [
            SpatialQualifier {
                axis,
                side: Side::FirstHalf,
            },
            SpatialQualifier {
                axis,
                side: Side::SecondHalf,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_shape: Dims,
    pub background_level: f64,
    pub noise_sigma: f64,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
    /// Axes for which spatial qualifiers are described.
    pub qualifier_axes: Vec<Axis>,
}

/// What a prompt refers to: every object of a concept, optionally filtered
/// to one half of the grid or to the bright instances.
///
/// Keys are `concept`, `concept@left` (etc.) and `concept@bright`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Target {
    pub concept: String,
    pub qualifier: Option<SpatialQualifier>,
    pub bright: bool,
}

impl Target {
    pub fn concept(name: &str) -> Self {
        Target {
            concept: name.to_string(),
            qualifier: None,
            bright: false,
        }
    }

    pub fn qualified(name: &str, q: SpatialQualifier) -> Self {
        Target {
            concept: name.to_string(),
            qualifier: Some(q),
            bright: false,
        }
    }

    pub fn bright(name: &str) -> Self {
        Target {
            concept: name.to_string(),
            qualifier: None,
            bright: true,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.qualifier.is_some()
    }

    pub fn matches(&self, obj: &SceneObject, scene: &SceneSpec) -> bool {
        obj.concept_key == self.concept
            && self
                .qualifier
                .is_none_or(|q| q.applies_to(obj.center, scene.grid_shape))
            && (!self.bright || obj.contrast(scene.background_level) > BRIGHT_CONTRAST)
    }

    /// Prompt texts for this target, one per synonym, canonical first.
    pub fn prompts(&self, synonyms: &[String]) -> Vec<String> {
        synonyms
            .iter()
            .map(|s| match (&self.qualifier, self.bright) {
                (Some(q), _) => format!("{s} {}", q.phrase()),
                (None, true) => format!("bright {s}"),
                (None, false) => s.clone(),
            })
            .collect()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.concept)?;
        if let Some(q) = &self.qualifier {
            write!(f, "@{}", q.code())?;
        }
        if self.bright {
            f.write_str("@bright")?;
        }
        Ok(())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('@');
        let concept = parts.next().unwrap_or_default();
        if concept.is_empty() {
            return Err(Error::Parse(format!("empty concept in target {s:?}")));
        }
        let mut t = Target::concept(concept);
        for p in parts {
            if p == "bright" {
                t.bright = true;
            } else {
                t.qualifier = Some(
                    SpatialQualifier::from_code(p)
                        .ok_or_else(|| Error::Parse(format!("unknown qualifier {p:?} in {s:?}")))?,
                );
            }
        }
        Ok(t)
    }
}

/// Union mask of every object the target refers to.
pub fn target_mask(scene: &SceneSpec, target: &Target) -> Mask {
    let mut mask = Mask::zeros(scene.grid_shape);
    for obj in scene.objects.iter().filter(|o| target.matches(o, scene)) {
        paint_object(obj, scene.grid_shape, |i| mask.data[i] = 1);
    }
    mask
}

fn paint_object(obj: &SceneObject, grid: Dims, mut f: impl FnMut(usize)) {
    let b = obj.voxel_bounds(grid);
    for x in b[0].0..=b[0].1 {
        for y in b[1].0..=b[1].1 {
            for z in b[2].0..=b[2].1 {
                if obj.contains([x as f64, y as f64, z as f64]) {
                    f((x * grid[1] + y) * grid[2] + z);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    /// Alternative names; the concept name itself is prepended as canonical.
    pub synonyms: Vec<String>,
    pub shape: ShapeKind,
    pub intensity: (f64, f64),
    pub radius: (f64, f64),
    /// Per-axis multiplier applied to the sampled radius.
    pub aspect: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_shape: Dims,
    pub background_level: f64,
    pub noise_sigma: f64,
    pub concepts: Vec<ConceptSpec>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub presence_probability: f64,
    /// Chance that a present concept gets a second instance, placed in the
    /// opposite left-right half.
    pub second_instance_probability: f64,
    pub max_retries: usize,
    pub qualifier_axes: Vec<Axis>,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl SceneConfig {
    /// 64^3 grid, four concepts, left-right qualifiers only.
    pub fn desk() -> Self {
        SceneConfig {
            grid_shape: [64, 64, 64],
            background_level: 0.1,
            noise_sigma: 0.03,
            concepts: Self::default_concepts(4),
            min_objects: 2,
            max_objects: 5,
            presence_probability: 0.6,
            second_instance_probability: 0.5,
            max_retries: 200,
            qualifier_axes: vec![Axis::LeftRight],
        }
    }

    /// The desk configuration on a cubic grid of side `n`, with object sizes
    /// scaled proportionally.
    pub fn desk_scaled(n: usize) -> Self {
        let mut cfg = Self::desk();
        let k = n as f64 / 64.0;
        cfg.grid_shape = [n; 3];
        for c in &mut cfg.concepts {
            c.radius = ((c.radius.0 * k).max(2.0), (c.radius.1 * k).max(2.0));
        }
        cfg
    }

    pub fn default_concepts(n: usize) -> Vec<ConceptSpec> {
        let all = vec![
            ConceptSpec {
                name: "sphere".into(),
                synonyms: names(&["ball", "round ball", "globe", "spherical blob"]),
                shape: ShapeKind::Sphere,
                intensity: (0.75, 0.85),
                radius: (4.0, 7.0),
                aspect: [1.0, 1.0, 1.0],
            },
            ConceptSpec {
                name: "cube".into(),
                synonyms: names(&["box", "cubic block", "square block", "boxy solid"]),
                shape: ShapeKind::Box,
                intensity: (0.35, 0.45),
                radius: (3.0, 6.0),
                aspect: [1.0, 1.0, 1.0],
            },
            ConceptSpec {
                name: "ellipsoid".into(),
                synonyms: names(&["oval body", "elongated blob", "egg shape", "ovoid"]),
                shape: ShapeKind::Ellipsoid,
                intensity: (0.9, 1.0),
                radius: (4.0, 6.0),
                aspect: [0.6, 0.6, 1.6],
            },
            ConceptSpec {
                name: "slab".into(),
                synonyms: names(&["flat plate", "thin slab", "plate", "flat block"]),
                shape: ShapeKind::Box,
                intensity: (0.6, 0.7),
                radius: (4.0, 7.0),
                aspect: [1.0, 1.0, 0.35],
            },
        ];
        all.into_iter().take(n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&n| n < 16) {
            return Err(Error::Config(format!(
                "grid {:?} must be at least 16 per axis",
                self.grid_shape
            )));
        }
        if self.concepts.is_empty() || self.max_objects == 0 || self.min_objects > self.max_objects
        {
            return Err(Error::Config("need at least one concept and object".into()));
        }
        for c in &self.concepts {
            if c.name.is_empty() || c.name.contains('@') {
                return Err(Error::Config(format!("bad concept name {:?}", c.name)));
            }
            let lo = (c.intensity.0 - self.background_level).abs();
            let hi = (c.intensity.1 - self.background_level).abs();
            let straddles = (c.intensity.0 - self.background_level).signum()
                != (c.intensity.1 - self.background_level).signum();
            if lo < MIN_CONTRAST || hi < MIN_CONTRAST || straddles {
                return Err(Error::Config(format!(
                    "intensity range of {:?} violates the contrast guarantee",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn concept(&self, name: &str) -> Option<&ConceptSpec> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// Label schema: background plus one ID per concept, in config order.
    pub fn label_schema(&self) -> LabelSchema {
        let mut labels = BTreeMap::new();
        labels.insert(BACKGROUND.to_string(), LabelIds::Single(0));
        for (i, c) in self.concepts.iter().enumerate() {
            labels.insert(c.name.clone(), LabelIds::Single(i as u32 + 1));
        }
        LabelSchema {
            dataset_id: "synthetic".into(),
            labels,
        }
    }

    pub fn vocabulary(&self) -> ExpandedVocabulary {
        let mut v = ExpandedVocabulary::default();
        v.single_labels.insert(0, vec![BACKGROUND.to_string()]);
        for (i, c) in self.concepts.iter().enumerate() {
            let mut alts = vec![c.name.clone()];
            alts.extend(c.synonyms.iter().cloned());
            v.single_labels.insert(i as u32 + 1, alts);
        }
        v
    }
}

fn place<R: Rng>(
    rng: &mut R,
    spec: &ConceptSpec,
    cfg: &SceneConfig,
    placed: &[SceneObject],
    lr_side: Option<Side>,
) -> Result<SceneObject> {
    let grid = cfg.grid_shape;
    let r = rng.gen_range(spec.radius.0..=spec.radius.1).round();
    let mut extent = [r * spec.aspect[0], r * spec.aspect[1], r * spec.aspect[2]];
    for e in &mut extent {
        *e = e.round().max(1.0);
    }
    if spec.shape == ShapeKind::Sphere {
        extent = [extent[0]; 3];
    }
    for i in 0..3 {
        if 2.0 * extent[i] + 1.0 > grid[i] as f64 {
            return Err(Error::Generation(format!(
                "{} of extent {:?} does not fit grid {:?}",
                spec.name, extent, grid
            )));
        }
    }
    let intensity = rng.gen_range(spec.intensity.0..=spec.intensity.1);
    for _ in 0..cfg.max_retries {
        let mut center = [0.0; 3];
        for i in 0..3 {
            let lo = extent[i].ceil() as i64;
            let mut hi = (grid[i] as f64 - 1.0 - extent[i]).floor() as i64;
            let mut lo = lo;
            if i == 0 {
                let mid = (grid[0] as f64 - 1.0) / 2.0;
                match lr_side {
                    Some(Side::FirstHalf) => hi = hi.min(mid.ceil() as i64 - 1),
                    Some(Side::SecondHalf) => lo = lo.max(mid.floor() as i64 + 1),
                    None => {}
                }
            }
            if lo > hi {
                return Err(Error::Generation(format!(
                    "no room for {} on axis {i}",
                    spec.name
                )));
            }
            center[i] = rng.gen_range(lo..=hi) as f64;
        }
        let obj = SceneObject {
            shape_kind: spec.shape,
            center,
            extent,
            intensity,
            concept_key: spec.name.clone(),
        };
        let clear = placed.iter().all(|o| {
            let d: f64 = (0..3)
                .map(|i| (o.center[i] - center[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            d > o.bounding_radius() + obj.bounding_radius() + 1.0
        });
        if clear && obj.fits(grid) {
            return Ok(obj);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} after {} attempts",
        spec.name, cfg.max_retries
    )))
}

/// Draws a scene. Every scene leaves at least one configured concept absent
/// (when there are two or more concepts) so negative prompts always exist.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..SCENE_ATTEMPTS {
        match draw_scene(cfg, &mut rng) {
            Ok(objects) => {
                return Ok(SceneSpec {
                    grid_shape: cfg.grid_shape,
                    background_level: cfg.background_level,
                    noise_sigma: cfg.noise_sigma,
                    objects,
                    seed,
                    qualifier_axes: cfg.qualifier_axes.clone(),
                })
            }
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Whole-scene redraws before placement failure is reported.
const SCENE_ATTEMPTS: usize = 20;

fn draw_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let n = cfg.concepts.len();
    let mut present: Vec<bool> = (0..n)
        .map(|_| rng.gen::<f64>() < cfg.presence_probability)
        .collect();
    if n >= 2 && present.iter().all(|&p| p) {
        let drop = rng.gen_range(0..n);
        present[drop] = false;
    }
    if present.iter().all(|&p| !p) {
        let pick = rng.gen_range(0..n);
        present[pick] = true;
    }
    let mut plan: Vec<(usize, Option<Side>)> = Vec::new();
    for (i, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        if rng.gen::<f64>() < cfg.second_instance_probability {
            let first = if rng.gen::<bool>() {
                Side::FirstHalf
            } else {
                Side::SecondHalf
            };
            let second = match first {
                Side::FirstHalf => Side::SecondHalf,
                Side::SecondHalf => Side::FirstHalf,
            };
            plan.push((i, Some(first)));
            plan.push((i, Some(second)));
        } else {
            plan.push((i, None));
        }
    }
    // enforce the object budget by dropping second instances, then concepts
    while plan.len() > cfg.max_objects {
        let dup = (1..plan.len()).rev().find(|&k| plan[k].0 == plan[k - 1].0);
        match dup {
            Some(k) => {
                plan.remove(k);
            }
            None => {
                plan.pop();
            }
        }
    }
    while plan.len() < cfg.min_objects {
        // reuse a present concept on the opposite half to keep one concept absent
        let (c, side) = plan[rng.gen_range(0..plan.len())];
        let other = match side {
            Some(Side::FirstHalf) => Some(Side::SecondHalf),
            Some(Side::SecondHalf) => Some(Side::FirstHalf),
            None => None,
        };
        plan.push((c, other));
    }
    let mut objects = Vec::with_capacity(plan.len());
    for (ci, side) in plan {
        let obj = place(rng, &cfg.concepts[ci], cfg, &objects, side)?;
        objects.push(obj);
    }
    Ok(objects)
}

/// All descriptions of `obj`: synonyms, synonyms with each applicable spatial
/// qualifier, and "bright" variants for high-contrast objects.
pub fn describe(
    obj: &SceneObject,
    scene: &SceneSpec,
    vocab: &ExpandedVocabulary,
) -> Result<Vec<String>> {
    let synonyms = synonyms_for(vocab, &obj.concept_key)?;
    let mut out: Vec<String> = synonyms.to_vec();
    for axis in &scene.qualifier_axes {
        for q in SpatialQualifier::for_axis(*axis) {
            if q.applies_to(obj.center, scene.grid_shape) {
                out.extend(Target::qualified(&obj.concept_key, q).prompts(synonyms));
            }
        }
    }
    if obj.contrast(scene.background_level) > BRIGHT_CONTRAST {
        out.extend(Target::bright(&obj.concept_key).prompts(synonyms));
    }
    Ok(out)
}

fn synonyms_for<'a>(vocab: &'a ExpandedVocabulary, concept: &str) -> Result<&'a [String]> {
    let key = vocab
        .key_for_name(concept)
        .ok_or_else(|| Error::Lookup(format!("concept {concept:?} is not in the vocabulary")))?;
    Ok(vocab.alternatives(&key).unwrap_or_default())
}

/// One rasterized scene with masks and prompt banks keyed by target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub volume: Field<f32>,
    /// Non-empty target masks.
    pub masks: BTreeMap<String, Mask>,
    /// Prompts for every key in `masks`, canonical first.
    pub prompt_bank: BTreeMap<String, Vec<String>>,
    /// Prompts whose correct answer is an empty mask.
    pub negative_bank: BTreeMap<String, Vec<String>>,
}

impl TrainingSample {
    pub fn dims(&self) -> Dims {
        self.volume.dims
    }

    pub fn positive_keys(&self) -> Vec<String> {
        self.masks.keys().cloned().collect()
    }

    pub fn negative_keys(&self) -> Vec<String> {
        self.negative_bank.keys().cloned().collect()
    }
}

/// Paints the scene and derives all target masks and prompts. Later objects
/// overwrite earlier ones in the intensity field; masks are exact unions.
pub fn rasterize(scene: &SceneSpec, vocab: &ExpandedVocabulary) -> Result<TrainingSample> {
    let grid = scene.grid_shape;
    let mut data = vec![scene.background_level as f32; voxel_count(grid)];
    for obj in &scene.objects {
        paint_object(obj, grid, |i| data[i] = obj.intensity as f32);
    }
    if scene.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973_655f_7631);
        let normal = Normal::new(0.0, scene.noise_sigma)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let volume = Field::from_vec(1, grid, data)?;

    let mut masks = BTreeMap::new();
    let mut prompt_bank = BTreeMap::new();
    let mut negative_bank = BTreeMap::new();
    let mut concepts: Vec<String> = Vec::new();
    for key in vocab.keys() {
        if key == crate::vocab::ConceptKey::Single(0) {
            continue;
        }
        if let (crate::vocab::ConceptKey::Single(_), Some(alts)) = (&key, vocab.alternatives(&key))
        {
            if let Some(first) = alts.first() {
                concepts.push(first.clone());
            }
        }
    }
    for obj in &scene.objects {
        describe(obj, scene, vocab)?;
    }
    for concept in &concepts {
        let synonyms = synonyms_for(vocab, concept)?;
        let mut targets = vec![Target::concept(concept)];
        for axis in &scene.qualifier_axes {
            for q in SpatialQualifier::for_axis(*axis) {
                targets.push(Target::qualified(concept, q));
            }
        }
        let present = scene.objects.iter().any(|o| &o.concept_key == concept);
        if present {
            targets.push(Target::bright(concept));
        }
        for t in targets {
            let mask = target_mask(scene, &t);
            if !mask.is_empty() {
                masks.insert(t.to_string(), mask);
                prompt_bank.insert(t.to_string(), t.prompts(synonyms));
            } else if !t.bright {
                negative_bank.insert(t.to_string(), t.prompts(synonyms));
            }
        }
    }
    Ok(TrainingSample {
        volume,
        masks,
        prompt_bank,
        negative_bank,
    })
}

/// Majority pooling by `factor` per axis: an output voxel is set iff at least
/// half of its input block is set.
pub fn downsample_mask(mask: &Mask, factor: [usize; 3]) -> Result<Mask> {
    for i in 0..3 {
        let f = factor[i];
        if f == 0 || !f.is_power_of_two() {
            return Err(shape_err!("downsampling factor {f} is not a power of two"));
        }
        if !mask.dims[i].is_multiple_of(f) {
            return Err(shape_err!(
                "mask dims {:?} not divisible by {:?}",
                mask.dims,
                factor
            ));
        }
    }
    if factor == [1, 1, 1] {
        return Ok(mask.clone());
    }
    let out_dims = [
        mask.dims[0] / factor[0],
        mask.dims[1] / factor[1],
        mask.dims[2] / factor[2],
    ];
    let block = factor[0] * factor[1] * factor[2];
    let mut counts = vec![0u32; voxel_count(out_dims)];
    for x in 0..mask.dims[0] {
        for y in 0..mask.dims[1] {
            let row = mask.index(x, y, 0);
            let orow = (x / factor[0] * out_dims[1] + y / factor[1]) * out_dims[2];
            for z in 0..mask.dims[2] {
                counts[orow + z / factor[2]] += mask.data[row + z] as u32;
            }
        }
    }
    let data = counts
        .into_iter()
        .map(|c| (2 * c as usize >= block) as u8)
        .collect();
    Ok(Mask {
        dims: out_dims,
        data,
    })
}

/// Targets for `n_scales` supervision levels, finest first.
pub fn multiscale_masks(mask: &Mask, n_scales: usize) -> Result<Vec<Mask>> {
    (0..n_scales)
        .map(|s| downsample_mask(mask, [1 << s; 3]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig::desk_scaled(32)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn oversized_object_fails() {
        let mut cfg = small_cfg();
        for c in &mut cfg.concepts {
            c.radius = (20.0, 20.0);
        }
        assert!(matches!(generate_scene(&cfg, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn scenes_respect_invariants() {
        let cfg = small_cfg();
        for seed in 0..100 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert!(!s.objects.is_empty() && s.objects.len() <= cfg.max_objects);
            for o in &s.objects {
                assert!(o.fits(s.grid_shape));
                assert!(o.contrast(s.background_level) >= MIN_CONTRAST);
            }
            let present: std::collections::BTreeSet<_> =
                s.objects.iter().map(|o| o.concept_key.as_str()).collect();
            assert!(present.len() < cfg.concepts.len());
        }
    }

    #[test]
    fn midplane_center_has_no_lateral_qualifier() {
        let grid = [64, 64, 64];
        let q = SpatialQualifier::for_axis(Axis::LeftRight);
        assert!(!q[0].applies_to([31.5, 10.0, 10.0], grid));
        assert!(!q[1].applies_to([31.5, 10.0, 10.0], grid));
        assert!(q[0].applies_to([31.0, 10.0, 10.0], grid));
        assert!(q[1].applies_to([32.0, 10.0, 10.0], grid));
    }

    #[test]
    fn target_keys_round_trip() {
        for t in [
            Target::concept("sphere"),
            Target::bright("cube"),
            Target::qualified("slab", SpatialQualifier::for_axis(Axis::FrontBack)[1]),
        ] {
            assert_eq!(t.to_string().parse::<Target>().unwrap(), t);
        }
        assert!("x@sideways".parse::<Target>().is_err());
    }

    #[test]
    fn empty_scene_rasterizes_uniform() {
        let cfg = small_cfg();
        let scene = SceneSpec {
            grid_shape: cfg.grid_shape,
            background_level: 0.1,
            noise_sigma: 0.0,
            objects: vec![],
            seed: 0,
            qualifier_axes: vec![Axis::LeftRight],
        };
        let s = rasterize(&scene, &cfg.vocabulary()).unwrap();
        assert!(s.masks.is_empty());
        assert!(s.volume.data.iter().all(|&v| v == 0.1f32));
        assert_eq!(s.negative_bank.len(), 4 * 3);
    }

    #[test]
    fn downsample_basics() {
        let mut m = Mask::zeros([4, 4, 4]);
        assert_eq!(downsample_mask(&m, [1, 1, 1]).unwrap(), m);
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    m.set(x, y, z, true);
                }
            }
        }
        let d = downsample_mask(&m, [2, 2, 2]).unwrap();
        assert_eq!(d.dims, [2, 2, 2]);
        assert_eq!(d.count(), 1);
        assert!(d.get(0, 0, 0));
        assert!(downsample_mask(&Mask::zeros([6, 4, 4]), [4, 4, 4]).is_err());
        assert!(downsample_mask(&Mask::ones([8, 8, 8]), [4, 4, 4]).unwrap().data.iter().all(|&v| v == 1));
    }
}
