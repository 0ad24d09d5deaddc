//! Patch sampling, augmentation, SGD with momentum and the training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PromptEmbedder, Split};
use crate::error::{shape_err, Error, Result};
use crate::loss::LossWeights;
use crate::nn::{Checkpoint, FusionNet, ImageExample, NetworkConfig, PromptExample};
use crate::seed::stream;
use crate::synth::{multiscale_masks, Axis, TrainingSample};
use crate::tensor::{voxel_count, Dims, Field, Mask};
use crate::vocab::{sample_prompt_set, PromptSamplingPolicy};

pub const LOSS_CURVE_FILE: &str = "loss_curve.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Axes that may be mirrored, each with probability 1/2. Never left-right.
    pub flip_axes: Vec<Axis>,
    /// Noise standard deviation is drawn uniformly from [0, noise_sigma_max].
    pub noise_sigma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_axes: vec![Axis::UpDown, Axis::FrontBack],
            noise_sigma_max: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_axes: Vec::new(),
            noise_sigma_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_axes.contains(&Axis::LeftRight) {
            return Err(Error::Config("left-right mirroring is not allowed".into()));
        }
        if !(self.noise_sigma_max >= 0.0 && self.noise_sigma_max.is_finite()) {
            return Err(Error::Config("noise_sigma_max must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: Dims,
    pub lr0: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub policy: PromptSamplingPolicy,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Normalize the deep-supervision weights to sum to one.
    #[serde(default = "default_true")]
    pub normalize_loss_weights: bool,
    /// Global gradient-norm clip applied before the momentum update.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Also keep `epoch_NNNN.ckpt` for every epoch, not only the latest.
    #[serde(default)]
    pub keep_epoch_checkpoints: bool,
}

impl TrainConfig {
    /// 64^3 whole-volume patches, batch 2, 50 x 50 steps.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            iterations_per_epoch: 50,
            batch_size: 2,
            patch_size: [64; 3],
            lr0: 1e-2,
            poly_exponent: 0.9,
            momentum: 0.99,
            seed: 0,
            policy: PromptSamplingPolicy::default(),
            augment: AugmentConfig::default(),
            normalize_loss_weights: true,
            grad_clip: Some(12.0),
            keep_epoch_checkpoints: false,
        }
    }

    /// The full-scale schedule: 192^3 patches, 2000 x 250 steps, lr 1e-4.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 2000,
            iterations_per_epoch: 250,
            patch_size: [192; 3],
            lr0: 1e-4,
            grad_clip: None,
            ..Self::desk()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        net.check_input_dims(self.patch_size)?;
        self.policy.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Config("batch_size and iterations_per_epoch must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.poly_exponent >= 0.0 && self.poly_exponent.is_finite()) {
            return Err(Error::Config("poly_exponent must be finite and >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    pub fn loss_weights(&self, net: &NetworkConfig) -> LossWeights {
        let mut w = LossWeights::halving(net.bundle_len());
        w.normalize = self.normalize_loss_weights;
        w
    }
}

/// `lr0 * (1 - epoch / total)^exponent`.
pub fn poly_lr(epoch: usize, total_epochs: usize, lr0: f64, exponent: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    Ok(lr0 * (1.0 - epoch as f64 / total_epochs as f64).powf(exponent))
}

pub fn crop_field(f: &Field<f32>, origin: [usize; 3], size: Dims) -> Result<Field<f32>> {
    for i in 0..3 {
        if origin[i] + size[i] > f.dims[i] {
            return Err(shape_err!("crop {origin:?}+{size:?} exceeds {:?}", f.dims));
        }
    }
    if origin == [0; 3] && size == f.dims {
        return Ok(f.clone());
    }
    let mut out = Field::zeros(f.channels, size);
    for c in 0..f.channels {
        for x in 0..size[0] {
            for y in 0..size[1] {
                let src = f.index(c, origin[0] + x, origin[1] + y, origin[2]);
                let dst = out.index(c, x, y, 0);
                out.data[dst..dst + size[2]].copy_from_slice(&f.data[src..src + size[2]]);
            }
        }
    }
    Ok(out)
}

pub fn crop_mask(m: &Mask, origin: [usize; 3], size: Dims) -> Result<Mask> {
    for i in 0..3 {
        if origin[i] + size[i] > m.dims[i] {
            return Err(shape_err!("crop {origin:?}+{size:?} exceeds {:?}", m.dims));
        }
    }
    let mut out = Mask::zeros(size);
    for x in 0..size[0] {
        for y in 0..size[1] {
            let src = m.index(origin[0] + x, origin[1] + y, origin[2]);
            let dst = out.index(x, y, 0);
            out.data[dst..dst + size[2]].copy_from_slice(&m.data[src..src + size[2]]);
        }
    }
    Ok(out)
}

/// Patch origin: with the oversampling probability, a patch centered on a
/// uniformly chosen foreground voxel (shifted to stay in bounds); otherwise a
/// uniform in-bounds position. Empty or missing masks always draw uniformly.
pub fn patch_origin<R: Rng + ?Sized>(
    dims: Dims,
    mask: Option<&Mask>,
    patch: Dims,
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<[usize; 3]> {
    for i in 0..3 {
        if patch[i] == 0 || patch[i] > dims[i] {
            return Err(shape_err!("patch {patch:?} does not fit volume {dims:?}"));
        }
    }
    let oversample = rng.gen::<f64>() < policy.foreground_oversample_probability;
    let fg = mask.map_or(0, Mask::count);
    if oversample && fg > 0 {
        let m = mask.unwrap();
        let k = rng.gen_range(0..fg);
        let flat = m
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .nth(k)
            .map(|(i, _)| i)
            .unwrap();
        let c = [flat / (dims[1] * dims[2]), flat / dims[2] % dims[1], flat % dims[2]];
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = c[i].saturating_sub(patch[i] / 2).min(dims[i] - patch[i]);
        }
        Ok(o)
    } else {
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = rng.gen_range(0..=dims[i] - patch[i]);
        }
        Ok(o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub volume: Field<f32>,
    pub mask: Mask,
}

/// Crops a patch around `key`'s mask. Keys without a mask (negatives) get an
/// empty mask and a uniform position.
pub fn sample_patch<R: Rng + ?Sized>(
    sample: &TrainingSample,
    key: &str,
    patch: Dims,
    rng: &mut R,
    policy: &PromptSamplingPolicy,
) -> Result<Patch> {
    let dims = sample.dims();
    let mask = sample.masks.get(key);
    let origin = patch_origin(dims, mask, patch, rng, policy)?;
    Ok(Patch {
        origin,
        volume: crop_field(&sample.volume, origin, patch)?,
        mask: match mask {
            Some(m) => crop_mask(m, origin, patch)?,
            None => Mask::zeros(patch),
        },
    })
}

fn flip_index(dims: Dims, axis: usize, i: usize) -> usize {
    let (x, y, z) = (i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]);
    let mut c = [x, y, z];
    c[axis] = dims[axis] - 1 - c[axis];
    (c[0] * dims[1] + c[1]) * dims[2] + c[2]
}

fn flip_slice<V: Copy>(data: &mut [V], dims: Dims, axis: usize) {
    let n = voxel_count(dims);
    for i in 0..n {
        let j = flip_index(dims, axis, i);
        if i < j {
            data.swap(i, j);
        }
    }
}

pub fn flip_field(f: &mut Field<f32>, axis: Axis) {
    let n = voxel_count(f.dims);
    for c in 0..f.channels {
        flip_slice(&mut f.data[c * n..(c + 1) * n], f.dims, axis.index());
    }
}

pub fn flip_mask(m: &mut Mask, axis: Axis) {
    flip_slice(&mut m.data, m.dims, axis.index());
}

/// What one call to [`augment`] did.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub flipped: Vec<Axis>,
    pub noise_sigma: f64,
}

/// Mirrors volume and masks along each allowed axis with probability 1/2, then
/// adds Gaussian noise to the volume.
pub fn augment<R: Rng + ?Sized>(
    volume: &mut Field<f32>,
    masks: &mut [Mask],
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<Augmentation> {
    cfg.validate()?;
    if let Some(m) = masks.iter().find(|m| m.dims != volume.dims) {
        return Err(shape_err!("mask {:?} vs volume {:?}", m.dims, volume.dims));
    }
    let mut flipped = Vec::new();
    for &axis in &cfg.flip_axes {
        if rng.gen_bool(0.5) {
            flip_field(volume, axis);
            for m in masks.iter_mut() {
                flip_mask(m, axis);
            }
            flipped.push(axis);
        }
    }
    let noise_sigma = if cfg.noise_sigma_max > 0.0 {
        rng.gen_range(0.0..=cfg.noise_sigma_max)
    } else {
        0.0
    };
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in &mut volume.data {
            *v += normal.sample(rng) as f32;
        }
    }
    Ok(Augmentation {
        flipped,
        noise_sigma,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f32>,
    pub step: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; n_params],
            step: 0,
            lr: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Applies `v <- momentum * v - lr * g; p <- p + v`, with `g` optionally
/// rescaled to norm `clip`.
pub fn sgd_update(
    params: &mut [f32],
    grads: &[f32],
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != opt.velocity.len() {
        return Err(shape_err!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            opt.velocity.len()
        ));
    }
    let norm = grads.iter().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            scale: None,
        });
    }
    let factor = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, v), g) in params.iter_mut().zip(&mut opt.velocity).zip(grads) {
        let nv = momentum * *v as f64 - lr * factor * *g as f64;
        *v = nv as f32;
        *p += *v;
    }
    opt.step += 1;
    opt.lr = lr;
    Ok(norm)
}

/// One optimization step on the mean deep-supervision loss over all
/// (image, prompt) pairs of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &FusionNet,
    params: &mut [f32],
    opt: &mut OptimizerState,
    batch: &[ImageExample<'_, f32>],
    weights: &LossWeights,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> Result<StepReport> {
    let mut grads = vec![0.0f32; params.len()];
    let loss = net.loss_and_grad(params, batch, weights, &mut grads)?;
    if !loss.loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            scale: None,
        });
    }
    let grad_norm = sgd_update(params, &grads, opt, lr, momentum, clip)?;
    Ok(StepReport {
        loss: loss.loss,
        grad_norm,
    })
}

/// One training image with its prompts and per-scale targets.
#[derive(Clone, Debug)]
pub struct SlotData {
    pub case: usize,
    pub volume: Field<f32>,
    pub prompts: Vec<SlotPrompt>,
}

#[derive(Clone, Debug)]
pub struct SlotPrompt {
    pub key: String,
    pub text: String,
    pub positive: bool,
    pub embedding: Vec<f32>,
    pub targets: Vec<Mask>,
}

impl SlotData {
    pub fn example(&self) -> ImageExample<'_, f32> {
        ImageExample {
            volume: &self.volume,
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptExample {
                    embedding: &p.embedding,
                    targets: &p.targets,
                })
                .collect(),
        }
    }
}

/// Draws prompts for `sample`, crops a patch around the first positive target,
/// augments, and builds targets for every supervised scale. Negative prompts
/// get all-zero targets.
pub fn build_slot<R: Rng + ?Sized>(
    case: usize,
    sample: &TrainingSample,
    embedder: &PromptEmbedder,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SlotData> {
    let present = sample.positive_keys();
    let absent = sample.negative_keys();
    let set = sample_prompt_set(
        &present,
        &absent,
        |k: &String| {
            sample
                .prompt_bank
                .get(k)
                .or_else(|| sample.negative_bank.get(k))
                .map(Vec::as_slice)
        },
        rng,
        &cfg.policy,
    )?;
    let anchor = &set.positives[0].0;
    let patch = sample_patch(sample, anchor, cfg.patch_size, rng, &cfg.policy)?;
    let mut volume = patch.volume;
    let mut masks: Vec<Mask> = set
        .positives
        .iter()
        .map(|(k, _)| crop_mask(&sample.masks[k], patch.origin, cfg.patch_size))
        .collect::<Result<_>>()?;
    augment(&mut volume, &mut masks, rng, &cfg.augment)?;
    let n = net.bundle_len();
    let mut prompts = Vec::with_capacity(set.positives.len() + set.negatives.len());
    for ((key, text), mask) in set.positives.into_iter().zip(&masks) {
        prompts.push(SlotPrompt {
            embedding: embedder.vector(&text)?,
            targets: multiscale_masks(mask, n)?,
            key,
            text,
            positive: true,
        });
    }
    let zeros = multiscale_masks(&Mask::zeros(cfg.patch_size), n)?;
    for (key, text) in set.negatives {
        prompts.push(SlotPrompt {
            embedding: embedder.vector(&text)?,
            targets: zeros.clone(),
            key,
            text,
            positive: false,
        });
    }
    Ok(SlotData {
        case,
        volume,
        prompts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn curve_tsv_header() -> &'static str {
    "epoch\titeration\tloss\tlr\n"
}

pub fn curve_tsv_row(p: &CurvePoint) -> String {
    format!("{}\t{}\t{:.9e}\t{:.9e}\n", p.epoch, p.iteration, p.loss, p.lr)
}

pub fn curve_to_tsv(curve: &[CurvePoint]) -> String {
    let mut s = curve_tsv_header().to_string();
    for p in curve {
        s.push_str(&curve_tsv_row(p));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

/// Runs `epochs x iterations_per_epoch` steps on the training split. Every
/// random draw comes from a stream keyed by (seed, step, slot), so a run is a
/// pure function of its inputs. With `out_dir`, writes `latest.ckpt` after
/// every epoch, the loss curve, and `final.ckpt`.
pub fn train(
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let qualifier_axes = &dataset.config().scene.qualifier_axes;
    cfg.augment.flip_axes.retain(|a| {
        let keep = !qualifier_axes.contains(a);
        if !keep {
            log::warn!("not mirroring {a:?}: prompts refer to halves along it");
        }
        keep
    });
    cfg.validate(net_cfg)?;
    let net = FusionNet::new(net_cfg.clone())?;
    let embedder = dataset.prompt_embedder()?;
    if embedder.dim() != net_cfg.text_dim {
        return Err(Error::Config(format!(
            "embedding dimension {} does not match text_dim {}",
            embedder.dim(),
            net_cfg.text_dim
        )));
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("dataset has no training cases".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut curve_file = match out_dir {
        Some(dir) => {
            let path = dir.join(LOSS_CURVE_FILE);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(curve_tsv_header().as_bytes())
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };

    let weights = cfg.loss_weights(net_cfg);
    let mut params: Vec<f32> = net.init_params(cfg.seed);
    let mut opt = OptimizerState::new(params.len());
    let mut curve = Vec::with_capacity(cfg.total_steps());
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_exponent)?;
        let mut epoch_loss = 0.0;
        for it in 0..cfg.iterations_per_epoch {
            let step = (epoch * cfg.iterations_per_epoch + it) as u64;
            let mut slots = Vec::with_capacity(cfg.batch_size);
            for slot in 0..cfg.batch_size {
                let mut rng = stream(cfg.seed, &[step, slot as u64]);
                let case = train_idx[rng.gen_range(0..train_idx.len())];
                let sample = dataset.case(case)?;
                slots.push(build_slot(case, &sample, &embedder, net_cfg, &cfg, &mut rng)?);
            }
            let batch: Vec<_> = slots.iter().map(SlotData::example).collect();
            let report = train_step(
                &net,
                &mut params,
                &mut opt,
                &batch,
                &weights,
                lr,
                cfg.momentum,
                cfg.grad_clip,
            )?;
            let point = CurvePoint {
                epoch,
                iteration: step as usize,
                loss: report.loss,
                lr,
            };
            if let Some((path, f)) = &mut curve_file {
                f.write_all(curve_tsv_row(&point).as_bytes())
                    .map_err(|e| Error::io(&*path, e))?;
            }
            epoch_loss += report.loss;
            curve.push(point);
        }
        log::info!(
            "epoch {}/{}: mean loss {:.4}, lr {:.3e}",
            epoch + 1,
            cfg.epochs,
            epoch_loss / cfg.iterations_per_epoch as f64,
            lr
        );
        if let Some(dir) = out_dir {
            let ck = Checkpoint::new(net_cfg.clone(), params.clone())?;
            ck.save(&dir.join(LATEST_CHECKPOINT))?;
            if cfg.keep_epoch_checkpoints {
                ck.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(net_cfg.clone(), params)?;
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        if let Some((path, f)) = &mut curve_file {
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
    }
    Ok(TrainOutcome { checkpoint, curve })
}
