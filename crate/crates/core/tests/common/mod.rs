//! Helpers and independent reference implementations shared by test targets.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlseg::loss::LossWeights;
use vlseg::nn::{gates, FusionNet, ImageExample, NetworkConfig, PromptExample};
use vlseg::synth::multiscale_masks;
use vlseg::tensor::{Field, Mask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(rng: &mut ChaCha8Rng, channels: usize, dims: [usize; 3], scale: f64) -> Field<f64> {
    let n = channels * dims.iter().product::<usize>();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Field::from_vec(channels, dims, data).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> Mask {
    let n = dims.iter().product::<usize>();
    Mask::from_vec(dims, (0..n).map(|_| rng.gen_bool(p) as u8).collect()).unwrap()
}

pub fn ball_mask(dims: [usize; 3], center: [f64; 3], radius: f64) -> Mask {
    let mut m = Mask::zeros(dims);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let d2 = (x as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (z as f64 - center[2]).powi(2);
                m.set(x, y, z, d2 <= radius * radius);
            }
        }
    }
    m
}

/// Small network used by the gradient check.
pub fn gradient_config() -> NetworkConfig {
    NetworkConfig::tiny(vec![4, 8, 8], 2, 8)
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor, flat index, analytic, best numeric)
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Step of the five-point central stencil.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-5;

struct GradProblem {
    net: FusionNet,
    params: Vec<f64>,
    volume: Field<f64>,
    targets: [Vec<Mask>; 2],
    prompts: [Vec<f64>; 2],
    weights: LossWeights,
}

impl GradProblem {
    fn new(seed: u64) -> Self {
        let cfg = gradient_config();
        let net = FusionNet::new(cfg.clone()).unwrap();
        let mut r = rng(seed);
        let mut params: Vec<f64> = net.init_params(seed);
        for p in &mut params {
            *p += r.gen_range(-0.05..0.05);
        }
        let dims = [16, 16, 16];
        let volume = random_field(&mut r, 1, dims, 1.0);
        let pos = multiscale_masks(&ball_mask(dims, [5.0, 8.0, 9.0], 4.0), cfg.bundle_len()).unwrap();
        let neg = multiscale_masks(&Mask::zeros(dims), cfg.bundle_len()).unwrap();
        let q1: Vec<f64> = (0..cfg.text_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q2: Vec<f64> = (0..cfg.text_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        GradProblem {
            weights: LossWeights::halving(cfg.bundle_len()),
            net,
            params,
            volume,
            targets: [pos, neg],
            prompts: [q1, q2],
        }
    }

    fn batch<'a, T>(&'a self, volume: &'a Field<T>, prompts: &'a [Vec<T>; 2]) -> [ImageExample<'a, T>; 1] {
        [ImageExample {
            volume,
            prompts: (0..2)
                .map(|i| PromptExample {
                    embedding: &prompts[i],
                    targets: &self.targets[i],
                })
                .collect(),
        }]
    }

    /// `n` distinct parameters drawn round-robin across tensors.
    fn picks(&self, n: usize, seed: u64) -> Vec<(String, usize)> {
        let mut r = rng(seed ^ 0x5eed);
        let mut picks: Vec<(String, usize)> = Vec::new();
        let mut round = 0;
        while picks.len() < n {
            for e in self.net.layout().entries() {
                if picks.len() >= n {
                    break;
                }
                if round < e.len() {
                    let i = e.offset + r.gen_range(0..e.len());
                    if !picks.iter().any(|(_, j)| *j == i) {
                        picks.push((e.name.clone(), i));
                    }
                }
            }
            round += 1;
        }
        picks
    }

    /// Five-point central difference of the f64 loss, replaying `pattern`.
    fn numeric(&self, params: &mut [f64], i: usize, pattern: &gates::GatePattern) -> f64 {
        let batch = self.batch(&self.volume, &self.prompts);
        let orig = params[i];
        let mut at = |k: f64| {
            params[i] = orig + k * FD_STEP;
            gates::replay(pattern, || self.net.loss(params, &batch, &self.weights).unwrap())
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        params[i] = orig;
        (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * FD_STEP)
    }
}

fn compare(picks: Vec<(String, usize)>, analytic: impl Fn(usize) -> f64, mut numeric: impl FnMut(usize) -> f64, floor: f64) -> GradReport {
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (name, i) in picks {
        let a = analytic(i);
        let n = numeric(i);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name, i, a, n));
        }
    }
    report
}

/// Compares analytic gradients of the mean deep-supervision loss (one positive
/// and one negative prompt on a 16^3 volume) with five-point central
/// differences, for `n` distinct parameters drawn round-robin across tensors.
/// Differences are taken with the activation gates of the base point held
/// fixed, so they see the same smooth piece of the network as backprop.
pub fn gradient_check(n: usize, seed: u64) -> GradReport {
    let prob = GradProblem::new(seed);
    let mut params = prob.params.clone();
    let batch = prob.batch(&prob.volume, &prob.prompts);
    let mut analytic = vec![0.0; params.len()];
    let (res, pattern) = gates::record(|| prob.net.loss_and_grad(&params, &batch, &prob.weights, &mut analytic));
    res.unwrap();
    compare(prob.picks(n, seed), |i| analytic[i], |i| prob.numeric(&mut params, i, &pattern), FD_FLOOR)
}

/// Analytic gradients computed in f32 against f64 finite differences on the
/// same (f32-representable) parameters, replaying the f32 gate pattern.
pub fn gradient_check_f32(n: usize, seed: u64) -> GradReport {
    let mut prob = GradProblem::new(seed);
    let p32: Vec<f32> = prob.params.iter().map(|&v| v as f32).collect();
    prob.params = p32.iter().map(|&v| v as f64).collect();
    let v32: Field<f32> = prob.volume.cast();
    prob.volume = v32.cast();
    let q32: [Vec<f32>; 2] = prob.prompts.clone().map(|q| q.iter().map(|&v| v as f32).collect());
    prob.prompts = q32.clone().map(|q| q.iter().map(|&v| v as f64).collect());
    let batch = prob.batch(&v32, &q32);
    let mut analytic = vec![0.0f32; p32.len()];
    let (res, pattern) = gates::record(|| prob.net.loss_and_grad(&p32, &batch, &prob.weights, &mut analytic));
    res.unwrap();
    let mut params = prob.params.clone();
    compare(prob.picks(n, seed), |i| analytic[i] as f64, |i| prob.numeric(&mut params, i, &pattern), 1e-4)
}

/// A 16^3 corpus small enough for unit-scale training runs.
pub fn tiny_data_config(seed: u64) -> vlseg::dataset::DataConfig {
    vlseg::dataset::DataConfig {
        scene: vlseg::synth::SceneConfig::desk_scaled(16),
        n_train: 6,
        n_val: 2,
        n_test: 4,
        seed,
        embedder: Default::default(),
    }
}

pub fn tiny_dataset(seed: u64) -> vlseg::dataset::Dataset {
    vlseg::dataset::Dataset::generate(tiny_data_config(seed)).unwrap()
}

/// Three-stage network matching the default 64-dimensional embeddings.
pub fn tiny_net() -> NetworkConfig {
    NetworkConfig::tiny(vec![4, 8, 8], 2, vlseg::text::DEFAULT_EMBED_DIM)
}

pub fn tiny_train_config(epochs: usize, iterations: usize) -> vlseg::train::TrainConfig {
    vlseg::train::TrainConfig {
        epochs,
        iterations_per_epoch: iterations,
        batch_size: 2,
        patch_size: [16; 3],
        ..vlseg::train::TrainConfig::desk()
    }
}
