//! Brute-force reference computations, one per checked contract.

use rand::Rng;

use vlseg::loss::{self, LossWeights, BCE_EPS, DICE_SMOOTH};
use vlseg::nn::{fuse, FusionNet, MultiScaleFeatures, NetworkConfig};
use vlseg::synth::Axis;
use vlseg::tensor::{Field, Mask};
use vlseg::train::{augment, crop_mask, patch_origin, AugmentConfig};
use vlseg::vocab::{sample_variant, PromptSamplingPolicy};

use super::{ball_mask, random_field, random_mask, rng};

// ------------------------------------------------------------------ fusion

#[derive(Debug, Default)]
pub struct FusionReport {
    pub instances: usize,
    pub max_abs_err: f64,
    /// Entries whose error exceeds the worst-case f32 rounding bound.
    pub bound_violations: usize,
    pub passthrough_mismatches: usize,
}

fn random_f32(r: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()
}

/// `fuse` in f32 against a per-voxel f64 matrix-vector product on random
/// instances with C <= 8, G <= 4 and spatial extent <= 4 per axis.
pub fn fusion_oracle(instances: usize, seed: u64) -> FusionReport {
    let mut r = rng(seed);
    let mut rep = FusionReport {
        instances,
        ..Default::default()
    };
    let u = f32::EPSILON as f64 / 2.0;
    for _ in 0..instances {
        let c = r.gen_range(1..=8);
        let g = r.gen_range(0..=4);
        let dims = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
        let n: usize = dims.iter().product();
        let z = Field::from_vec(c, dims, random_f32(&mut r, c * n)).unwrap();
        let t = random_f32(&mut r, g * c);
        let y = fuse(&z, &t, g).unwrap();
        assert_eq!((y.channels, y.dims), (c + g, dims));
        for v in 0..n {
            let zv: Vec<f64> = (0..c).map(|ch| z.data[ch * n + v] as f64).collect();
            for (ch, &zc) in zv.iter().enumerate() {
                if y.data[ch * n + v] as f64 != zc {
                    rep.passthrough_mismatches += 1;
                }
            }
            for gi in 0..g {
                let mut exact = 0.0;
                let mut abs = 0.0;
                for ch in 0..c {
                    let p = t[gi * c + ch] as f64 * zv[ch];
                    exact += p;
                    abs += p.abs();
                }
                let err = (y.data[(c + gi) * n + v] as f64 - exact).abs();
                rep.max_abs_err = rep.max_abs_err.max(err);
                let bound = (c as f64 + 1.0) * u * abs / (1.0 - (c as f64 + 1.0) * u);
                if err > bound {
                    rep.bound_violations += 1;
                }
            }
        }
    }
    rep
}

// ------------------------------------------------------------------ shapes

/// Closed-form parameter count, written out per component.
pub fn reference_parameter_count(cfg: &NetworkConfig) -> usize {
    let k = cfg.conv_kernel * cfg.conv_kernel * cfg.conv_kernel;
    let ch = &cfg.channels;
    let last = cfg.n_stages - 1;
    let fused = |s: usize| s < last && cfg.guidance_dim > 0 && cfg.fusion_stage_mask[last - 1 - s];
    let y_channels = |s: usize| ch[s] + if fused(s) { cfg.guidance_dim } else { 0 };
    let affine = |i: usize, o: usize| (i + 1) * o;

    let mut encoder = 0;
    let mut prev = 1;
    for &c in ch {
        encoder += c * prev * k + 2 * c;
        encoder += c * c * k + 2 * c;
        prev = c;
    }
    let any_fused = (0..last).any(fused);
    let mut text = 0;
    if any_fused {
        let d = cfg.query_dim;
        text += affine(cfg.text_dim, d) + affine(ch[last], d) + cfg.positional_tokens * d;
        for _ in 0..cfg.prompt_decoder_layers {
            text += 4 * affine(d, d) + 2 * d + affine(d, cfg.ffn_hidden) + affine(cfg.ffn_hidden, d) + 2 * d;
        }
        for s in (0..last).filter(|&s| fused(s)) {
            text += affine(d, cfg.adapter_hidden) + affine(cfg.adapter_hidden, cfg.guidance_dim * ch[s]);
        }
    }
    let mut decoder = 0;
    for s in 0..last {
        let below = if s + 1 == last { ch[last] } else { y_channels(s + 1) };
        decoder += 2 * 2 * 2 * below * ch[s] + ch[s];
        decoder += 2 * ch[s] * ch[s] * k + 2 * ch[s];
    }
    let heads: usize = if cfg.deep_supervision {
        (0..last).map(|s| y_channels(s) + 1).sum()
    } else {
        y_channels(0) + 1
    };
    encoder + text + decoder + heads
}

/// The acceptance grid: S in {3, 4}, G in {0, 2, 8}, masks none / finest / all,
/// each with and without deep supervision.
pub fn shape_grid() -> Vec<NetworkConfig> {
    let mut out = Vec::new();
    for s in [3usize, 4] {
        let channels: Vec<usize> = (0..s).map(|i| 2 << i.min(2)).collect();
        for g in [0usize, 2, 8] {
            for k in [0, 1, s - 1] {
                for ds in [false, true] {
                    let mut cfg = NetworkConfig::tiny(channels.clone(), g, 6);
                    cfg.fusion_stage_mask = NetworkConfig::finest_k_mask(s, k);
                    cfg.deep_supervision = ds;
                    out.push(cfg);
                }
            }
        }
    }
    out
}

/// Runs one forward pass and checks every intermediate shape against the
/// closed form. Returns a description of the first mismatch.
pub fn check_shapes(cfg: &NetworkConfig, dims: [usize; 3], seed: u64) -> Result<(), String> {
    let net = FusionNet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let expect_count = reference_parameter_count(cfg);
    if net.param_count() != expect_count {
        return Err(format!("{} parameters, expected {expect_count}", net.param_count()));
    }
    let last = cfg.n_stages - 1;
    let params: Vec<f64> = net.init_params(seed);
    let mut r = rng(seed);
    let volume = random_field(&mut r, 1, dims, 1.0);
    let q: Vec<f64> = (0..cfg.text_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let feats: MultiScaleFeatures<f64> = net.encode(&params, &volume).map_err(|e| e.to_string())?;
    if feats.stages.len() != cfg.n_stages {
        return Err(format!("{} encoder stages", feats.stages.len()));
    }
    for (s, f) in feats.stages.iter().enumerate() {
        let want = [dims[0] >> s, dims[1] >> s, dims[2] >> s];
        if f.channels != cfg.channels[s] || f.dims != want || f.data.len() != f.channels * want.iter().product::<usize>() {
            return Err(format!("encoder stage {s}: {}x{:?}", f.channels, f.dims));
        }
    }
    let guid = net
        .prompt_decode(&params, &q, &feats.stages[last])
        .map_err(|e| e.to_string())?;
    if guid.guidance_dim != cfg.guidance_dim || guid.tensors.len() != last {
        return Err(format!("guidance {}x{}", guid.guidance_dim, guid.tensors.len()));
    }
    for (s, t) in guid.tensors.iter().enumerate() {
        if t.len() != cfg.guidance_dim * cfg.channels[s] {
            return Err(format!("guidance {s} has {} entries", t.len()));
        }
        let fused = cfg.guidance_dim > 0 && cfg.fusion_stage_mask[last - 1 - s];
        if !fused && t.iter().any(|&v| v != 0.0) {
            return Err(format!("unfused stage {s} has non-zero guidance"));
        }
    }
    let (bundle, tape) = net.decode_with_tape(&params, &feats, &guid).map_err(|e| e.to_string())?;
    for s in 0..last {
        let z = tape.pre_fusion(s);
        if z.channels != cfg.channels[s] || z.dims != [dims[0] >> s, dims[1] >> s, dims[2] >> s] {
            return Err(format!("decoder stage {s}: {}x{:?}", z.channels, z.dims));
        }
    }
    let heads: Vec<usize> = if cfg.deep_supervision { (0..last).collect() } else { vec![0] };
    if bundle.logits.len() != heads.len() {
        return Err(format!("{} logit maps, expected {}", bundle.logits.len(), heads.len()));
    }
    for (l, &s) in bundle.logits.iter().zip(&heads) {
        if l.channels != 1 || l.dims != [dims[0] >> s, dims[1] >> s, dims[2] >> s] {
            return Err(format!("logits at scale {s}: {}x{:?}", l.channels, l.dims));
        }
    }
    let bad = [dims[0] + 1, dims[1], dims[2]];
    if net.encode(&params, &Field::<f64>::zeros(1, bad)).is_ok() {
        return Err(format!("{bad:?} accepted"));
    }
    Ok(())
}

// --------------------------------------------------------- baseline reduction

/// Finest-only fusion without deep supervision, compared with a late
/// dot-product head computed from a fusion-free copy of the same weights:
/// `logit(v) = (w_a + T^T w_b) . z'(v) + b`. Returns the max abs difference.
pub fn baseline_reduction(seed: u64) -> f64 {
    let mut cfg = NetworkConfig::tiny(vec![4, 6, 8], 3, 10);
    cfg.fusion_stage_mask = NetworkConfig::finest_k_mask(3, 1);
    cfg.deep_supervision = false;
    let net = FusionNet::new(cfg.clone()).unwrap();
    let mut plain_cfg = cfg.clone();
    plain_cfg.fusion_stage_mask = vec![false; 2];
    let plain = FusionNet::new(plain_cfg).unwrap();

    let mut r = rng(seed);
    let mut params: Vec<f64> = net.init_params(seed);
    for p in &mut params {
        *p += r.gen_range(-0.1..0.1);
    }
    let mut plain_params = vec![0.0; plain.param_count()];
    for e in plain.layout().entries() {
        let src = net.layout().get(&e.name).expect("shared tensor");
        if e.name != "head0.w" {
            assert_eq!(src.shape, e.shape, "{}", e.name);
        }
        plain_params[e.range()].copy_from_slice(&params[src.offset..src.offset + e.len()]);
    }

    let dims = [8, 8, 8];
    let volume = random_field(&mut r, 1, dims, 1.0);
    let q: Vec<f64> = (0..cfg.text_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let fused_logits = net.forward(&params, &volume, &q).unwrap().logits.remove(0);

    let feats = plain.encode(&plain_params, &volume).unwrap();
    let (_, tape) = plain
        .decode_with_tape(&plain_params, &feats, &vlseg::nn::GuidanceTensors::zeros(plain.config()))
        .unwrap();
    let zp = tape.pre_fusion(0);
    let guid = net.prompt_decode(&params, &q, &feats.stages[2]).unwrap();
    let t = &guid.tensors[0];
    let (c, g) = (cfg.channels[0], cfg.guidance_dim);
    let head = &params[net.layout().get("head0.w").unwrap().range()];
    let bias = params[net.layout().get("head0.b").unwrap().offset];
    let (wa, wb) = head.split_at(c);
    let embed: Vec<f64> = (0..c)
        .map(|ch| wa[ch] + (0..g).map(|gi| t[gi * c + ch] * wb[gi]).sum::<f64>())
        .collect();
    let n = zp.voxels();
    let mut max = 0.0f64;
    for v in 0..n {
        let reference: f64 = bias + (0..c).map(|ch| embed[ch] * zp.data[ch * n + v]).sum::<f64>();
        max = max.max((reference - fused_logits.data[v]).abs());
    }
    max
}

// ----------------------------------------------------------------- metrics

pub fn brute_dice(pred: &Mask, gt: &Mask) -> f64 {
    let p: Vec<usize> = (0..pred.data.len()).filter(|&i| pred.data[i] != 0).collect();
    let g: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] != 0).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let both = p.iter().filter(|i| g.contains(i)).count();
    2.0 * both as f64 / (p.len() + g.len()) as f64
}

pub fn brute_soft_dice(probs: &[f64], y: &Mask, smooth: f64) -> f64 {
    let mut num = smooth;
    let mut den = smooth;
    for i in 0..probs.len() {
        let t = if y.data[i] != 0 { 1.0 } else { 0.0 };
        num += 2.0 * probs[i] * t;
        den += probs[i] + t;
    }
    1.0 - num / den
}

pub fn brute_bce(probs: &[f64], y: &Mask) -> f64 {
    let mut s = 0.0;
    for i in 0..probs.len() {
        let p = probs[i].max(BCE_EPS).min(1.0 - BCE_EPS);
        let t = if y.data[i] != 0 { 1.0 } else { 0.0 };
        s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    s / probs.len() as f64
}

pub fn brute_deep_supervision(logits: &[Field<f64>], targets: &[Mask], lambdas: &[f64]) -> f64 {
    let total: f64 = lambdas.iter().sum();
    let mut out = 0.0;
    for s in 0..logits.len() {
        let p: Vec<f64> = logits[s].data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        out += lambdas[s] / total * (brute_soft_dice(&p, &targets[s], DICE_SMOOTH) + brute_bce(&p, &targets[s]));
    }
    out
}

#[derive(Debug, Default)]
pub struct MetricReport {
    pub instances: usize,
    pub dice: f64,
    pub hit_rate: f64,
    pub soft_dice: f64,
    pub bce: f64,
    pub deep_supervision: f64,
}

impl MetricReport {
    pub fn worst(&self) -> f64 {
        [self.dice, self.hit_rate, self.soft_dice, self.bce, self.deep_supervision]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn small_dims(r: &mut impl Rng) -> [usize; 3] {
    [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)]
}

/// Each metric against brute force on `instances` random inputs; reports the
/// max abs error per metric.
pub fn metric_oracles(instances: usize, seed: u64) -> MetricReport {
    let mut r = rng(seed);
    let mut rep = MetricReport {
        instances,
        ..Default::default()
    };
    let upd = |slot: &mut f64, a: f64, b: f64| *slot = slot.max((a - b).abs());
    for i in 0..instances {
        let dims = small_dims(&mut r);
        let n: usize = dims.iter().product();
        let density = r.gen_range(0.0..1.0);
        let pred = random_mask(&mut r, dims, density);
        let gt = if i % 10 == 0 { Mask::zeros(dims) } else { random_mask(&mut r, dims, density) };
        upd(&mut rep.dice, loss::dice_metric(&pred, &gt).unwrap(), brute_dice(&pred, &gt));

        let scores: Vec<f64> = (0..r.gen_range(1..40)).map(|_| r.gen_range(0.0..0.2)).collect();
        let hits = scores.iter().filter(|&&d| d >= 0.05).count() as f64 / scores.len() as f64;
        upd(&mut rep.hit_rate, loss::hit_rate(&scores, 0.05).unwrap(), hits);

        let probs: Vec<f64> = (0..n)
            .map(|_| match r.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => r.gen_range(0.0..1.0),
            })
            .collect();
        upd(
            &mut rep.soft_dice,
            loss::soft_dice_loss(&probs, &gt, DICE_SMOOTH).unwrap(),
            brute_soft_dice(&probs, &gt, DICE_SMOOTH),
        );
        upd(&mut rep.bce, loss::bce_loss(&probs, &gt).unwrap(), brute_bce(&probs, &gt));

        let scales = r.gen_range(1..=5);
        let base = [1usize << (scales - 1); 3].map(|f| f * r.gen_range(1..=2));
        let logits: Vec<Field<f64>> = (0..scales)
            .map(|s| random_field(&mut r, 1, base.map(|d| d >> s), 6.0))
            .collect();
        let targets: Vec<Mask> = (0..scales)
            .map(|s| random_mask(&mut r, base.map(|d| d >> s), 0.3))
            .collect();
        let lambdas: Vec<f64> = if i % 2 == 0 {
            (0..scales).map(|s| 0.5f64.powi(s)).collect()
        } else {
            (0..scales).map(|_| r.gen_range(0.05..1.0)).collect()
        };
        let w = LossWeights::new(lambdas.clone(), true).unwrap();
        upd(
            &mut rep.deep_supervision,
            loss::deep_supervision_loss(&logits, &targets, &w).unwrap(),
            brute_deep_supervision(&logits, &targets, &lambdas),
        );
    }
    rep
}

// ---------------------------------------------------------------- sampling

/// Fraction of draws returning the canonical alternative among five.
pub fn canonical_rate(draws: usize, seed: u64) -> f64 {
    let alts: Vec<String> = ["liver", "hepar", "liver organ", "hepatic organ", "the liver"]
        .map(String::from)
        .to_vec();
    let policy = PromptSamplingPolicy::default();
    let mut r = rng(seed);
    let hits = (0..draws)
        .filter(|_| sample_variant(&alts, &mut r, &policy).unwrap() == alts[0])
        .count();
    hits as f64 / draws as f64
}

/// Fraction of patch draws that contain foreground, for a small target in a
/// corner of a 64^3 volume with 32^3 patches.
pub fn foreground_patch_rate(draws: usize, seed: u64) -> f64 {
    let dims = [64, 64, 64];
    let mask = ball_mask(dims, [5.0, 6.0, 58.0], 3.0);
    let patch = [32, 32, 32];
    let policy = PromptSamplingPolicy::default();
    let mut r = rng(seed);
    let hits = (0..draws)
        .filter(|_| {
            let o = patch_origin(dims, Some(&mask), patch, &mut r, &policy).unwrap();
            crop_mask(&mask, o, patch).unwrap().count() > 0
        })
        .count();
    hits as f64 / draws as f64
}

#[derive(Debug, Default)]
pub struct MirrorReport {
    pub draws: usize,
    pub left_right: usize,
    pub up_down: usize,
    pub front_back: usize,
}

/// Augments a volume with a marker voxel near the left face and records which
/// axes moved it.
pub fn mirror_census(draws: usize, seed: u64) -> MirrorReport {
    let dims = [8, 8, 8];
    let marker = [1usize, 2, 3];
    let cfg = AugmentConfig::default();
    let mut r = rng(seed);
    let mut rep = MirrorReport {
        draws,
        ..Default::default()
    };
    for _ in 0..draws {
        let mut volume = Field::<f32>::zeros(1, dims);
        let i = volume.index(0, marker[0], marker[1], marker[2]);
        volume.data[i] = 100.0;
        let mut m = Mask::zeros(dims);
        m.set(marker[0], marker[1], marker[2], true);
        let mut masks = [m];
        let aug = augment(&mut volume, &mut masks, &mut r, &cfg).unwrap();
        let at = masks[0].data.iter().position(|&v| v != 0).unwrap();
        let pos = [at / 64, at / 8 % 8, at % 8];
        let hot = volume
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(hot, at, "volume and mask disagree");
        rep.left_right += (pos[0] != marker[0]) as usize;
        rep.up_down += (pos[1] != marker[1]) as usize;
        rep.front_back += (pos[2] != marker[2]) as usize;
        assert_eq!(aug.flipped.contains(&Axis::UpDown), pos[1] != marker[1]);
        assert!(!aug.flipped.contains(&Axis::LeftRight));
    }
    rep
}
