use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use crate::tensor::Real;

/// Gain applied to the adapter output layers so guidance starts near zero.
pub const ADAPTER_OUT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    /// Kaiming scaled by `gain`.
    SmallGain { fan_in: usize, gain: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn id(&self) -> &'static str {
        match self {
            Init::Kaiming { .. } => "kaiming",
            Init::SmallGain { .. } => "small_gain",
            Init::Normal { .. } => "normal",
            Init::Zeros => "zeros",
            Init::Ones => "ones",
        }
    }

    fn std(&self) -> f64 {
        match *self {
            Init::Kaiming { fan_in } => (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::SmallGain { fan_in, gain } => gain * (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Normal { std } => std,
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors packed into one flat buffer, in a fixed documented order:
/// encoder stages (finest first), prompt decoder, adapters (finest first),
/// decoder stages (coarsest first), heads (finest first).
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let entry = ParamEntry {
            name: name.clone(),
            shape,
            offset: self.total,
            init,
        };
        self.total += entry.len();
        self.by_name.insert(name, self.entries.len());
        self.entries.push(entry);
    }

    pub fn for_config(cfg: &NetworkConfig) -> Self {
        let mut l = ParamLayout::default();
        let k3 = cfg.conv_kernel.pow(3);
        let cs = &cfg.channels;
        let s_count = cfg.n_stages;
        for s in 0..s_count {
            let cin = if s == 0 { 1 } else { cs[s - 1] };
            let c = cs[s];
            l.push(
                format!("enc{s}.conv_in.w"),
                vec![c, cin, k3],
                Init::Kaiming { fan_in: cin * k3 },
            );
            l.push(format!("enc{s}.norm_in.gamma"), vec![c], Init::Ones);
            l.push(format!("enc{s}.norm_in.beta"), vec![c], Init::Zeros);
            l.push(
                format!("enc{s}.conv_res.w"),
                vec![c, c, k3],
                Init::Kaiming { fan_in: c * k3 },
            );
            l.push(format!("enc{s}.norm_res.gamma"), vec![c], Init::Ones);
            l.push(format!("enc{s}.norm_res.beta"), vec![c], Init::Zeros);
        }
        if cfg.text_pathway() {
            let dq = cfg.query_dim;
            let cb = cs[s_count - 1];
            l.linear("prompt.query_proj", cfg.text_dim, dq);
            l.linear("prompt.memory_proj", cb, dq);
            if cfg.positional_tokens > 0 {
                l.push(
                    "prompt.positions".into(),
                    vec![cfg.positional_tokens, dq],
                    Init::Normal { std: 0.02 },
                );
            }
            for i in 0..cfg.prompt_decoder_layers {
                for p in ["q", "k", "v", "o"] {
                    l.linear(&format!("prompt.layer{i}.attn.{p}"), dq, dq);
                }
                l.norm(&format!("prompt.layer{i}.norm1"), dq);
                l.linear(&format!("prompt.layer{i}.ffn1"), dq, cfg.ffn_hidden);
                l.linear(&format!("prompt.layer{i}.ffn2"), cfg.ffn_hidden, dq);
                l.norm(&format!("prompt.layer{i}.norm2"), dq);
            }
            for s in 0..s_count - 1 {
                if cfg.fused_at(s) {
                    l.linear(&format!("adapter{s}.fc1"), dq, cfg.adapter_hidden);
                    let out = cfg.guidance_dim * cs[s];
                    l.push(
                        format!("adapter{s}.fc2.w"),
                        vec![out, cfg.adapter_hidden],
                        Init::SmallGain {
                            fan_in: cfg.adapter_hidden,
                            gain: ADAPTER_OUT_GAIN,
                        },
                    );
                    l.push(format!("adapter{s}.fc2.b"), vec![out], Init::Zeros);
                }
            }
        }
        for s in (0..s_count - 1).rev() {
            let c = cs[s];
            let up_in = cfg.decoder_out_channels(s + 1);
            l.push(
                format!("dec{s}.up.w"),
                vec![8, c, up_in],
                Init::Kaiming { fan_in: up_in },
            );
            l.push(format!("dec{s}.up.b"), vec![c], Init::Zeros);
            l.push(
                format!("dec{s}.conv.w"),
                vec![c, 2 * c, k3],
                Init::Kaiming { fan_in: 2 * c * k3 },
            );
            l.push(format!("dec{s}.norm.gamma"), vec![c], Init::Ones);
            l.push(format!("dec{s}.norm.beta"), vec![c], Init::Zeros);
        }
        for s in cfg.head_scales() {
            let cy = cfg.decoder_out_channels(s);
            l.push(
                format!("head{s}.w"),
                vec![1, cy],
                Init::Kaiming { fan_in: cy },
            );
            l.push(format!("head{s}.b"), vec![1], Init::Zeros);
        }
        l
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.push(
            format!("{name}.w"),
            vec![d_out, d_in],
            Init::Kaiming { fan_in: d_in },
        );
        self.push(format!("{name}.b"), vec![d_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gamma"), vec![d], Init::Ones);
        self.push(format!("{name}.beta"), vec![d], Init::Zeros);
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    /// Range of a tensor that must exist.
    pub(crate) fn range(&self, name: &str) -> Range<usize> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
            .range()
    }

    /// Draws initial values, deterministically from `seed`.
    pub fn initialize<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            match e.init {
                Init::Zeros => out.extend(std::iter::repeat_n(T::zero(), e.len())),
                Init::Ones => out.extend(std::iter::repeat_n(T::one(), e.len())),
                init => {
                    let std = init.std();
                    for _ in 0..e.len() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        out.push(T::from_f64_lossy(z * std));
                    }
                }
            }
        }
        out
    }
}

/// Closed-form parameter count of a configuration.
pub fn count_parameters(cfg: &NetworkConfig) -> usize {
    let k3 = cfg.conv_kernel.pow(3);
    let cs = &cfg.channels;
    let s_count = cfg.n_stages;
    let g = cfg.guidance_dim;
    let linear = |i: usize, o: usize| i * o + o;
    let mut n = 0;
    for s in 0..s_count {
        let cin = if s == 0 { 1 } else { cs[s - 1] };
        n += cs[s] * cin * k3 + cs[s] * cs[s] * k3 + 4 * cs[s];
    }
    if cfg.text_pathway() {
        let dq = cfg.query_dim;
        n += linear(cfg.text_dim, dq) + linear(cs[s_count - 1], dq);
        n += cfg.positional_tokens * dq;
        let per_layer = 4 * linear(dq, dq)
            + linear(dq, cfg.ffn_hidden)
            + linear(cfg.ffn_hidden, dq)
            + 4 * dq;
        n += cfg.prompt_decoder_layers * per_layer;
        for s in 0..s_count - 1 {
            if cfg.fused_at(s) {
                n += linear(dq, cfg.adapter_hidden) + linear(cfg.adapter_hidden, g * cs[s]);
            }
        }
    }
    let extra = |s: usize| if cfg.fused_at(s) { g } else { 0 };
    for s in 0..s_count - 1 {
        let up_in = cs[s + 1] + if s + 1 < s_count - 1 { extra(s + 1) } else { 0 };
        n += 8 * cs[s] * up_in + cs[s];
        n += cs[s] * 2 * cs[s] * k3 + 2 * cs[s];
    }
    for s in cfg.head_scales() {
        n += cs[s] + extra(s) + 1;
    }
    n
}
