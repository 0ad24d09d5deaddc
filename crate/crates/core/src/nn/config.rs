use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;

/// Architecture hyper-parameters of the fusion network.
///
/// Scales are indexed from 0 (finest, full resolution) to `n_stages - 1`
/// (bottleneck). Decoder stages live at scales `0..n_stages - 1`.
/// `fusion_stage_mask` is ordered coarse to fine: its last entry is the finest
/// decoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_stages: usize,
    pub channels: Vec<usize>,
    /// Dimension `d` of the prompt embedding.
    pub text_dim: usize,
    /// Rows `G` of every guidance tensor.
    pub guidance_dim: usize,
    pub prompt_decoder_layers: usize,
    pub prompt_decoder_heads: usize,
    pub query_dim: usize,
    pub ffn_hidden: usize,
    pub adapter_hidden: usize,
    pub fusion_stage_mask: Vec<bool>,
    pub deep_supervision: bool,
    pub conv_kernel: usize,
    pub downsample_factor: usize,
    /// Learned position embeddings for this many bottleneck tokens; 0 disables them.
    #[serde(default)]
    pub positional_tokens: usize,
}

impl NetworkConfig {
    /// The default desk-scale network.
    pub fn desk() -> Self {
        NetworkConfig {
            n_stages: 4,
            channels: vec![16, 32, 64, 64],
            text_dim: crate::text::DEFAULT_EMBED_DIM,
            guidance_dim: 8,
            prompt_decoder_layers: 2,
            prompt_decoder_heads: 4,
            query_dim: 128,
            ffn_hidden: 512,
            adapter_hidden: 128,
            fusion_stage_mask: vec![true; 3],
            deep_supervision: true,
            conv_kernel: 3,
            downsample_factor: 2,
            positional_tokens: 0,
        }
    }

    /// Full-size constants, used for parameter accounting only.
    pub fn full_scale() -> Self {
        NetworkConfig {
            n_stages: 6,
            channels: vec![32, 64, 128, 256, 320, 320],
            text_dim: 2560,
            guidance_dim: 32,
            prompt_decoder_layers: 6,
            prompt_decoder_heads: 8,
            query_dim: 2048,
            ffn_hidden: 8192,
            adapter_hidden: 2048,
            fusion_stage_mask: vec![true; 5],
            deep_supervision: true,
            conv_kernel: 3,
            downsample_factor: 2,
            positional_tokens: 0,
        }
    }

    /// A small network built from explicit channels, with every other knob
    /// scaled down.
    pub fn tiny(channels: Vec<usize>, guidance_dim: usize, text_dim: usize) -> Self {
        let s = channels.len();
        NetworkConfig {
            n_stages: s,
            channels,
            text_dim,
            guidance_dim,
            prompt_decoder_layers: 1,
            prompt_decoder_heads: 2,
            query_dim: 8,
            ffn_hidden: 16,
            adapter_hidden: 8,
            fusion_stage_mask: vec![true; s.saturating_sub(1)],
            deep_supervision: true,
            conv_kernel: 3,
            downsample_factor: 2,
            positional_tokens: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_stages < 2 {
            return bad(format!("need at least 2 stages, got {}", self.n_stages));
        }
        if self.channels.len() != self.n_stages {
            return bad(format!(
                "{} channel entries for {} stages",
                self.channels.len(),
                self.n_stages
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.fusion_stage_mask.len() != self.n_stages - 1 {
            return bad(format!(
                "fusion_stage_mask has {} entries, expected {}",
                self.fusion_stage_mask.len(),
                self.n_stages - 1
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.downsample_factor != 2 {
            return bad("only a downsample factor of 2 is supported".into());
        }
        if self.text_dim == 0 {
            return bad("text_dim must be positive".into());
        }
        if self.text_pathway() {
            if self.prompt_decoder_heads == 0 || self.query_dim == 0 {
                return bad("prompt decoder needs heads and a query dimension".into());
            }
            if !self.query_dim.is_multiple_of(self.prompt_decoder_heads) {
                return bad(format!(
                    "query_dim {} not divisible by {} heads",
                    self.query_dim, self.prompt_decoder_heads
                ));
            }
            if self.ffn_hidden == 0 || self.adapter_hidden == 0 {
                return bad("ffn_hidden and adapter_hidden must be positive".into());
            }
        }
        Ok(())
    }

    /// Whether decoder stage at `scale` applies fusion.
    pub fn fused_at(&self, scale: usize) -> bool {
        self.fusion_stage_mask[self.n_stages - 2 - scale]
    }

    /// Whether the prompt decoder and adapters exist at all.
    pub fn text_pathway(&self) -> bool {
        self.guidance_dim > 0 && self.fusion_stage_mask.iter().any(|&f| f)
    }

    pub fn fused_stage_count(&self) -> usize {
        if self.guidance_dim == 0 {
            0
        } else {
            self.fusion_stage_mask.iter().filter(|&&f| f).count()
        }
    }

    /// Mask fusing the `k` finest decoder stages.
    pub fn finest_k_mask(n_stages: usize, k: usize) -> Vec<bool> {
        let n = n_stages - 1;
        (0..n).map(|j| j >= n.saturating_sub(k)).collect()
    }

    /// Channels of the decoder output `y` at `scale` (the bottleneck for the
    /// coarsest scale).
    pub fn decoder_out_channels(&self, scale: usize) -> usize {
        let c = self.channels[scale];
        if scale + 1 < self.n_stages && self.fused_at(scale) {
            c + self.guidance_dim
        } else {
            c
        }
    }

    /// Scales carrying a segmentation head, finest first.
    pub fn head_scales(&self) -> Vec<usize> {
        if self.deep_supervision {
            (0..self.n_stages - 1).collect()
        } else {
            vec![0]
        }
    }

    pub fn bundle_len(&self) -> usize {
        self.head_scales().len()
    }

    pub fn stage_dims(&self, input: Dims, scale: usize) -> Dims {
        let f = 1 << scale;
        [input[0] / f, input[1] / f, input[2] / f]
    }

    pub fn check_input_dims(&self, dims: Dims) -> Result<()> {
        let f = 1usize << (self.n_stages - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Shape(format!(
                "input {dims:?} not divisible by {f} for {} stages",
                self.n_stages
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_ordering() {
        let mut c = NetworkConfig::tiny(vec![4, 8, 8, 8], 2, 8);
        c.fusion_stage_mask = NetworkConfig::finest_k_mask(4, 1);
        assert_eq!(c.fusion_stage_mask, vec![false, false, true]);
        assert!(c.fused_at(0));
        assert!(!c.fused_at(2));
        assert_eq!(c.decoder_out_channels(0), 6);
        assert_eq!(c.decoder_out_channels(1), 8);
        assert_eq!(c.decoder_out_channels(3), 8);
    }

    #[test]
    fn validation() {
        assert!(NetworkConfig::desk().validate().is_ok());
        assert!(NetworkConfig::full_scale().validate().is_ok());
        let mut c = NetworkConfig::desk();
        c.query_dim = 130;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::desk();
        c.fusion_stage_mask.pop();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::desk();
        c.conv_kernel = 2;
        assert!(c.validate().is_err());
    }
}
