//! Model geometry configuration. All sizes are config-driven; the desk
//! plan keeps CPU training in the minutes range while a ResNet-18-shaped
//! plan can be instantiated for accounting comparisons.

use crate::{Error, Result};

/// What the per-layer routers consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// Each layer's own input (the default; shapes match the gates).
    PerLayer,
    /// A pooled copy of the stem output.
    Stem,
}

/// Orthogonality target for the experts-merge regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OemTarget {
    /// All-ones matrix minus the identity, as written.
    OnesOffdiag,
    /// Plain cross-orthogonality.
    Zero,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_rows: usize,
    pub input_frames: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Stem stride (rows, frames). Rows are halved by default; the
    /// temporal axis stays intact for the signal decoder.
    pub stem_stride: (usize, usize),
    /// Output channels of each basic block; stride-2 at each block entry.
    pub channel_plan: Vec<usize>,
    /// PhysMLE conv layers per block.
    pub layers_per_block: usize,
    /// Number of low-rank experts per layer.
    pub experts: usize,
    pub rank: usize,
    pub alpha: f32,
    /// Gate amplifier applied to layer-expert routers.
    pub gamma: f32,
    /// Layer-router hidden width = max(4, c_out / router_hidden_div).
    pub router_hidden_div: usize,
    pub task_router_hidden: usize,
    /// Decoder channels for the pulse-signal head; each stage doubles
    /// the temporal extent.
    pub bvp_decoder_channels: Vec<usize>,
    /// Base ablation: drop experts and routers, train the full backbone.
    pub full_fine_tune: bool,
    pub router_input: RouterInput,
    pub oem_target: OemTarget,
    /// Initial biases of the hr / spo2 / rr heads (natural units).
    pub head_bias_init: [f32; 3],
    /// Fixed output scales of the scalar heads; the affine readout is
    /// y = scale·(w·f) + b, which lets the weights span the target
    /// range quickly under per-parameter step sizes.
    pub head_scale: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_rows: 64,
            input_frames: 256,
            input_channels: 3,
            stem_channels: 16,
            stem_stride: (2, 1),
            channel_plan: vec![16, 32, 64, 128],
            layers_per_block: 2,
            experts: 3,
            rank: 16,
            alpha: 32.0,
            gamma: 2.0,
            router_hidden_div: 4,
            task_router_hidden: 32,
            bvp_decoder_channels: vec![64, 32, 16, 8],
            full_fine_tune: false,
            router_input: RouterInput::PerLayer,
            oem_target: OemTarget::OnesOffdiag,
            head_bias_init: [80.0, 94.5, 16.0],
            head_scale: [30.0, 5.0, 8.0],
        }
    }
}

impl ModelConfig {
    /// The desk-scale default plan.
    pub fn desk() -> Self {
        Self::default()
    }

    /// A ResNet-18-shaped plan for parameter and MAC accounting.
    pub fn resnet18ish() -> Self {
        ModelConfig {
            stem_channels: 64,
            channel_plan: vec![64, 128, 256, 512],
            router_hidden_div: 32,
            task_router_hidden: 16,
            bvp_decoder_channels: vec![64, 32, 16, 8],
            ..Self::default()
        }
    }

    pub fn blocks(&self) -> usize {
        self.channel_plan.len()
    }

    /// Spatial size of the final feature map.
    pub fn final_geometry(&self) -> (usize, usize, usize) {
        let mut h = self.input_rows / self.stem_stride.0;
        let mut w = self.input_frames / self.stem_stride.1;
        for _ in 0..self.blocks() {
            h /= 2;
            w /= 2;
        }
        (*self.channel_plan.last().unwrap_or(&0), h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_plan.is_empty() {
            return Err(Error::Config("channel_plan must not be empty".into()));
        }
        if self.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be positive".into()));
        }
        if self.experts > 0 && self.rank == 0 {
            return Err(Error::Config("rank must be positive when experts > 0".into()));
        }
        let (_, h, w) = self.final_geometry();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}x{} collapses to zero through {} stride-2 blocks",
                self.input_rows,
                self.input_frames,
                self.blocks()
            )));
        }
        let upsampled = w << self.bvp_decoder_channels.len();
        if upsampled != self.input_frames {
            return Err(Error::Config(format!(
                "decoder with {} stages maps temporal {} to {}, want {}",
                self.bvp_decoder_channels.len(),
                w,
                upsampled,
                self.input_frames
            )));
        }
        Ok(())
    }
}
