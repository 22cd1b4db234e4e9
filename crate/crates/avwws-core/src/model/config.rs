use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Transformer,
    Conformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Frame-level cross-modal attention inside every encoder block,
    /// convolution fusion after the encoder.
    Flcma,
    /// Feature concatenation + projection before a shared encoder.
    Early,
    /// Two uni-modal encoders, concatenation + projection after.
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn stream(&self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension D (256 paper / 32 tiny).
    pub embed_dim: usize,
    /// Attention heads h.
    pub n_heads: usize,
    /// Encoder blocks N.
    pub n_blocks: usize,
    /// Modalities M (2 for audio-visual).
    pub n_modalities: usize,
    /// Video frames T.
    pub video_frames: usize,
    /// Audio feature frames T' before subsampling.
    pub audio_frames: usize,
    /// Audio time-subsampling rate (T' / rate == T).
    pub rate: usize,
    pub block_kind: BlockKind,
    pub fusion: FusionKind,
    /// Kernel of the convolution-fusion stack.
    pub conv_fusion_kernel: usize,
    /// Depthwise kernel of the conformer convolution module.
    pub conv_module_kernel: usize,
    /// FFN hidden size as a multiple of D (1024 = 4·256 in the paper).
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Square video side (112 paper / 32 tiny).
    pub video_size: usize,
    /// Residual 2-D stages in the visual frontend (2 tiny / 4 paper).
    pub visual_stages: usize,
}

impl ModelConfig {
    pub fn tiny(block_kind: BlockKind, fusion: FusionKind) -> Self {
        Self {
            embed_dim: 32,
            n_heads: 4,
            n_blocks: 2,
            n_modalities: 2,
            video_frames: 64,
            audio_frames: 256,
            rate: 4,
            block_kind,
            fusion,
            conv_fusion_kernel: 3,
            conv_module_kernel: 15,
            ffn_mult: 4,
            dropout: 0.1,
            video_size: 32,
            visual_stages: 2,
        }
    }

    pub fn paper(block_kind: BlockKind, fusion: FusionKind) -> Self {
        Self {
            embed_dim: 256,
            n_heads: 4,
            n_blocks: 6,
            n_modalities: 2,
            video_frames: 64,
            audio_frames: 256,
            rate: 4,
            block_kind,
            fusion,
            conv_fusion_kernel: 3,
            conv_module_kernel: 15,
            ffn_mult: 4,
            dropout: 0.1,
            video_size: 112,
            visual_stages: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_mult
    }

    /// Residual-stage channel widths of the visual frontend.
    pub fn visual_stage_widths(&self) -> Vec<usize> {
        let d = self.embed_dim;
        match self.visual_stages {
            0 | 1 | 2 => vec![d / 4, d / 2],
            _ => vec![d / 4, d / 4, d / 2, d / 2],
        }
    }

    /// Output channels of the 3-D stem (feeds the first residual stage).
    pub fn stem_channels(&self) -> usize {
        (self.visual_stage_widths()[0] / 2).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model.{name}"), msg))
            }
        };
        field(
            "embed_dim",
            self.embed_dim % self.n_heads == 0,
            "embed_dim must be divisible by n_heads",
        )?;
        field(
            "embed_dim",
            self.embed_dim >= 8 && self.embed_dim % 8 == 0,
            "embed_dim must be a multiple of 8",
        )?;
        field(
            "audio_frames",
            self.audio_frames == self.rate * self.video_frames,
            "audio_frames must equal rate * video_frames",
        )?;
        field("rate", self.rate == 4, "audio subsampling rate must be 4")?;
        field(
            "n_modalities",
            self.n_modalities == 2,
            "audio-visual model needs exactly 2 modalities",
        )?;
        field("n_blocks", self.n_blocks >= 1, "need at least one block")?;
        field(
            "conv_module_kernel",
            self.conv_module_kernel % 2 == 1,
            "depthwise kernel must be odd",
        )?;
        field(
            "conv_fusion_kernel",
            self.conv_fusion_kernel % 2 == 1,
            "fusion kernel must be odd",
        )?;
        field(
            "dropout",
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0,1)",
        )?;
        field(
            "video_size",
            self.video_size % 4 == 0 && self.video_size >= 16,
            "video side must be a multiple of 4, at least 16",
        )?;
        Ok(())
    }

    /// Streams (modal slices) the encoder runs over for this fusion kind.
    pub fn encoder_streams(&self) -> Vec<&'static str> {
        match self.fusion {
            FusionKind::Early => vec!["av"],
            _ => vec!["audio", "visual"],
        }
    }

    /// Whether encoder blocks carry the frame-level cross-modal attention
    /// sublayer.
    pub fn has_flcma(&self) -> bool {
        self.fusion == FusionKind::Flcma
    }
}
