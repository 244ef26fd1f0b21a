use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::norm::MixRatioPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Cnn,
    Vit,
}

/// Which normalization a backbone uses. `Ln` is the plain transformer
/// baseline; `TwoBranch` shares each convolution between a batch-norm stream
/// and an instance-norm stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Bn,
    In,
    Ln,
    Flor,
    TwoBranch,
}

impl NormMode {
    pub fn is_mixed(self) -> bool {
        matches!(self, NormMode::Flor | NormMode::TwoBranch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stages: Vec<StageSpec>,
    pub norm_mode: NormMode,
    pub mix_policy: MixRatioPolicy,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::cnn(&[16, 32, 64, 128], NormMode::Flor)
    }
}

impl BackboneConfig {
    /// One residual block per stage; the first stage keeps resolution and
    /// every later one halves it.
    pub fn cnn(channels: &[usize], norm_mode: NormMode) -> Self {
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| StageSpec { channels: c, blocks: 1, stride: if i == 0 { 1 } else { 2 } })
            .collect();
        Self {
            kind: BackboneKind::Cnn,
            stages,
            norm_mode,
            mix_policy: MixRatioPolicy::default(),
            input: [3, 32, 32],
            embed_dim: 64,
            heads: 4,
            depth: 4,
            patch: 8,
            mlp_ratio: 4,
        }
    }

    pub fn vit(norm_mode: NormMode) -> Self {
        Self { kind: BackboneKind::Vit, stages: Vec::new(), norm_mode, ..Self::cnn(&[], norm_mode) }
    }

    /// Number of freezable stages: CNN stages, or transformer blocks.
    pub fn num_stages(&self) -> usize {
        match self.kind {
            BackboneKind::Cnn => self.stages.len(),
            BackboneKind::Vit => self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.input.contains(&0) {
            return fail(format!("input size {:?} has a zero dimension", self.input));
        }
        self.mix_policy.validate()?;
        match self.kind {
            BackboneKind::Cnn => {
                if self.stages.is_empty() {
                    return fail("a cnn needs at least one stage".into());
                }
                for (i, s) in self.stages.iter().enumerate() {
                    if s.channels == 0 || s.blocks == 0 || s.stride == 0 {
                        return fail(format!("stage {i} has a zero channel, block or stride count"));
                    }
                }
                if self.norm_mode == NormMode::Ln {
                    return fail("norm mode ln is only valid for vit".into());
                }
            }
            BackboneKind::Vit => {
                if self.depth == 0 {
                    return fail("a vit needs at least one block".into());
                }
                if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
                    return fail(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
                }
                if self.patch == 0 || !self.input[1].is_multiple_of(self.patch) || !self.input[2].is_multiple_of(self.patch) {
                    return fail(format!("patch {} does not tile input {:?}", self.patch, self.input));
                }
                if self.mlp_ratio == 0 {
                    return fail("mlp_ratio must be positive".into());
                }
                if !matches!(self.norm_mode, NormMode::Ln | NormMode::Flor) {
                    return fail(format!("norm mode {:?} is only valid for cnn", self.norm_mode));
                }
            }
        }
        Ok(())
    }
}
