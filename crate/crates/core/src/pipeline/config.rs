use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::Motion;
use crate::injector::{InjectionMode, OutputInit};
use crate::memory::MemoryConfig;
use crate::numerics::Real;
use crate::ssm::{MambaConfig, Residual};

/// Everything a run depends on. Serialized as flat TOML; every key is
/// optional and falls back to the default below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// Memory horizon `T`.
    pub memory_horizon: usize,
    /// Frames per window `L`.
    pub window: usize,
    pub stride: usize,
    /// Update gain α.
    pub alpha: Real,
    /// Keep the memory across windows. When false every window starts from
    /// an empty buffer and zero states.
    pub memory_enabled: bool,
    /// One buffer entry per frame instead of one per window.
    pub per_frame_entries: bool,

    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// 0 means `2·d_model`.
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub temporal_encoding: bool,
    /// Block whose output feeds the memory; last block when absent.
    pub feature_layer: Option<usize>,

    pub d_state: usize,
    /// 0 means `2·d_model`.
    pub d_inner: usize,
    pub conv_width: usize,
    pub residual: Residual,
    /// One temporal block for both streams.
    pub share_kv_mamba: bool,

    pub inject_layers: Vec<usize>,
    pub injection_mode: InjectionMode,
    /// 0 means `d_model`.
    pub injector_mid: usize,
    pub output_init: OutputInit,

    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Windows per training sample for each stage-2 rung.
    pub stage2_ladder: Vec<usize>,
    /// Windows per training sample in stage 1.
    pub train_windows: usize,
    pub lr_stage1: Real,
    pub lr_stage2: Real,
    pub weight_decay: Real,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: Real,

    pub motion: Motion,
    pub train_frames: usize,
    pub noise: Real,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            memory_horizon: 4,
            window: 4,
            stride: 4,
            alpha: 1.0,
            memory_enabled: true,
            per_frame_entries: false,
            d_model: 64,
            blocks: 4,
            heads: 4,
            mlp_hidden: 0,
            image_size: 28,
            patch: 14,
            channels: 4,
            temporal_encoding: true,
            feature_layer: None,
            d_state: 16,
            d_inner: 0,
            conv_width: 4,
            residual: Residual::Input,
            share_kv_mamba: false,
            inject_layers: vec![0, 2],
            injection_mode: InjectionMode::TrailingSlice,
            injector_mid: 0,
            output_init: OutputInit::Zero,
            stage1_steps: 200,
            stage2_steps: 60,
            stage2_ladder: vec![8, 16, 32],
            train_windows: 4,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            motion: Motion::Loop,
            train_frames: 96,
            noise: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image: (self.image_size, self.image_size),
            channels: self.channels,
            patch: self.patch,
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            mlp_hidden: if self.mlp_hidden == 0 { 2 * self.d_model } else { self.mlp_hidden },
            temporal_encoding: self.temporal_encoding,
            feature_layer: self.feature_layer,
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_inner: if self.d_inner == 0 { 2 * self.d_model } else { self.d_inner },
            d_state: self.d_state,
            conv_width: self.conv_width,
            residual: self.residual,
        }
    }

    pub fn memory(&self) -> MemoryConfig {
        let m = self.mamba();
        MemoryConfig {
            capacity: self.memory_horizon,
            alpha: self.alpha,
            d_k: self.d_model,
            d_v: self.d_model,
            state: (m.d_inner, m.d_state),
        }
    }

    pub fn injector_mid(&self) -> usize {
        if self.injector_mid == 0 {
            self.d_model
        } else {
            self.injector_mid
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone().validate()?;
        self.memory().validate()?;
        if self.window == 0 || self.stride == 0 {
            return bad("window and stride must be positive".into());
        }
        if self.stride > self.window {
            return Err(Error::Gap {
                stride: self.stride,
                len: self.window,
            });
        }
        if self.d_state == 0 || self.conv_width == 0 {
            return bad("d_state and conv_width must be positive".into());
        }
        if let Some(&l) = self.inject_layers.iter().find(|&&l| l >= self.blocks) {
            return bad(format!("inject layer {l} beyond {} blocks", self.blocks));
        }
        if self.train_windows == 0 || self.stage2_ladder.contains(&0) {
            return bad("training samples need at least one window".into());
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.train_frames == 0 {
            return bad("train_frames must be positive".into());
        }
        Ok(())
    }
}
