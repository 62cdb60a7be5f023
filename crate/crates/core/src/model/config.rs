use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toy stand-in for the truncated backbone: four stride stages ending in
/// `f4`, then one stride-2 stage producing `f5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub c4: usize,
    pub c5: usize,
    /// Output channels of the first three stages.
    pub widths: [usize; 3],
    /// Strides of the four stages leading to `f4`.
    pub strides: [usize; 4],
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            c4: 32,
            c5: 64,
            widths: [16, 32, 32],
            strides: [2, 2, 2, 2],
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub bank_channels: usize,
    pub kernels: Vec<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            bank_channels: 64,
            kernels: vec![3, 5, 7],
        }
    }
}

/// Normalization applied to attention-weighted features before GeM.
/// `Channel` divides out the attention weight at every pixel and `Spatial`
/// keeps only the shape of each channel's map, so neither is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalNorm {
    /// Each channel divided by its L2 norm over H×W.
    Spatial,
    /// Each pixel's channel vector divided by its L2 norm.
    Channel,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub p4: f64,
    pub p5: f64,
    pub trainable_p: bool,
    pub local_norm: LocalNorm,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            p4: 3.0,
            p5: 3.0,
            trainable_p: false,
            local_norm: LocalNorm::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemSegConfig {
    pub classes: usize,
    pub width: usize,
    pub alpha: f64,
    /// Std of the normal weight init; `None` scales it by fan-in.
    pub init_std: Option<f64>,
}

impl Default for SemSegConfig {
    fn default() -> Self {
        Self {
            classes: 17,
            width: 32,
            alpha: 0.5,
            init_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaConfig {
    /// Output channels of discriminator layers 1–4; layer 5 always has 1.
    pub channels: [usize; 4],
    pub slope: f64,
    pub beta: f64,
    pub gamma: f64,
    pub init_std: f64,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            channels: [64, 128, 256, 512],
            slope: 0.2,
            beta: 0.0005,
            gamma: 0.5,
            init_std: 0.02,
        }
    }
}

/// Ablation switches. `g_semseg` only takes effect with `att` and `semseg`;
/// `da` only with `semseg`, since the discriminator reads decoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub ms_gem: bool,
    pub att: bool,
    pub semseg: bool,
    pub g_semseg: bool,
    pub da: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            ms_gem: true,
            att: true,
            semseg: true,
            g_semseg: true,
            da: true,
        }
    }

    /// Shared encoder followed by plain GeM.
    pub fn baseline() -> Self {
        Self {
            ms_gem: false,
            att: false,
            semseg: false,
            g_semseg: false,
            da: false,
        }
    }

    pub fn effective(self) -> Self {
        Self {
            g_semseg: self.g_semseg && self.att && self.semseg,
            da: self.da && self.semseg,
            ..self
        }
    }

    pub fn uses_decoder(self) -> bool {
        self.semseg
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub pooling: PoolingConfig,
    pub semseg: SemSegConfig,
    pub da: DaConfig,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.c4 == 0 || e.c5 == 0 || e.widths.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if e.strides.contains(&0) || e.kernel == 0 || e.kernel % 2 == 0 {
            return Err(Error::Config(
                "encoder strides must be positive and the kernel odd".into(),
            ));
        }
        let a = &self.attention;
        if a.bank_channels == 0 || a.kernels.is_empty() || a.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(
                "attention banks need positive channels and odd kernels".into(),
            ));
        }
        let p = &self.pooling;
        if !(p.p4 >= 1.0 && p.p5 >= 1.0) {
            return Err(Error::Config(format!(
                "GeM exponents must be ≥ 1, got {} and {}",
                p.p4, p.p5
            )));
        }
        let s = &self.semseg;
        if s.classes < 2 || s.width == 0 || s.classes > 255 {
            return Err(Error::Config(
                "semseg needs 2..=255 classes and a positive width".into(),
            ));
        }
        if s.alpha < 0.0 || self.da.beta < 0.0 || self.da.gamma < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.da.channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        Ok(())
    }
}
