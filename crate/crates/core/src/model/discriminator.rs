use rand::Rng;

use super::config::DaConfig;
use super::layers::ConvLayer;
use super::params::{Binding, Init, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Smallest input extent that survives five stride-2 halvings.
pub const MIN_DISCRIMINATOR_EXTENT: usize = 32;

/// Fully convolutional domain classifier: five 4×4 stride-2 convolutions,
/// leaky relu after the first four and a sigmoid after the last. Outputs the
/// per-cell probability that the input came from the source domain.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<ConvLayer>,
    pub slope: f64,
    pub init_std: f64,
}

impl Discriminator {
    pub fn new(in_channels: usize, cfg: &DaConfig) -> Self {
        let chans = [
            in_channels,
            cfg.channels[0],
            cfg.channels[1],
            cfg.channels[2],
            cfg.channels[3],
            1,
        ];
        let layers = (0..5)
            .map(|i| ConvLayer::new(format!("disc.conv{}", i + 1), chans[i], chans[i + 1], 4, 2, 1))
            .collect();
        Self {
            layers,
            slope: cfg.slope,
            init_std: cfg.init_std,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in &self.layers {
            layer.register(
                store,
                ParamGroup::Discriminator,
                Init::Normal { std: self.init_std },
                rng,
            )?;
        }
        Ok(())
    }

    /// Per-cell probability of the source domain.
    pub fn discriminate(&self, b: &Binding<'_>, features: Var) -> Result<Var> {
        Ok(b.graph().sigmoid(self.logits(b, features)?))
    }

    /// Pre-sigmoid scores of [`Discriminator::discriminate`].
    pub fn logits(&self, b: &Binding<'_>, features: Var) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(features);
        let &[_, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!("discriminator expects C×H×W, got {shape:?}")));
        };
        if h < MIN_DISCRIMINATOR_EXTENT || w < MIN_DISCRIMINATOR_EXTENT {
            return Err(Error::dim(format!(
                "discriminator input {h}×{w} is too small for five stride-2 layers (need ≥ {MIN_DISCRIMINATOR_EXTENT})"
            )));
        }
        let mut x = features;
        let (last, body) = self.layers.split_last().expect("five layers");
        for layer in body {
            x = g.leaky_relu(layer.forward(b, x)?, self.slope);
        }
        last.forward(b, x)
    }
}
