use rand::Rng;

use super::config::EncoderConfig;
use super::layers::ConvLayer;
use super::params::{Binding, Init, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Encoder outputs at the two pooled scales.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    /// C4×H4×W4
    pub f4: Var,
    /// C5×⌊H4/2⌋×⌊W4/2⌋
    pub f5: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<ConvLayer>,
    head: ConvLayer,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let chans = [3, cfg.widths[0], cfg.widths[1], cfg.widths[2], cfg.c4];
        let pad = cfg.kernel / 2;
        let stages = (0..4)
            .map(|i| {
                ConvLayer::new(
                    format!("enc.stage{}", i + 1),
                    chans[i],
                    chans[i + 1],
                    cfg.kernel,
                    cfg.strides[i],
                    pad,
                )
            })
            .collect();
        let head = ConvLayer::new("enc.stage5", cfg.c4, cfg.c5, cfg.kernel, 2, pad);
        Self { stages, head }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in self.stages.iter().chain([&self.head]) {
            layer.register(store, ParamGroup::Main, Init::XavierUniform, rng)?;
        }
        Ok(())
    }

    /// Product of all stage strides, `f5` included.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().chain([&self.head]).map(|l| l.stride).product()
    }

    /// (H4, W4, H5, W5) for an input of `h`×`w`, or a dimension error when the
    /// image is smaller than the total stride.
    pub fn extents(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let through = |mut e: usize, layers: &mut dyn Iterator<Item = &ConvLayer>| -> Option<usize> {
            for l in layers {
                e = l.output_extent(e)?;
            }
            Some(e)
        };
        let too_small = || Error::dim(format!("image {h}×{w} is smaller than the encoder's total stride"));
        if h.min(w) < self.total_stride() {
            return Err(too_small());
        }
        let h4 = through(h, &mut self.stages.iter()).ok_or_else(too_small)?;
        let w4 = through(w, &mut self.stages.iter()).ok_or_else(too_small)?;
        let h5 = self.head.output_extent(h4).ok_or_else(too_small)?;
        let w5 = self.head.output_extent(w4).ok_or_else(too_small)?;
        Ok((h4, w4, h5, w5))
    }

    pub fn encode(&self, b: &Binding<'_>, image: Var) -> Result<FeatureMaps> {
        let g = b.graph();
        let shape = g.shape(image);
        let &[3, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!("encoder expects a 3×H×W image, got {shape:?}")));
        };
        self.extents(h, w)?;
        let mut x = image;
        for layer in &self.stages {
            x = g.relu(layer.forward(b, x)?);
        }
        let f4 = x;
        let f5 = g.relu(self.head.forward(b, f4)?);
        Ok(FeatureMaps { f4, f5 })
    }
}
