//! Multi-scale attention: parallel filter banks over `f4`, fused by a 1×1
//! filter into a strictly positive single-channel map.

use rand::Rng;

use super::config::AttentionConfig;
use super::layers::ConvLayer;
use super::params::{Binding, Init, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub banks: Vec<ConvLayer>,
    pub fuse: ConvLayer,
}

impl AttentionModule {
    pub fn new(c4: usize, cfg: &AttentionConfig) -> Self {
        let banks: Vec<ConvLayer> = cfg
            .kernels
            .iter()
            .map(|&k| ConvLayer::same(format!("att.bank{k}"), c4, cfg.bank_channels, k))
            .collect();
        let fuse = ConvLayer::same("att.fuse", cfg.bank_channels * banks.len(), 1, 1);
        Self { banks, fuse }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in self.banks.iter().chain([&self.fuse]) {
            layer.register(store, ParamGroup::Main, Init::XavierUniform, rng)?;
        }
        Ok(())
    }

    /// Attention map `M` (1×H4×W4) for features `f4` (C4×H4×W4).
    pub fn forward(&self, b: &Binding<'_>, f4: Var) -> Result<Var> {
        let g = b.graph();
        let shape = g.shape(f4);
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!("attention expects C×H×W features, got {shape:?}")));
        };
        if c != self.banks[0].c_in {
            return Err(Error::dim(format!(
                "attention banks expect {} channels, features have {c}",
                self.banks[0].c_in
            )));
        }
        let mut outs = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let y = bank.forward(b, f4)?;
            outs.push(g.upsample_nearest(y, (h, w))?);
        }
        let stacked = g.concat(&outs, 0)?;
        Ok(g.softplus(self.fuse.forward(b, stacked)?))
    }
}
