use rand::Rng;

use super::config::SemSegConfig;
use super::layers::ConvLayer;
use super::params::{Binding, Init, ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Segmentation decoder: three 3×3 conv+relu layers, then a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct SegDecoder {
    pub body: Vec<ConvLayer>,
    pub classifier: ConvLayer,
    pub init_std: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// Penultimate decoder features `f_d`, before any attention weighting.
    pub features: Var,
    /// Features actually fed to the classifier (`f_d ⊙ M` when guided).
    pub weighted: Var,
    pub logits: Var,
}

impl SegDecoder {
    pub fn new(c4: usize, cfg: &SemSegConfig) -> Self {
        let body = (0..3)
            .map(|i| {
                ConvLayer::same(
                    format!("dec.conv{}", i + 1),
                    if i == 0 { c4 } else { cfg.width },
                    cfg.width,
                    3,
                )
            })
            .collect();
        let classifier = ConvLayer::same("dec.classifier", cfg.width, cfg.classes, 1);
        Self {
            body,
            classifier,
            init_std: cfg.init_std,
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.c_out
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let init = match self.init_std {
            Some(std) => Init::Normal { std },
            None => Init::HeNormal,
        };
        for layer in self.body.iter().chain([&self.classifier]) {
            layer.register(store, ParamGroup::Main, init, rng)?;
        }
        Ok(())
    }

    /// Per-pixel class scores on `f4`'s grid. `guide`, when given, is the
    /// 1×H×W map multiplied into `f_d` before classification; `None` is the
    /// unguided ablation.
    pub fn segment(&self, b: &Binding<'_>, f4: Var, guide: Option<Var>) -> Result<SegOutput> {
        let g = b.graph();
        let c = g.shape(f4).first().copied().unwrap_or(0);
        if c != self.body[0].c_in {
            return Err(Error::dim(format!(
                "decoder expects {} input channels, got {c}",
                self.body[0].c_in
            )));
        }
        let mut x = f4;
        for layer in &self.body {
            x = g.relu(layer.forward(b, x)?);
        }
        let features = x;
        let weighted = match guide {
            Some(m) => g.broadcast_mul(features, m)?,
            None => features,
        };
        let logits = self.classifier.forward(b, weighted)?;
        Ok(SegOutput {
            features,
            weighted,
            logits,
        })
    }
}
