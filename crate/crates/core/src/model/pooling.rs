//! Generalized-mean pooling and its attention-weighted multi-scale variant.

use super::config::LocalNorm;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Which normalizations [`ms_gem`] applies. Production code uses
/// [`MsGemStages::full`]; the others exist to inspect raw pooled values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsGemStages {
    pub local_norm: LocalNorm,
    pub scale_norm: bool,
    pub final_norm: bool,
}

impl MsGemStages {
    pub fn full(local_norm: LocalNorm) -> Self {
        Self {
            local_norm,
            scale_norm: true,
            final_norm: true,
        }
    }

    pub fn raw() -> Self {
        Self {
            local_norm: LocalNorm::None,
            scale_norm: false,
            final_norm: false,
        }
    }
}

fn check_exponent(g: &Graph, p: Var) -> Result<()> {
    let v = g.item(p)?;
    if v >= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("GeM exponent must be ≥ 1, got {v}")))
    }
}

/// Per-channel generalized mean `((1/HW) Σ x^p)^{1/p}` of a C×H×W tensor,
/// after clamping negatives to zero. Differentiable in `x` and `p`.
pub fn gem(g: &Graph, x: Var, p: Var) -> Result<Var> {
    check_exponent(g, p)?;
    if g.shape(x).len() != 3 {
        return Err(Error::dim(format!("gem expects C×H×W, got {:?}", g.shape(x))));
    }
    let powered = g.pow(g.relu(x), p)?;
    let mean = g.mean_axes(powered, &[1, 2])?;
    g.pow(mean, g.recip(p))
}

fn weight(g: &Graph, x: Var, m: Option<Var>) -> Result<Var> {
    match m {
        Some(m) => g.broadcast_mul(x, m),
        None => Ok(x),
    }
}

fn local_normalize(g: &Graph, x: Var, norm: LocalNorm) -> Result<Var> {
    match norm {
        LocalNorm::Spatial => g.l2_normalize(x, &[1, 2]),
        LocalNorm::Channel => g.l2_normalize(x, &[0]),
        LocalNorm::None => Ok(x),
    }
}

/// Multi-scale GeM: `f5` is resampled to `f4`'s grid, both are weighted by the
/// attention map `m` (when present), normalized, GeM-pooled, normalized per
/// scale, concatenated and normalized again. Output length is C4 + C5.
pub fn ms_gem(g: &Graph, f4: Var, f5: Var, m: Option<Var>, p4: Var, p5: Var, stages: MsGemStages) -> Result<Var> {
    check_exponent(g, p4)?;
    check_exponent(g, p5)?;
    let s4 = g.shape(f4);
    let &[_, h4, w4] = s4.as_slice() else {
        return Err(Error::dim(format!("f4 must be C×H×W, got {s4:?}")));
    };
    if let Some(m) = m {
        let sm = g.shape(m);
        if sm != [1, h4, w4] {
            return Err(Error::dim(format!(
                "attention map {sm:?} does not match f4 grid {h4}×{w4}"
            )));
        }
    }
    let f5 = g.upsample_nearest(f5, (h4, w4))?;
    let mut pooled = Vec::with_capacity(2);
    for (x, p) in [(f4, p4), (f5, p5)] {
        let x = local_normalize(g, weight(g, x, m)?, stages.local_norm)?;
        let mut v = gem(g, x, p)?;
        if stages.scale_norm {
            v = g.l2_normalize(v, &[0])?;
        }
        pooled.push(v);
    }
    let cat = g.concat(&pooled, 0)?;
    if stages.final_norm {
        g.l2_normalize(cat, &[0])
    } else {
        Ok(cat)
    }
}

/// Single-scale pooling on `f5` (the ms-GeM-off ablation). With an attention
/// map, `f5` is first resampled to the map's grid.
pub fn single_scale_gem(g: &Graph, f5: Var, m: Option<Var>, p: Var) -> Result<Var> {
    let x = match m {
        Some(m) => {
            let sm = g.shape(m);
            let &[1, h, w] = sm.as_slice() else {
                return Err(Error::dim(format!("attention map must be 1×H×W, got {sm:?}")));
            };
            let up = g.upsample_nearest(f5, (h, w))?;
            g.broadcast_mul(up, m)?
        }
        None => f5,
    };
    g.l2_normalize(gem(g, x, p)?, &[0])
}
