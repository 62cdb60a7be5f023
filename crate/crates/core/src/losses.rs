//! Retrieval, segmentation and adversarial objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Label id excluded from the segmentation loss.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Triplet margin.
    pub margin: f64,
    /// Segmentation weight.
    pub alpha: f64,
    /// Adversarial weight in the main objective.
    pub beta: f64,
    /// Discriminator loss weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            margin: 0.1,
            alpha: 0.5,
            beta: 0.0005,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("alpha, beta and gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Triplet hinge `max(0, d(q,p) + m − d(q,n))` with Euclidean `d`.
pub fn vpr_loss(g: &Graph, q: Var, p: Var, n: Var, margin: f64) -> Result<Var> {
    let dp = g.euclidean_distance(q, p)?;
    let dn = g.euclidean_distance(q, n)?;
    Ok(g.relu(g.affine(g.sub(dp, dn)?, 1.0, margin)))
}

/// Mean per-pixel cross-entropy of C×H×W `logits` against H×W `labels`
/// (row-major), skipping [`IGNORE_LABEL`].
pub fn semseg_loss(g: &Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(logits);
    let &[c, h, w] = shape.as_slice() else {
        return Err(Error::dim(format!("logits must be C×H×W, got {shape:?}")));
    };
    if labels.len() != h * w {
        return Err(Error::dim(format!("{} labels for a {h}×{w} grid", labels.len())));
    }
    let mut mask = vec![0.0; c * h * w];
    let mut count = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        if usize::from(y) >= c {
            return Err(Error::Domain(format!("label {y} outside 0..{c}")));
        }
        mask[usize::from(y) * h * w + i] = 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMean("every pixel carries the ignore label".into()));
    }
    let scale = -1.0 / count as f64;
    for v in &mut mask {
        *v *= scale;
    }
    let logp = g.log_softmax(logits, 0)?;
    let weights = g.constant(Tensor::new(shape, mask)?);
    Ok(g.sum(g.mul(logp, weights)?))
}

/// `l_vpr + α · l_seg`; the segmentation term is skipped when absent.
pub fn combined_loss(g: &Graph, l_vpr: Var, l_seg: Option<Var>, alpha: f64) -> Result<Var> {
    match l_seg {
        Some(s) if alpha != 0.0 => g.add(l_vpr, g.scale(s, alpha)),
        _ => Ok(l_vpr),
    }
}

fn check_scores(g: &Graph, v: Var, what: &str) -> Result<()> {
    g.with_value(v, |t| match t.data().iter().find(|&&s| !(s > 0.0 && s < 1.0)) {
        Some(s) => Err(Error::Domain(format!("{what} score {s} outside (0, 1)"))),
        None => Ok(()),
    })
}

/// Binary cross-entropy with source labelled 1 and target 0:
/// `−mean ln Ds − mean ln(1 − Dt)`.
pub fn discr_loss(g: &Graph, ds: Var, dt: Var) -> Result<Var> {
    check_scores(g, ds, "source")?;
    check_scores(g, dt, "target")?;
    let src = g.mean(g.ln(ds));
    let tgt = g.mean(g.ln(g.affine(dt, -1.0, 1.0)));
    Ok(g.scale(g.add(src, tgt)?, -1.0))
}

/// `−mean ln Dt`: target scored as if it were source.
pub fn adv_loss(g: &Graph, dt: Var) -> Result<Var> {
    check_scores(g, dt, "target")?;
    Ok(g.scale(g.mean(g.ln(dt)), -1.0))
}

/// [`discr_loss`] on pre-sigmoid scores, via `−ln σ(x) = softplus(−x)`.
/// Stays finite when the discriminator saturates.
pub fn discr_loss_from_logits(g: &Graph, source_logits: Var, target_logits: Var) -> Result<Var> {
    let src = g.mean(g.softplus(g.scale(source_logits, -1.0)));
    let tgt = g.mean(g.softplus(target_logits));
    g.add(src, tgt)
}

/// [`adv_loss`] on pre-sigmoid scores.
pub fn adv_loss_from_logits(g: &Graph, target_logits: Var) -> Var {
    g.mean(g.softplus(g.scale(target_logits, -1.0)))
}

/// The two objectives of one adversarial step. They update disjoint
/// parameter groups.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    /// `l_vpr_semseg + β · l_adv`, for encoder, attention, pooling and decoder.
    pub main: Var,
    /// `γ · l_discr`, for the discriminator.
    pub discriminator: Option<Var>,
}

pub fn total_loss(
    g: &Graph,
    l_vpr_semseg: Var,
    l_adv: Option<Var>,
    l_discr: Option<Var>,
    beta: f64,
    gamma: f64,
) -> Result<TotalLoss> {
    let main = match l_adv {
        Some(a) if beta != 0.0 => g.add(l_vpr_semseg, g.scale(a, beta))?,
        _ => l_vpr_semseg,
    };
    Ok(TotalLoss {
        main,
        discriminator: l_discr.map(|d| g.scale(d, gamma)),
    })
}
