//! Optimizers, configuration and the training loop.

pub mod config;
pub mod optim;
pub mod trainer;

use std::collections::BTreeMap;
use std::fmt;

pub use config::{LoopConfig, OptimizerSection, ScheduleConfig, TrainConfig};
pub use optim::{poly_lr, Optimizer, OptimizerConfig, OptimizerKind};
pub use trainer::{
    augment, fit, save_checkpoint, seeds, validate_on_source, write_metrics, Batch, FitOutputs, FitReport, MainMetrics,
    MetricsRow, Seeds, Trainer, METRICS_HEADER,
};

use crate::error::Result;
use crate::eval::{recall_at_n, DescriptorIndex, EvalQuery, EvalResult};
use crate::io::Dataset;
use crate::model::VprModel;

/// State at the moment a loss became non-finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub lr: f64,
    pub losses: Vec<(&'static str, f64)>,
}

impl fmt::Display for Snapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} lr {}", self.step, self.lr)?;
        for (name, v) in &self.losses {
            write!(f, " {name}={v}")?;
        }
        Ok(())
    }
}

/// Descriptors of `ids` in `dataset`.
pub fn extract(model: &VprModel, dataset: &Dataset, ids: &[u64]) -> Result<DescriptorIndex> {
    let mut index = DescriptorIndex::new(model.descriptor_len());
    for &id in ids {
        index.push(id, model.describe(dataset.image(id)?)?.values())?;
    }
    Ok(index)
}

/// Recall@N of `query_ids` against `gallery_ids` under `model`.
pub fn evaluate(
    model: &VprModel,
    gallery: &Dataset,
    gallery_ids: &[u64],
    queries: &Dataset,
    query_ids: &[u64],
    radius_m: f64,
    ns: &[usize],
) -> Result<EvalResult> {
    let index = extract(model, gallery, gallery_ids)?;
    let coords: BTreeMap<_, _> = gallery_ids
        .iter()
        .map(|&id| gallery.record(id).map(|r| (id, r.coord)))
        .collect::<Result<_>>()?;
    let mut probes = Vec::with_capacity(query_ids.len());
    for &id in query_ids {
        probes.push(EvalQuery {
            id,
            coord: queries.record(id)?.coord,
            descriptor: model.describe(queries.image(id)?)?.into_vec(),
        });
    }
    recall_at_n(&index, &coords, &probes, radius_m, ns)
}
