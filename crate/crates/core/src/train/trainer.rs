//! Two-phase adversarial training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{poly_lr, Optimizer};
use super::{evaluate, Snapshot};
use crate::error::{Error, Result};
use crate::eval::{EvalResult, DEFAULT_NS, DEFAULT_POSITIVE_RADIUS_M};
use crate::io::{Dataset, Domain, LabelMap, Role};
use crate::losses::{
    adv_loss_from_logits, combined_loss, discr_loss_from_logits, semseg_loss, total_loss, vpr_loss, LossWeights,
};
use crate::mining::{database_ids, mine_triplet, refresh_cache, DescriptorCache, Triplet};
use crate::model::{ParamGroup, VprModel};
use crate::tensor::{Graph, Tensor, Var};

/// One training example: a source triplet, its label maps, and an optional
/// unlabelled target image.
#[derive(Clone, Debug)]
pub struct Batch {
    pub query: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
    /// Label maps for query, positive, negatives in that order.
    pub labels: Vec<Option<LabelMap>>,
    pub target: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MainMetrics {
    pub l_vpr: f64,
    pub l_seg: Option<f64>,
    pub l_adv: Option<f64>,
    /// Discriminator inputs from this step, detached: (source, target).
    pub domain_features: Option<(Tensor, Tensor)>,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_vpr: f64,
    pub l_seg: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_discr: Option<f64>,
    pub lr: f64,
    pub recall1: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_vpr,l_seg,l_adv,l_discr,lr,recall1";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.l_vpr,
            opt(self.l_seg),
            opt(self.l_adv),
            opt(self.l_discr),
            self.lr,
            opt(self.recall1)
        )
    }
}

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

fn labels_for(logits: &Tensor, map: &LabelMap) -> Vec<u8> {
    let s = logits.shape();
    map.resample(s[1], s[2]).data
}

fn check_finite(step: usize, lr: f64, values: &[(&'static str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite(Box::new(Snapshot {
        step,
        lr,
        losses: values.to_vec(),
    })))
}

/// Model, optimizers and schedule state.
pub struct Trainer {
    config: TrainConfig,
    weights: LossWeights,
    model: VprModel,
    main_opt: Optimizer,
    disc_opt: Optimizer,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = VprModel::new(config.model_config(), seeds(config.seed).init)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: VprModel) -> Self {
        Self {
            weights: config.loss_weights(),
            main_opt: Optimizer::new(config.optimizer.main.clone(), ParamGroup::Main),
            disc_opt: Optimizer::new(config.optimizer.discriminator.clone(), ParamGroup::Discriminator),
            config,
            model,
            step: 0,
        }
    }

    pub fn model(&self) -> &VprModel {
        &self.model
    }

    pub fn into_model(self) -> VprModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn set_weights(&mut self, weights: LossWeights) {
        self.weights = weights;
    }

    fn lr(&self, lr0: f64) -> f64 {
        poly_lr(self.step, self.config.train.steps, lr0, self.config.schedule.power)
    }

    pub fn main_lr(&self) -> f64 {
        self.lr(self.config.optimizer.main.lr0)
    }

    pub fn discriminator_lr(&self) -> f64 {
        self.lr(self.config.optimizer.discriminator.lr0)
    }

    /// Gradients of the main objective for `batch`, keyed by parameter name,
    /// together with the step's metrics. Parameters are not modified.
    pub fn main_gradients(&self, batch: &Batch) -> Result<(BTreeMap<String, Tensor>, MainMetrics)> {
        let g = Graph::new();
        let b = self.model.bind(&g, Some(ParamGroup::Main));
        let w = &self.weights;
        let flags = self.model.flags();

        let images: Vec<&Tensor> = [&batch.query, &batch.positive]
            .into_iter()
            .chain(&batch.negatives)
            .collect();
        let mut fwds = Vec::with_capacity(images.len());
        for img in &images {
            fwds.push(self.model.forward(&b, g.constant((*img).clone()))?);
        }
        let mut l_vpr_terms = Vec::new();
        for n in &fwds[2..] {
            l_vpr_terms.push(vpr_loss(
                &g,
                fwds[0].descriptor,
                fwds[1].descriptor,
                n.descriptor,
                w.margin,
            )?);
        }
        let l_vpr = mean_of(&g, &l_vpr_terms)?;

        let mut seg_terms = Vec::new();
        let mut source_seg = None;
        if flags.semseg {
            for (i, fwd) in fwds.iter().enumerate() {
                let Some(map) = batch.labels.get(i).and_then(Option::as_ref) else {
                    continue;
                };
                let seg = self.model.segment(&b, fwd)?.expect("decoder exists when semseg is on");
                if i == 0 {
                    source_seg = Some(seg);
                }
                let labels = labels_for(&g.value(seg.logits), map);
                seg_terms.push(semseg_loss(&g, seg.logits, &labels)?);
            }
        }
        let l_seg = if seg_terms.is_empty() {
            None
        } else {
            Some(mean_of(&g, &seg_terms)?)
        };
        let l_vpr_seg = combined_loss(&g, l_vpr, l_seg, w.alpha)?;

        let mut l_adv = None;
        let mut domain_features = None;
        if flags.da {
            let target = batch
                .target
                .as_ref()
                .ok_or_else(|| Error::Contract("domain adaptation needs a target image".into()))?;
            let source_seg = match source_seg {
                Some(s) => s,
                None => self.model.segment(&b, &fwds[0])?.expect("decoder exists when da is on"),
            };
            let (_, sh, sw) = batch.query.chw()?;
            let src_feat = self.model.domain_input(&b, &source_seg, (sh, sw))?;
            let tfwd = self.model.forward(&b, g.constant(target.clone()))?;
            let tseg = self.model.segment(&b, &tfwd)?.expect("decoder exists when da is on");
            let (_, th, tw) = target.chw()?;
            let tgt_feat = self.model.domain_input(&b, &tseg, (th, tw))?;
            let logits = self.model.discriminator_logits(&b, tgt_feat)?;
            l_adv = Some(adv_loss_from_logits(&g, logits));
            domain_features = Some((g.value(src_feat), g.value(tgt_feat)));
        }
        let total = total_loss(&g, l_vpr_seg, l_adv, None, w.beta, w.gamma)?;

        let metrics = MainMetrics {
            l_vpr: g.item(l_vpr)?,
            l_seg: l_seg.map(|v| g.item(v)).transpose()?,
            l_adv: l_adv.map(|v| g.item(v)).transpose()?,
            domain_features,
        };
        let mut checks = vec![("l_vpr", metrics.l_vpr)];
        checks.extend(metrics.l_seg.map(|v| ("l_seg", v)));
        checks.extend(metrics.l_adv.map(|v| ("l_adv", v)));
        check_finite(self.step, self.main_lr(), &checks)?;
        let grads = g.backward(total.main)?;
        Ok((b.collect(&grads), metrics))
    }

    /// One update of encoder, attention, pooling and decoder on
    /// `l_vpr + α·l_seg + β·l_adv`; the discriminator is held fixed.
    pub fn step_main(&mut self, batch: &Batch) -> Result<MainMetrics> {
        let (grads, metrics) = self.main_gradients(batch)?;
        let lr = self.main_lr();
        self.main_opt.step(self.model.params_mut(), &grads, lr)?;
        self.model.project_exponents();
        Ok(metrics)
    }

    /// Gradients of `γ · l_discr` on detached features, keyed by parameter.
    pub fn discriminator_gradients(&self, source: &Tensor, target: &Tensor) -> Result<(BTreeMap<String, Tensor>, f64)> {
        let g = Graph::new();
        let b = self.model.bind(&g, Some(ParamGroup::Discriminator));
        let ls = self.model.discriminator_logits(&b, g.constant(source.clone()))?;
        let lt = self.model.discriminator_logits(&b, g.constant(target.clone()))?;
        let l = discr_loss_from_logits(&g, ls, lt)?;
        let total = total_loss(&g, l, None, Some(l), 0.0, self.weights.gamma)?;
        let value = g.item(l)?;
        check_finite(self.step, self.discriminator_lr(), &[("l_discr", value)])?;
        let grads = g.backward(total.discriminator.expect("discriminator objective requested"))?;
        Ok((b.collect(&grads), value))
    }

    /// One Adam update of the discriminator on `γ · l_discr`. With γ = 0 the
    /// parameters are left untouched. Returns `l_discr`.
    pub fn step_discr(&mut self, source: &Tensor, target: &Tensor) -> Result<f64> {
        let (grads, value) = self.discriminator_gradients(source, target)?;
        if self.weights.gamma == 0.0 {
            return Ok(value);
        }
        let lr = self.discriminator_lr();
        self.disc_opt.step(self.model.params_mut(), &grads, lr)?;
        Ok(value)
    }

    /// Advances the schedule by one step.
    pub fn advance(&mut self) {
        self.step += 1;
    }
}

fn mean_of(g: &Graph, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Contract("mean of no terms".into()))?;
    let mut acc = *first;
    for t in rest {
        acc = g.add(acc, *t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Seeds of the independent random streams fanned out from the master seed.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub init: u64,
    pub order: u64,
    pub mining: u64,
    pub augment: u64,
    pub target: u64,
}

pub fn seeds(master: u64) -> Seeds {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    Seeds {
        init: rng.random(),
        order: rng.random(),
        mining: rng.random(),
        augment: rng.random(),
        target: rng.random(),
    }
}

/// Random crop of side `fraction` and a coin-flip horizontal mirror, applied
/// identically to the image and its label map.
pub fn augment<R: Rng>(
    image: &Tensor,
    labels: Option<&LabelMap>,
    fraction: f64,
    rng: &mut R,
) -> Result<(Tensor, Option<LabelMap>)> {
    let (c, h, w) = image.chw()?;
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let flip = rng.random_bool(0.5);
    let src_x = |x: usize| if flip { ox + cw - 1 - x } else { ox + x };
    let mut data = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                data.push(image.data()[(k * h + oy + y) * w + src_x(x)]);
            }
        }
    }
    let labels = labels
        .map(|m| {
            let mut out = Vec::with_capacity(ch * cw);
            for y in 0..ch {
                for x in 0..cw {
                    out.push(m.get(oy + y, src_x(x)));
                }
            }
            LabelMap::new(ch, cw, out)
        })
        .transpose()?;
    Ok((Tensor::new(vec![c, ch, cw], data)?, labels))
}

/// Outcome of [`fit`].
pub struct FitReport {
    pub model: VprModel,
    pub metrics: Vec<MetricsRow>,
    /// Queries skipped because no triplet could be mined.
    pub unusable: usize,
    pub validation: Option<EvalResult>,
}

/// Where [`fit`] writes its outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOutputs<'a> {
    pub dir: Option<&'a Path>,
    pub triplet_log: bool,
}

/// Source-domain validation: held-out source queries against the database.
pub fn validate_on_source(model: &VprModel, source: &Dataset) -> Result<EvalResult> {
    let queries = source.ids(Domain::Source, &[Role::Query]);
    let gallery = database_ids(source.manifest());
    evaluate(
        model,
        source,
        &gallery,
        source,
        &queries,
        DEFAULT_POSITIVE_RADIUS_M,
        &DEFAULT_NS,
    )
}

/// Trains a model from the configuration's seed. `target`, when given,
/// supplies unlabelled images for domain adaptation (its `gallery` and
/// `train` records).
pub fn fit(config: &TrainConfig, source: &Dataset, target: Option<&Dataset>, out: FitOutputs<'_>) -> Result<FitReport> {
    let mut trainer = Trainer::new(config.clone())?;
    let s = seeds(config.seed);
    let da = trainer.model.flags().da;
    let target_ids = match (da, target) {
        (true, Some(t)) => {
            let ids = t.ids(Domain::Target, &[Role::Train, Role::Gallery]);
            if ids.is_empty() {
                return Err(Error::Contract(
                    "target manifest has no gallery or train records".into(),
                ));
            }
            ids
        }
        (true, None) => {
            return Err(Error::Contract(
                "domain adaptation is on but no target data was given".into(),
            ))
        }
        _ => Vec::new(),
    };
    let queries = source.ids(Domain::Source, &[Role::Train]);
    if queries.is_empty() && config.train.steps > 0 {
        return Err(Error::Contract("source manifest has no training records".into()));
    }
    if let Some(dir) = out.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut triplets = match (out.dir, out.triplet_log) {
        (Some(dir), true) => Some(crate::mining::TripletLog::new(std::io::BufWriter::new(
            std::fs::File::create(dir.join("triplets.csv"))?,
        ))?),
        _ => None,
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(s.order);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(s.augment);
    let mut target_rng = ChaCha8Rng::seed_from_u64(s.target);
    let mut cache = DescriptorCache::new(config.mining.cache_refresh_every);
    let mut order: Vec<u64> = Vec::new();
    let mut cursor = 0usize;
    let mut unusable = 0usize;
    let mut metrics = Vec::new();
    let mut validation = None;

    for step in 0..config.train.steps {
        if cache.is_due(step) {
            refresh_cache(&trainer.model, source, &mut cache)?;
        }
        let triplet = next_triplet(
            source,
            &queries,
            &mut order,
            &mut cursor,
            &mut order_rng,
            &cache,
            config,
            s.mining ^ step as u64,
            &mut unusable,
        )?;
        if let Some(log) = &mut triplets {
            log.log(step, &triplet)?;
        }
        let batch = make_batch(
            source,
            target,
            &triplet,
            &target_ids,
            config,
            &mut aug_rng,
            &mut target_rng,
        )?;
        let lr = trainer.main_lr();
        let main = trainer.step_main(&batch)?;
        let l_discr = match &main.domain_features {
            Some((src, tgt)) => Some(trainer.step_discr(src, tgt)?),
            None => None,
        };
        trainer.advance();
        let done = step + 1;
        let evaluate_now =
            done == config.train.steps || (config.train.eval_every > 0 && done % config.train.eval_every == 0);
        let recall1 = if evaluate_now {
            let res = validate_on_source(&trainer.model, source)?;
            let r1 = res.recall(1);
            validation = Some(res);
            r1
        } else {
            None
        };
        metrics.push(MetricsRow {
            step: done,
            l_vpr: main.l_vpr,
            l_seg: main.l_seg,
            l_adv: main.l_adv,
            l_discr,
            lr,
            recall1,
        });
        if let Some(dir) = out.dir {
            if config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0 {
                save_checkpoint(&trainer.model, &dir.join(format!("checkpoint_{done:06}.vprc")))?;
            }
        }
    }
    if let Some(dir) = out.dir {
        save_checkpoint(&trainer.model, &dir.join("model.vprc"))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
        write_metrics(&mut f, &metrics)?;
        f.flush()?;
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    }
    Ok(FitReport {
        model: trainer.into_model(),
        metrics,
        unusable,
        validation,
    })
}

pub fn save_checkpoint(model: &VprModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    model.params().write_checkpoint(&mut f)?;
    f.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn next_triplet(
    source: &Dataset,
    queries: &[u64],
    order: &mut Vec<u64>,
    cursor: &mut usize,
    rng: &mut ChaCha8Rng,
    cache: &DescriptorCache,
    config: &TrainConfig,
    seed: u64,
    unusable: &mut usize,
) -> Result<Triplet> {
    for _ in 0..queries.len() {
        if *cursor >= order.len() {
            *order = queries.to_vec();
            order.shuffle(rng);
            *cursor = 0;
        }
        let q = order[*cursor];
        *cursor += 1;
        match mine_triplet(q, source.manifest(), cache, &config.mining, seed) {
            Ok(t) => return Ok(t),
            Err(Error::QueryUnusable { .. }) => *unusable += 1,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Contract("no training query yields a usable triplet".into()))
}

fn make_batch(
    source: &Dataset,
    target: Option<&Dataset>,
    t: &Triplet,
    target_ids: &[u64],
    config: &TrainConfig,
    aug_rng: &mut ChaCha8Rng,
    target_rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let ids: Vec<u64> = [t.query, t.positive]
        .into_iter()
        .chain(t.negatives.iter().copied())
        .collect();
    let mut images = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let img = source.image(id)?;
        let lab = source.labels(id);
        if config.train.augment {
            let (i, l) = augment(img, lab, config.train.crop_fraction, aug_rng)?;
            images.push(i);
            labels.push(l);
        } else {
            images.push(img.clone());
            labels.push(lab.cloned());
        }
    }
    let target = match target {
        Some(ds) if !target_ids.is_empty() => {
            let id = target_ids[target_rng.random_range(0..target_ids.len())];
            Some(ds.image(id)?.clone())
        }
        _ => None,
    };
    let mut it = images.into_iter();
    let query = it.next().expect("query image");
    let positive = it.next().expect("positive image");
    Ok(Batch {
        query,
        positive,
        negatives: it.collect(),
        labels,
        target,
    })
}
