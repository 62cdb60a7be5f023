//! Finite-difference cases shared by the autodiff tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::io::LabelMap;
use vpr_core::losses::{adv_loss_from_logits, semseg_loss, vpr_loss, LossWeights};
use vpr_core::model::{
    AblationFlags, AttentionConfig, DaConfig, EncoderConfig, LocalNorm, ParamGroup, PoolingConfig, SemSegConfig,
    VprModel,
};
use vpr_core::tensor::{gradcheck, Graph, Tensor, Var};
use vpr_core::train::{Batch, TrainConfig, Trainer};
use vpr_core::Result;

use super::rand_tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;
/// Slope jumps below this cannot move a central difference past `TOL`.
const KINK_TOL: f64 = 1e-7;
pub const SEEDS: u64 = 20;

type Build = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Apply = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Build,
    pub apply: Apply,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    apply: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        build: Box::new(build),
        apply: Box::new(apply),
    }
}

/// Values bounded away from zero so relu-type kinks are never straddled.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = rand_tensor(rng, shape, 0.05, 1.0);
    let signs: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if rng.random_bool(0.5) { v } else { -v })
        .collect();
    Tensor::new(shape.to_vec(), signs).unwrap()
}

fn uniform(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![rand_tensor(r, shape, -1.0, 1.0)]
}

fn pair(a: &'static [usize], b: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![rand_tensor(r, a, -1.0, 1.0), rand_tensor(r, b, -1.0, 1.0)]
}

/// Every differentiable graph op with inputs that keep it smooth.
pub fn op_cases() -> Vec<OpCase> {
    let away = |r: &mut ChaCha8Rng| vec![rand_away_from_zero(r, &[3, 4])];
    let positive = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[3, 4], 0.2, 2.0)];
    let conv = |x: &'static [usize], w: &'static [usize]| {
        move |r: &mut ChaCha8Rng| {
            vec![
                rand_tensor(r, x, -1.0, 1.0),
                rand_tensor(r, w, -1.0, 1.0),
                rand_tensor(r, &w[..1], -1.0, 1.0),
            ]
        }
    };
    vec![
        case("conv2d", conv(&[2, 5, 5], &[3, 2, 3, 3]), |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        case("conv2d k4", conv(&[2, 6, 6], &[2, 2, 4, 4]), |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        case("upsample_nearest", uniform(&[2, 2, 3]), |g, v| {
            g.upsample_nearest(v[0], (5, 7))
        }),
        case("softplus", away, |g, v| Ok(g.softplus(g.scale(v[0], 4.0)))),
        case("relu", away, |g, v| Ok(g.relu(v[0]))),
        case("leaky_relu", away, |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        case("sigmoid", away, |g, v| Ok(g.sigmoid(g.scale(v[0], 3.0)))),
        case("affine", away, |g, v| Ok(g.affine(v[0], -1.5, 0.25))),
        case("scale", away, |g, v| Ok(g.scale(v[0], -2.5))),
        case("exp", away, |g, v| Ok(g.exp(v[0]))),
        case("ln", positive, |g, v| Ok(g.ln(v[0]))),
        case("recip", positive, |g, v| Ok(g.recip(v[0]))),
        case("pow_const", positive, |g, v| Ok(g.pow_const(v[0], 2.7))),
        case(
            "pow",
            |r| vec![rand_tensor(r, &[2, 3], 0.1, 2.0), rand_tensor(r, &[], 1.0, 4.0)],
            |g, v| g.pow(v[0], v[1]),
        ),
        case("add", pair(&[2, 3], &[2, 3]), |g, v| g.add(v[0], v[1])),
        case("sub", pair(&[2, 3], &[2, 3]), |g, v| g.sub(v[0], v[1])),
        case("mul", pair(&[2, 3], &[2, 3]), |g, v| g.mul(v[0], v[1])),
        case("broadcast_mul", pair(&[3, 2, 4], &[1, 2, 4]), |g, v| {
            g.broadcast_mul(v[0], v[1])
        }),
        case("concat", pair(&[2, 3, 2], &[2, 1, 2]), |g, v| {
            g.concat(&[v[0], v[1], v[0]], 1)
        }),
        case("sum_axes", uniform(&[3, 2, 4]), |g, v| g.sum_axes(v[0], &[0, 2])),
        case("mean_axes", uniform(&[3, 2, 4]), |g, v| g.mean_axes(v[0], &[1, 2])),
        case("sum", uniform(&[3, 2]), |g, v| Ok(g.sum(v[0]))),
        case("mean", uniform(&[3, 2]), |g, v| Ok(g.mean(v[0]))),
        case("l2_normalize spatial", uniform(&[3, 2, 4]), |g, v| {
            g.l2_normalize(v[0], &[1, 2])
        }),
        case("l2_normalize channel", uniform(&[3, 2, 4]), |g, v| {
            g.l2_normalize(v[0], &[0])
        }),
        case("log_softmax", uniform(&[3, 2, 4]), |g, v| {
            g.log_softmax(g.scale(v[0], 3.0), 0)
        }),
        case("reshape", uniform(&[3, 2, 4]), |g, v| g.reshape(v[0], vec![6, 4])),
        case("matmul", pair(&[3, 4], &[4, 2]), |g, v| g.matmul(v[0], v[1])),
        case("euclidean_distance", pair(&[5], &[5]), |g, v| {
            g.euclidean_distance(v[0], v[1])
        }),
    ]
}

/// Weights the output with a fixed random tensor so every output element
/// carries a distinct cotangent.
pub fn project(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    Ok(g.sum(g.mul(y, w)?))
}

/// Worst relative error of one op over `SEEDS` random inputs, with its seed.
pub fn op_error(case: &OpCase) -> (f64, u64) {
    let mut worst = (0.0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (case.build)(&mut rng);
        let report = gradcheck(&inputs, H, None, |g, v| project(g, (case.apply)(g, v)?, seed)).unwrap();
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, seed);
        }
    }
    worst
}

/// Toy configuration for the composed objective: 32×32 images, two classes,
/// every module on, trainable exponents.
pub fn toy_config() -> TrainConfig {
    let mut c = TrainConfig {
        encoder: EncoderConfig {
            c4: 4,
            c5: 6,
            widths: [3, 4, 4],
            strides: [2, 2, 1, 1],
            kernel: 3,
        },
        attention: AttentionConfig {
            bank_channels: 2,
            kernels: vec![3, 5],
        },
        pooling: PoolingConfig {
            trainable_p: true,
            local_norm: LocalNorm::None,
            ..PoolingConfig::default()
        },
        semseg: SemSegConfig {
            classes: 2,
            width: 4,
            alpha: 0.5,
            init_std: None,
        },
        da: DaConfig {
            channels: [2, 2, 2, 2],
            beta: 0.3,
            gamma: 0.5,
            // at the default σ the deep activations are ~1e-4, so an h-step
            // straddles leaky-relu kinks and differences stop meaning anything
            init_std: 0.5,
            ..DaConfig::default()
        },
        ablation: AblationFlags::full(),
        ..TrainConfig::default()
    };
    c.mining.margin = 1.0;
    c
}

fn random_labels(rng: &mut ChaCha8Rng) -> LabelMap {
    let data = (0..32 * 32)
        .map(|_| match rng.random_range(0..5) {
            0 => 255,
            k => (k % 2) as u8,
        })
        .collect();
    LabelMap::new(32, 32, data).unwrap()
}

pub fn toy_batch(rng: &mut ChaCha8Rng) -> Batch {
    let mut img = || rand_tensor(rng, &[3, 32, 32], -1.0, 1.0);
    let (query, positive, n1, n2, target) = (img(), img(), img(), img(), img());
    Batch {
        query,
        positive,
        negatives: vec![n1, n2],
        labels: vec![Some(random_labels(rng)), None, None, Some(random_labels(rng))],
        target: Some(target),
    }
}

#[derive(Debug)]
pub struct ComposedReport {
    /// Worst relative error on `l_vpr + α·l_seg + β·l_adv` over main parameters.
    pub main: f64,
    /// Worst relative error on `γ·l_discr` over discriminator parameters.
    pub discriminator: f64,
    pub coordinates: usize,
    /// Coordinates skipped because a relu kink lies within one step.
    pub kinks: usize,
    /// Largest analytic gradient magnitude seen, to show the check is not vacuous.
    pub largest: f64,
}

/// Attention map of every image the main objective reads, in batch order
/// (query, positive, negatives, target).
fn attention_maps(model: &VprModel, batch: &Batch) -> Vec<Tensor> {
    batch_images(batch)
        .map(|img| model.attention_map(img).unwrap().expect("attention is on"))
        .collect()
}

fn batch_images(batch: &Batch) -> impl Iterator<Item = &Tensor> {
    [&batch.query, &batch.positive]
        .into_iter()
        .chain(&batch.negatives)
        .chain(batch.target.as_ref())
}

/// `l_vpr + α·l_seg + β·l_adv` rebuilt from the public blocks, with each
/// image's guiding map held at `guides`. The trainer detaches the guide, so
/// its gradient is the derivative of exactly this function.
fn frozen_guide_objective(model: &VprModel, batch: &Batch, guides: &[Tensor], w: &LossWeights) -> Result<f64> {
    let g = Graph::new();
    let b = model.bind(&g, None);
    let decoder = model.decoder().expect("decoder is on");
    let images: Vec<&Tensor> = batch_images(batch).collect();
    let mut fwds = Vec::new();
    let mut segs = Vec::new();
    for (img, guide) in images.iter().zip(guides) {
        let fwd = model.forward(&b, g.constant((*img).clone()))?;
        segs.push(decoder.segment(&b, fwd.maps.f4, Some(g.constant(guide.clone())))?);
        fwds.push(fwd);
    }
    let negatives = batch.negatives.len();
    let mut l_vpr = 0.0;
    for n in &fwds[2..2 + negatives] {
        l_vpr += g.item(vpr_loss(
            &g,
            fwds[0].descriptor,
            fwds[1].descriptor,
            n.descriptor,
            w.margin,
        )?)?;
    }
    l_vpr /= negatives as f64;

    let mut l_seg = 0.0;
    let mut labelled = 0;
    for (seg, map) in segs.iter().zip(&batch.labels) {
        if let Some(map) = map {
            let s = g.shape(seg.logits);
            let labels = map.resample(s[1], s[2]).data;
            l_seg += g.item(semseg_loss(&g, seg.logits, &labels)?)?;
            labelled += 1;
        }
    }
    l_seg /= labelled as f64;

    let target = segs.last().expect("target image");
    let (_, h, wd) = batch.target.as_ref().expect("target image").chw()?;
    let features = model.domain_input(&b, target, (h, wd))?;
    let l_adv = g.item(adv_loss_from_logits(&g, model.discriminator_logits(&b, features)?))?;
    Ok(l_vpr + w.alpha * l_seg + w.beta * l_adv)
}

/// Central difference at step `H`, or `None` when `f` is not smooth on
/// `[-H, H]`. For smooth `f` the second difference scales with the square of
/// the step and the central difference is stable under halving; a kink at
/// offset `t` adds a slope jump times `H - |t|` to the first, and breaks the
/// second unless `|t| = H/3`, which the first catches.
fn smooth_difference(f: &dyn Fn(f64) -> f64) -> Option<f64> {
    let (f0, p, m, p2, m2) = (f(0.0), f(H), f(-H), f(H / 2.0), f(-H / 2.0));
    let d = (p - m) / (2.0 * H);
    let d2 = (p2 - m2) / H;
    let curvature = ((p - 2.0 * f0 + m) - 4.0 * (p2 - 2.0 * f0 + m2)) / H;
    (rel(d, d2) < KINK_TOL && rel(curvature, 0.0) < KINK_TOL).then_some(d)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Central differences of the full two-phase objective on a toy model, at
/// `per_param` evenly spaced coordinates of every parameter tensor.
pub fn composed_check(seed: u64, per_param: usize) -> ComposedReport {
    let config = toy_config();
    let w: LossWeights = config.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VprModel::new(config.model_config(), seed).unwrap();
    // zero-initialized biases put dead receptive fields exactly on a relu
    // kink; a jitter moves the check to a generic point
    for (_, p) in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let batch = toy_batch(&mut rng);

    let guides = attention_maps(&model, &batch);
    let main_value = |m: &VprModel| frozen_guide_objective(m, &batch, &guides, &w).unwrap();
    let trainer = Trainer::with_model(config.clone(), model.clone());
    let (main_grads, metrics) = trainer.main_gradients(&batch).unwrap();
    let (src, tgt) = metrics.domain_features.unwrap();
    let disc_value = |m: &VprModel| {
        let t = Trainer::with_model(config.clone(), m.clone());
        w.gamma * t.discriminator_gradients(&src, &tgt).unwrap().1
    };
    let (disc_grads, _) = trainer.discriminator_gradients(&src, &tgt).unwrap();

    let mut report = ComposedReport {
        main: 0.0,
        discriminator: 0.0,
        coordinates: 0,
        kinks: 0,
        largest: 0.0,
    };
    let names: Vec<(String, ParamGroup, usize)> = model
        .params()
        .iter()
        .map(|(n, p)| (n.to_owned(), p.group, p.value.len()))
        .collect();
    for (name, group, n) in names {
        let (grads, value): (_, &dyn Fn(&VprModel) -> f64) = match group {
            ParamGroup::Main => (&main_grads, &main_value),
            ParamGroup::Discriminator => (&disc_grads, &disc_value),
        };
        let k = per_param.min(n);
        for j in 0..k {
            let idx = (j * n / k + seed as usize) % n;
            let at = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(&name).unwrap().value.data_mut()[idx] += delta;
                value(&m)
            };
            let Some(numeric) = smooth_difference(&at) else {
                report.kinks += 1;
                continue;
            };
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let e = rel(analytic, numeric);
            match group {
                ParamGroup::Main => report.main = report.main.max(e),
                ParamGroup::Discriminator => report.discriminator = report.discriminator.max(e),
            }
            report.largest = report.largest.max(analytic.abs());
            report.coordinates += 1;
        }
    }
    report
}
