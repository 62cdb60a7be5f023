//! Model blocks and their assembly into the retrieval network.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod pooling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::AttentionModule;
pub use config::{
    AblationFlags, AttentionConfig, DaConfig, EncoderConfig, LocalNorm, ModelConfig, PoolingConfig, SemSegConfig,
};
pub use decoder::{SegDecoder, SegOutput};
pub use discriminator::{Discriminator, MIN_DISCRIMINATOR_EXTENT};
pub use encoder::{Encoder, FeatureMaps};
pub use layers::ConvLayer;
pub use params::{read_checkpoint, Binding, Init, Param, ParamGroup, ParamStore};
pub use pooling::{gem, ms_gem, single_scale_gem, MsGemStages};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const P4_NAME: &str = "pool.p4";
pub const P5_NAME: &str = "pool.p5";

/// Global image embedding with unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Graph handles produced by one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub maps: FeatureMaps,
    /// Attention map `M`, absent when attention is ablated.
    pub attention: Option<Var>,
    pub descriptor: Var,
}

/// Encoder, attention, pooling, decoder and discriminator with their
/// parameters. Blocks switched off by the ablation flags are not built.
#[derive(Clone, Debug)]
pub struct VprModel {
    config: ModelConfig,
    flags: AblationFlags,
    encoder: Encoder,
    attention: Option<AttentionModule>,
    decoder: Option<SegDecoder>,
    discriminator: Option<Discriminator>,
    params: ParamStore,
}

impl VprModel {
    /// Builds and initializes a model. Each block draws from its own stream of
    /// `seed`, so blocks shared across ablations start from the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let flags = config.ablation.effective();
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder);
        encoder.register(&mut params, &mut stream(1))?;
        let attention = flags
            .att
            .then(|| AttentionModule::new(config.encoder.c4, &config.attention));
        if let Some(a) = &attention {
            a.register(&mut params, &mut stream(2))?;
        }
        let decoder = flags.semseg.then(|| SegDecoder::new(config.encoder.c4, &config.semseg));
        if let Some(d) = &decoder {
            d.register(&mut params, &mut stream(3))?;
        }
        let discriminator = flags.da.then(|| Discriminator::new(config.semseg.classes, &config.da));
        if let Some(d) = &discriminator {
            d.register(&mut params, &mut stream(4))?;
        }
        if config.pooling.trainable_p {
            for (name, p) in [(P4_NAME, config.pooling.p4), (P5_NAME, config.pooling.p5)] {
                params.insert(
                    name,
                    Param {
                        value: Tensor::scalar(p),
                        group: ParamGroup::Main,
                        decay: false,
                    },
                )?;
            }
        }
        Ok(Self {
            config,
            flags,
            encoder,
            attention,
            decoder,
            discriminator,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Ablation flags after dependency resolution.
    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn attention(&self) -> Option<&AttentionModule> {
        self.attention.as_ref()
    }

    pub fn decoder(&self) -> Option<&SegDecoder> {
        self.decoder.as_ref()
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    pub fn descriptor_len(&self) -> usize {
        if self.flags.ms_gem {
            self.config.encoder.c4 + self.config.encoder.c5
        } else {
            self.config.encoder.c5
        }
    }

    pub fn bind<'a>(&'a self, graph: &'a Graph, trainable: Option<ParamGroup>) -> Binding<'a> {
        self.params.bind(graph, trainable)
    }

    fn exponents(&self, b: &Binding<'_>) -> Result<(Var, Var)> {
        if self.config.pooling.trainable_p {
            Ok((b.var(P4_NAME)?, b.var(P5_NAME)?))
        } else {
            let g = b.graph();
            Ok((
                g.constant(Tensor::scalar(self.config.pooling.p4)),
                g.constant(Tensor::scalar(self.config.pooling.p5)),
            ))
        }
    }

    pub fn forward(&self, b: &Binding<'_>, image: Var) -> Result<Forward> {
        let g = b.graph();
        let maps = self.encoder.encode(b, image)?;
        let attention = match &self.attention {
            Some(a) => Some(a.forward(b, maps.f4)?),
            None => None,
        };
        let (p4, p5) = self.exponents(b)?;
        let descriptor = if self.flags.ms_gem {
            let stages = MsGemStages::full(self.config.pooling.local_norm);
            ms_gem(g, maps.f4, maps.f5, attention, p4, p5, stages)?
        } else {
            single_scale_gem(g, maps.f5, attention, p5)?
        };
        Ok(Forward {
            maps,
            attention,
            descriptor,
        })
    }

    /// Segmentation logits for a forward pass, or `None` without a decoder.
    /// The guiding map enters as a constant, so segmentation gradients never
    /// reach the attention module.
    pub fn segment(&self, b: &Binding<'_>, fwd: &Forward) -> Result<Option<SegOutput>> {
        let Some(decoder) = &self.decoder else {
            return Ok(None);
        };
        let guide = match fwd.attention {
            Some(m) if self.flags.g_semseg => Some(b.graph().detach(m)),
            _ => None,
        };
        decoder.segment(b, fwd.maps.f4, guide).map(Some)
    }

    /// Discriminator input: class probabilities resampled to `extent`.
    pub fn domain_input(&self, b: &Binding<'_>, seg: &SegOutput, extent: (usize, usize)) -> Result<Var> {
        let g = b.graph();
        let probs = g.exp(g.log_softmax(seg.logits, 0)?);
        g.upsample_nearest(probs, extent)
    }

    fn require_discriminator(&self) -> Result<&Discriminator> {
        self.discriminator
            .as_ref()
            .ok_or_else(|| Error::Contract("domain adaptation is disabled for this model".into()))
    }

    pub fn discriminate(&self, b: &Binding<'_>, features: Var) -> Result<Var> {
        self.require_discriminator()?.discriminate(b, features)
    }

    pub fn discriminator_logits(&self, b: &Binding<'_>, features: Var) -> Result<Var> {
        self.require_discriminator()?.logits(b, features)
    }

    /// Descriptor of one 3×H×W image under the current parameters.
    pub fn describe(&self, image: &Tensor) -> Result<Descriptor> {
        let g = Graph::new();
        let b = self.bind(&g, None);
        let fwd = self.forward(&b, g.constant(image.clone()))?;
        Ok(Descriptor(g.value(fwd.descriptor).into_data()))
    }

    /// Attention map of one image, or `None` when attention is ablated.
    pub fn attention_map(&self, image: &Tensor) -> Result<Option<Tensor>> {
        let Some(att) = &self.attention else {
            return Ok(None);
        };
        let g = Graph::new();
        let b = self.bind(&g, None);
        let maps = self.encoder.encode(&b, g.constant(image.clone()))?;
        Ok(Some(g.value(att.forward(&b, maps.f4)?)))
    }

    /// Clamps trainable GeM exponents back into their valid range.
    pub fn project_exponents(&mut self) {
        for name in [P4_NAME, P5_NAME] {
            if let Some(p) = self.params.get_mut(name) {
                for v in p.value.data_mut() {
                    *v = v.max(1.0);
                }
            }
        }
    }
}
