//! The full segmentation network: backbone, interactive transformer and decoder
//! sharing one parameter store.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureVars};
use crate::decoder::{decode, DecoderOutput, DecoderParams};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::tensor::{Element, ParamId, ParamStore, Tape, Var};
use crate::transformer::{AttentionMaps, InteractiveTransformerParams, Transformer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub key_dim: usize,
    pub decoder_width: usize,
    pub ln_eps: f64,
    /// `false` bypasses the feature interaction module (ablation).
    pub use_fim: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            key_dim: 8,
            decoder_width: 32,
            ln_eps: 1e-5,
            use_fim: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.projection_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.key_dim == 0 || self.decoder_width == 0 {
            return Err(Error::Config("key_dim and decoder_width must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one per-object pass.
pub struct ObjectPrediction<'t, T: Element> {
    pub decoded: DecoderOutput<'t, T>,
    pub attention: AttentionMaps<'t, T>,
}

impl<'t, T: Element> ObjectPrediction<'t, T> {
    /// Foreground probability, `1×h×w`.
    pub fn foreground(&self) -> Result<Var<'t, T>> {
        self.decoded.probs.slice_axis0(1, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub transformer: InteractiveTransformerParams,
    pub decoder: DecoderParams,
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let backbone = Backbone::register(&mut store, &mut init, &config.backbone);
        let transformer = InteractiveTransformerParams::register(
            &mut store,
            &mut init,
            config.channels(),
            config.key_dim,
            config.ln_eps,
        );
        let [skip4, skip8, _] = config.backbone.stage_channels;
        let decoder = DecoderParams::register(
            &mut store,
            &mut init,
            config.channels(),
            skip8,
            skip4,
            config.decoder_width,
        );
        Ok(Self {
            config,
            store,
            backbone,
            transformer,
            decoder,
        })
    }

    /// Segments one object in the query frame given its assembled memory
    /// (`m_ori`, `m_e`: `T·HW×C`).
    pub fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        query: &FeatureVars<'t, T>,
        m_ori: Var<'t, T>,
        m_e: Var<'t, T>,
    ) -> Result<ObjectPrediction<'t, T>> {
        let mut transformer = Transformer::new(tape, &self.store, &self.transformer);
        let state = transformer.forward(m_ori, m_e, query.embedding, self.config.use_fim)?;
        let decoded = decode(tape, &self.store, state.t_out, query.f8, query.f4, &self.decoder)?;
        Ok(ObjectPrediction {
            decoded,
            attention: transformer.into_attention_maps(),
        })
    }

    /// Parameters grouped by sub-network, for gradient-flow checks and reporting.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![
            ("backbone".to_string(), self.backbone.frame_param_ids(&self.store)),
            ("mask_encoder".to_string(), self.backbone.mask_param_ids(&self.store)),
        ];
        for (name, block) in self.transformer.blocks() {
            groups.push((format!("transformer.{name}"), block.ids().to_vec()));
        }
        groups.push(("decoder".to_string(), self.decoder.param_ids(&self.store)));
        groups
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            transformer: self.transformer,
            decoder: self.decoder,
        }
    }
}
