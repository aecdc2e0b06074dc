use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FrozenBackbone, Modality};
use crate::decoder::{Decoder, DecoderConfig, SegLogits};
use crate::error::{Error, Result};
use crate::fusion::{forward_adapted, AdaptedFeatures, AwarenessMap, Fusion, FrozenInputs, VariantConfig};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Salt mixed into the shared backbone seed for the depth stream.
const DEPTH_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shape shared by both streams; `input_channels` applies to the visual
    /// stream, the depth stream always reads one channel.
    pub backbone: BackboneConfig,
    pub variant: VariantConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn visual_backbone(&self) -> BackboneConfig {
        self.backbone.clone()
    }

    pub fn depth_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_channels: 1,
            seed: self.backbone.seed ^ DEPTH_SEED_SALT,
            ..self.backbone.clone()
        }
    }
}

/// Both frozen streams, the fusion adapter and the decoder over one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: FrozenBackbone,
    pub depth: FrozenBackbone,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

pub struct ModelOutput {
    pub logits: Var,
    pub adapted: AdaptedFeatures,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let visual = FrozenBackbone::init(&config.visual_backbone(), Modality::Visual, &mut store)?;
        let depth = FrozenBackbone::init(&config.depth_backbone(), Modality::Depth, &mut store)?;
        let (n, c) = (config.backbone.num_layers, config.backbone.feature_dim);
        let fusion = Fusion::init(&config.variant, n, c, &mut store)?;
        let decoder = Decoder::init(&config.decoder, n, c, &mut store)?;
        Ok(Self {
            config: config.clone(),
            store,
            visual,
            depth,
            fusion,
            decoder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.decoder.num_classes
    }

    pub fn count_trainable_params(&self) -> usize {
        self.store.count_trainable()
    }

    /// SHA-256 over both backbones' 32-bit parameter payloads.
    pub fn backbone_checksum(&self) -> String {
        self.store.sha256_of(&[
            &format!("{}.", Modality::Visual.prefix()),
            &format!("{}.", Modality::Depth.prefix()),
        ])
    }

    /// Validates an `H × W × 3` visual image and `H × W × 1` depth image and
    /// runs the parts of both streams that never see trainable parameters.
    pub fn frozen_inputs(&self, image: &Tensor, depth_image: &Tensor) -> Result<FrozenInputs> {
        FrozenInputs::compute(&self.store, &self.visual, &self.depth, image, depth_image)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, inputs: &FrozenInputs) -> Result<ModelOutput> {
        if !std::ptr::eq(tape.store(), &self.store) {
            return Err(Error::InvalidArgument("tape records against a different parameter store".into()));
        }
        let adapted = forward_adapted(tape, &self.visual, &self.fusion, inputs)?;
        let logits = self.decoder.forward(tape, &adapted.layers)?;
        Ok(ModelOutput { logits, adapted })
    }

    pub fn seg_logits(&self, patch_logits: Tensor) -> SegLogits {
        SegLogits {
            patch_logits,
            grid_side: self.config.backbone.grid_side(),
            patch_size: self.config.backbone.patch_size,
        }
    }

    pub fn predict(&self, inputs: &FrozenInputs) -> Result<SegLogits> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, inputs)?;
        Ok(self.seg_logits(tape.value(out.logits).clone()))
    }

    /// Awareness maps of every token layer for one sample.
    pub fn awareness_maps(&self, inputs: &FrozenInputs) -> Result<Vec<AwarenessMap>> {
        let mut tape = Tape::new(&self.store);
        let out = forward_adapted(&mut tape, &self.visual, &self.fusion, inputs)?;
        Ok(out
            .awareness
            .iter()
            .enumerate()
            .map(|(i, a)| self.fusion.awareness_map(&tape, i, a))
            .collect())
    }
}
