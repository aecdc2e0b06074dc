//! Frozen patch-embedding transformer encoders standing in for pretrained
//! visual and depth foundation models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear, TransformerBlock};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            feature_dim: 64,
            num_heads: 4,
            patch_size: 4,
            image_side: 64,
            input_channels: 3,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("feature_dim", self.feature_dim),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("image_side", self.image_side),
            ("input_channels", self.input_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if self.feature_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} is not divisible by num_heads {}",
                self.feature_dim, self.num_heads
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} is not a multiple of patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per side of the token grid.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.input_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Depth,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Depth => "depth",
        }
    }
}

/// Per-layer outputs `[f_1, …, f_N]` of one stream, each `n × c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub modality: Modality,
    pub layers: Vec<Tensor>,
}

/// An N-layer encoder whose parameters are registered as non-trainable.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    modality: Modality,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl FrozenBackbone {
    /// Registers a seeded random backbone under the modality's name prefix.
    pub fn init(config: &BackboneConfig, modality: Modality, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prefix = modality.prefix();
        let c = config.feature_dim;
        let patch_embed = Linear::new(
            store,
            &format!("{prefix}.patch_embed"),
            config.patch_len(),
            c,
            true,
            Init::Scaled,
            false,
            &mut rng,
        )?;
        let pos = Tensor::randn(&[config.num_patches(), c], (1.0 / c as f64).sqrt(), &mut rng);
        let pos_embed = store.add(format!("{prefix}.pos_embed"), pos, false)?;
        let blocks = (0..config.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.layer{i}"), c, config.num_heads, false, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            modality,
            patch_embed,
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Patch embedding plus position embedding: the input to layer 1.
    pub fn embed(&self, tape: &mut Tape<'_>, image: &Tensor) -> Result<Var> {
        let patches = patchify(image, &self.config)?;
        let x = tape.input(patches);
        let x = self.patch_embed.forward(tape, x)?;
        let pos = tape.param(self.pos_embed);
        tape.add(x, pos)
    }

    /// The frozen map of layer `index` (0-based).
    pub fn layer(&self, tape: &mut Tape<'_>, index: usize, x: Var) -> Result<Var> {
        let block = self.blocks.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("layer index {index} out of range 0..{}", self.blocks.len()))
        })?;
        block.forward(tape, x)
    }

    /// Runs every layer and returns each layer's output.
    pub fn forward_features(&self, store: &ParamStore, image: &Tensor) -> Result<LayerFeatures> {
        let mut tape = Tape::new(store);
        let mut x = self.embed(&mut tape, image)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            x = self.layer(&mut tape, i, x)?;
            layers.push(tape.value(x).clone());
        }
        Ok(LayerFeatures {
            modality: self.modality,
            layers,
        })
    }
}

/// Splits an `H × W × C` image into row-major patches of `p·p·C` values.
pub fn patchify(image: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    let (side, p, ch) = (config.image_side, config.patch_size, config.input_channels);
    if image.shape() != [side, side, ch] {
        return Err(Error::shape("image", [side, side, ch], image.shape()));
    }
    let g = config.grid_side();
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * ch);
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..p {
                let row = (gy * p + dy) * side + gx * p;
                out.extend_from_slice(&src[row * ch..(row + p) * ch]);
            }
        }
    }
    Tensor::new(&[g * g, p * p * ch], out)
}
