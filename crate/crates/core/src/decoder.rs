//! Multi-layer refinement decoder: per-layer projections, channel
//! concatenation with a 1×1 fusion map, and a small transformer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, LayerNorm, Linear, TransformerBlock};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_classes: usize,
    /// Width of the per-layer projection; `None` uses the feature width.
    pub hidden_dim: Option<usize>,
    pub head_layers: usize,
    pub head_heads: usize,
    pub init_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            hidden_dim: None,
            head_layers: 2,
            head_heads: 4,
            init_seed: 2,
        }
    }
}

/// Logits for every patch, rendered to pixels by nearest-patch replication.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub patch_logits: Tensor,
    pub grid_side: usize,
    pub patch_size: usize,
}

impl SegLogits {
    pub fn num_classes(&self) -> usize {
        self.patch_logits.cols()
    }

    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }

    /// Patch index covering pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        (y / self.patch_size) * self.grid_side + x / self.patch_size
    }

    /// `side² × K` per-pixel logits.
    pub fn pixel_logits(&self) -> Tensor {
        let side = self.image_side();
        let k = self.num_classes();
        let mut data = Vec::with_capacity(side * side * k);
        for y in 0..side {
            for x in 0..side {
                data.extend_from_slice(self.patch_logits.row(self.patch_of(y, x)));
            }
        }
        Tensor::new(&[side * side, k], data).expect("consistent shape")
    }

    /// Arg-max class per pixel, ties to the lowest class id.
    pub fn labels(&self) -> Vec<u8> {
        let patch_labels: Vec<u8> = (0..self.patch_logits.rows())
            .map(|r| {
                let row = self.patch_logits.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect();
        let side = self.image_side();
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                out.push(patch_labels[self.patch_of(y, x)]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerProjection {
    /// Inner map applied before the ReLU.
    pub inner: Linear,
    /// Outer map applied after the ReLU.
    pub outer: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    projections: Vec<LayerProjection>,
    fuse: Linear,
    head: Vec<TransformerBlock>,
    head_norm: LayerNorm,
    classifier: Linear,
}

impl Decoder {
    pub fn init(config: &DecoderConfig, num_layers: usize, dim: usize, store: &mut ParamStore) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", config.num_classes)));
        }
        if config.num_classes > 255 {
            return Err(Error::Config("num_classes must fit below the ignore id 255".into()));
        }
        if num_layers == 0 {
            return Err(Error::Config("decoder needs at least one input layer".into()));
        }
        let hidden = config.hidden_dim.unwrap_or(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let projections = (0..num_layers)
            .map(|i| {
                Ok(LayerProjection {
                    inner: Linear::new(store, &format!("decoder.proj{i}.inner"), dim, hidden, true, Init::Scaled, true, &mut rng)?,
                    outer: Linear::new(store, &format!("decoder.proj{i}.outer"), hidden, dim, true, Init::Scaled, true, &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let fuse = Linear::new(store, "decoder.fuse", num_layers * dim, dim, true, Init::Scaled, true, &mut rng)?;
        let head = (0..config.head_layers)
            .map(|i| TransformerBlock::new(store, &format!("decoder.head{i}"), dim, config.head_heads, true, &mut rng))
            .collect::<Result<_>>()?;
        let head_norm = LayerNorm::new(store, "decoder.head_norm", dim, true)?;
        let classifier =
            Linear::new(store, "decoder.classifier", dim, config.num_classes, true, Init::Scaled, true, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            projections,
            fuse,
            head,
            head_norm,
            classifier,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.projections.len()
    }

    pub fn projection(&self, layer: usize) -> Option<&LayerProjection> {
        self.projections.get(layer)
    }

    pub fn fuse_map(&self) -> &Linear {
        &self.fuse
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// `outer(ReLU(inner(f)))` for layer `layer` (0-based).
    pub fn project_layer(&self, tape: &mut Tape<'_>, f: Var, layer: usize) -> Result<Var> {
        let p = self.projections.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("decoder layer {layer} out of range 0..{}", self.projections.len()))
        })?;
        let h = p.inner.forward(tape, f)?;
        let h = tape.relu(h);
        p.outer.forward(tape, h)
    }

    /// Channel concatenation of every projected layer followed by the 1×1
    /// fusion map (a dense `N·c → c` map applied per patch).
    pub fn fuse_multilayer(&self, tape: &mut Tape<'_>, projected: &[Var]) -> Result<Var> {
        if projected.len() != self.projections.len() {
            return Err(Error::shape("decoder inputs", self.projections.len(), projected.len()));
        }
        let cat = if projected.len() == 1 {
            projected[0]
        } else {
            tape.concat(projected, 1)?
        };
        self.fuse.forward(tape, cat)
    }

    /// Transformer head and class projection: `n × K` patch logits.
    pub fn predict(&self, tape: &mut Tape<'_>, fused: Var) -> Result<Var> {
        let mut x = fused;
        for block in &self.head {
            x = block.forward(tape, x)?;
        }
        let x = self.head_norm.forward(tape, x)?;
        self.classifier.forward(tape, x)
    }

    /// Full decoder over the adapted per-layer features.
    pub fn forward(&self, tape: &mut Tape<'_>, layers: &[Var]) -> Result<Var> {
        let projected = layers
            .iter()
            .enumerate()
            .map(|(i, &f)| self.project_layer(tape, f, i))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse_multilayer(tape, &projected)?;
        self.predict(tape, fused)
    }
}
