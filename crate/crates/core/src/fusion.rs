//! Depth-aware learnable tokens and the baseline adapters they are compared
//! against.
//!
//! Every adapter takes the frozen output of visual layer `i` (and, for the
//! depth-aware variants, the frozen output of depth layer `i`) and produces
//! the feature fed to visual layer `i + 1`. The token variants share one
//! pipeline:
//!
//! ```text
//! A^v = softmax(q_v · (T P_v)ᵀ / √c)          A^d = softmax(q_d · (T P_d)ᵀ / √c)
//! A   = A^v + λ A^d                          mask = per-row arg-max drop of A
//! X   = T W_T + b_T
//! Δ_v = φ((A^v ⊙ mask) X)                    Δ_d = φ((λ A^d ⊙ mask) X)
//! f'  = q_v + ε(ε^v(Δ_v) + ε^d(Δ_d))
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Mlp};
use crate::numerics::{Factor, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "frozen")]
    Frozen,
    #[serde(rename = "linear_delta")]
    LinearDelta,
    #[serde(rename = "rein")]
    Rein,
    #[serde(rename = "config1_add_depth")]
    Config1AddDepth,
    #[serde(rename = "config2_token_depth")]
    Config2TokenDepth,
    #[serde(rename = "depthforge")]
    DepthForge,
    #[serde(rename = "depthforge_no_scale")]
    DepthForgeNoScale,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Frozen,
        Variant::LinearDelta,
        Variant::Rein,
        Variant::Config1AddDepth,
        Variant::Config2TokenDepth,
        Variant::DepthForge,
        Variant::DepthForgeNoScale,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::LinearDelta => "linear_delta",
            Variant::Rein => "rein",
            Variant::Config1AddDepth => "config1_add_depth",
            Variant::Config2TokenDepth => "config2_token_depth",
            Variant::DepthForge => "depthforge",
            Variant::DepthForgeNoScale => "depthforge_no_scale",
        }
    }

    pub fn uses_tokens(self) -> bool {
        !matches!(self, Variant::Frozen | Variant::LinearDelta)
    }

    /// Whether the awareness map carries a λ-weighted depth term.
    pub fn has_depth_branch(self) -> bool {
        matches!(self, Variant::DepthForge | Variant::DepthForgeNoScale)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Zero each patch's strongest token weight before aggregation.
    pub token_drop: bool,
    /// Token count `m` per layer.
    pub num_tokens: usize,
    /// One λ per layer instead of a single global scale.
    pub per_layer_lambda: bool,
    pub init_seed: u64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DepthForge,
            token_drop: true,
            num_tokens: 8,
            per_layer_lambda: false,
            init_seed: 1,
        }
    }
}

/// `x ← x + ReLU(x W₁ + b₁)` twice; the second block starts at zero.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.block1"), dim, dim, true, Init::Scaled, true, rng)?,
            second: Linear::new(store, &format!("{name}.block2"), dim, dim, true, Init::Zeros, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut x = x;
        for lin in [&self.first, &self.second] {
            let h = lin.forward(tape, x)?;
            let h = tape.relu(h);
            x = tape.add(x, h)?;
        }
        Ok(x)
    }
}

/// The per-layer token store `T_i` and the modality projections that turn it
/// into visual and depth keys.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Vec<ParamId>,
    pub proj_visual: ParamId,
    pub proj_depth: Option<ParamId>,
    pub num_tokens: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// One entry (global) or one per layer; empty without a depth branch.
    pub lambda: Vec<ParamId>,
    /// `W_{T_i}`, `b_{T_i}`.
    pub align: Vec<Linear>,
    pub branch_visual: Mlp,
    pub branch_depth: Option<Mlp>,
    pub outer: Mlp,
    pub residual: ResidualBlock,
    /// Pooled-depth token conditioning, one map per layer.
    pub depth_pool: Vec<ParamId>,
}

#[derive(Clone, Debug)]
enum Adapter {
    Identity,
    LinearDelta(Vec<ParamId>),
    Tokens(TokenSet, FusionParams),
}

/// Patch-to-token attention weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AwarenessMap {
    pub layer: usize,
    pub lambda: f64,
    /// `A^v_i`, rows sum to one.
    pub visual: Tensor,
    /// `A^d_i`, rows sum to one.
    pub depth: Option<Tensor>,
    /// `A^v_i + λ A^d_i` before token drop.
    pub combined: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AwarenessVars {
    pub visual: Var,
    pub depth: Option<Var>,
    pub combined: Var,
}

#[derive(Serialize)]
struct AwarenessSidecar {
    layer: usize,
    n: usize,
    m: usize,
    lambda: f64,
}

impl AwarenessMap {
    /// Writes `<stem>.f32` (row-major little-endian `n × m` grid of the
    /// combined map) and `<stem>.json` with `{layer, n, m, lambda}`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let (n, m) = self.combined.dims2()?;
        let grid = dir.join(format!("{stem}.f32"));
        std::fs::write(&grid, self.combined.to_f32_le_bytes()).map_err(|e| Error::io(&grid, e))?;
        let sidecar = AwarenessSidecar {
            layer: self.layer,
            n,
            m,
            lambda: self.lambda,
        };
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

/// Result of one fused layer.
pub struct FusedLayer {
    pub output: Var,
    pub awareness: Option<AwarenessVars>,
}

/// The trainable adaptation inserted between frozen visual layers.
#[derive(Clone, Debug)]
pub struct Fusion {
    config: VariantConfig,
    dim: usize,
    num_layers: usize,
    adapter: Adapter,
}

impl Fusion {
    pub fn init(config: &VariantConfig, num_layers: usize, dim: usize, store: &mut ParamStore) -> Result<Self> {
        if config.num_tokens == 0 {
            return Err(Error::Config("num_tokens must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let variant = config.variant;
        let adapter = match variant {
            Variant::Frozen => Adapter::Identity,
            Variant::LinearDelta => Adapter::LinearDelta(
                (0..num_layers)
                    .map(|i| store.add(format!("fusion.layer{i}.delta_w"), Tensor::zeros(&[dim, dim]), true))
                    .collect::<Result<_>>()?,
            ),
            _ => {
                let m = config.num_tokens;
                let token_std = (1.0 / dim as f64).sqrt();
                let tokens = (0..num_layers)
                    .map(|i| {
                        store.add(
                            format!("fusion.layer{i}.tokens"),
                            Tensor::randn(&[m, dim], token_std, &mut rng),
                            true,
                        )
                    })
                    .collect::<Result<_>>()?;
                let scaled = |rng: &mut ChaCha8Rng| Tensor::randn(&[dim, dim], token_std, rng);
                let proj_visual = store.add("fusion.proj_visual", scaled(&mut rng), true)?;
                let proj_depth = if variant.has_depth_branch() {
                    Some(store.add("fusion.proj_depth", scaled(&mut rng), true)?)
                } else {
                    None
                };
                let lambda = match variant {
                    Variant::DepthForge if config.per_layer_lambda => (0..num_layers)
                        .map(|i| store.add(format!("fusion.layer{i}.lambda"), Tensor::scalar(1.0), true))
                        .collect::<Result<_>>()?,
                    Variant::DepthForge => vec![store.add("fusion.lambda", Tensor::scalar(1.0), true)?],
                    Variant::DepthForgeNoScale => vec![store.add("fusion.lambda", Tensor::scalar(1.0), false)?],
                    _ => Vec::new(),
                };
                let align = (0..num_layers)
                    .map(|i| {
                        Linear::new(store, &format!("fusion.layer{i}.align"), dim, dim, true, Init::Scaled, true, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                let depth_pool = if variant == Variant::Config2TokenDepth {
                    (0..num_layers)
                        .map(|i| store.add(format!("fusion.layer{i}.depth_pool"), scaled(&mut rng), true))
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                let branch_visual =
                    Mlp::new(store, "fusion.branch_visual", dim, dim, dim, Init::Scaled, true, &mut rng)?;
                let branch_depth = if variant.has_depth_branch() {
                    Some(Mlp::new(store, "fusion.branch_depth", dim, dim, dim, Init::Scaled, true, &mut rng)?)
                } else {
                    None
                };
                let outer = Mlp::new(store, "fusion.outer", dim, dim, dim, Init::Zeros, true, &mut rng)?;
                let residual = ResidualBlock::new(store, "fusion.residual", dim, &mut rng)?;
                Adapter::Tokens(
                    TokenSet {
                        tokens,
                        proj_visual,
                        proj_depth,
                        num_tokens: m,
                        dim,
                    },
                    FusionParams {
                        lambda,
                        align,
                        branch_visual,
                        branch_depth,
                        outer,
                        residual,
                        depth_pool,
                    },
                )
            }
        };
        Ok(Self {
            config: config.clone(),
            dim,
            num_layers,
            adapter,
        })
    }

    pub fn config(&self) -> &VariantConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn tokens(&self) -> Option<&TokenSet> {
        match &self.adapter {
            Adapter::Tokens(t, _) => Some(t),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<&FusionParams> {
        match &self.adapter {
            Adapter::Tokens(_, p) => Some(p),
            _ => None,
        }
    }

    pub fn delta_weights(&self) -> &[ParamId] {
        match &self.adapter {
            Adapter::LinearDelta(w) => w,
            _ => &[],
        }
    }

    /// Produces the feature fed to visual layer `layer + 1`.
    ///
    /// `f_v` is the input of visual layer `layer`; `out_v` and `out_d` are
    /// the frozen outputs of visual and depth layer `layer`.
    pub fn fuse_layer(&self, tape: &mut Tape<'_>, layer: usize, f_v: Var, out_v: Var, out_d: Var) -> Result<FusedLayer> {
        if layer >= self.num_layers {
            return Err(Error::InvalidArgument(format!(
                "fusion layer {layer} out of range 0..{}",
                self.num_layers
            )));
        }
        for v in [f_v, out_v, out_d] {
            let (_, c) = tape.value(v).dims2()?;
            if c != self.dim || tape.shape(v) != tape.shape(out_v) {
                return Err(Error::shape("fuse_layer features", tape.shape(out_v), tape.shape(v)));
            }
        }
        match &self.adapter {
            Adapter::Identity => Ok(FusedLayer {
                output: out_v,
                awareness: None,
            }),
            Adapter::LinearDelta(deltas) => {
                let w = tape.param(deltas[layer]);
                let d = tape.matmul(f_v, w)?;
                Ok(FusedLayer {
                    output: tape.add(out_v, d)?,
                    awareness: None,
                })
            }
            Adapter::Tokens(tokens, params) => self.token_layer(tape, layer, tokens, params, out_v, out_d),
        }
    }

    fn token_layer(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        tokens: &TokenSet,
        params: &FusionParams,
        out_v: Var,
        out_d: Var,
    ) -> Result<FusedLayer> {
        let variant = self.config.variant;
        let base = if variant == Variant::Config1AddDepth {
            tape.add(out_v, out_d)?
        } else {
            out_v
        };
        let mut t = tape.param(tokens.tokens[layer]);
        if variant == Variant::Config2TokenDepth {
            let pooled = tape.mean_rows(out_d)?;
            let p = tape.param(params.depth_pool[layer]);
            let cond = tape.matmul(pooled, p)?;
            let shape = tape.shape(t).to_vec();
            let cond = tape.broadcast(cond, &shape)?;
            t = tape.add(t, cond)?;
        }
        let pv = tape.param(tokens.proj_visual);
        let t_v = tape.matmul(t, pv)?;
        let depth = match (tokens.proj_depth, variant.has_depth_branch()) {
            (Some(pd), true) => {
                let pd = tape.param(pd);
                let t_d = tape.matmul(t, pd)?;
                let lambda_id = params.lambda[if params.lambda.len() > 1 { layer } else { 0 }];
                Some((out_d, t_d, tape.param(lambda_id)))
            }
            _ => None,
        };
        let aw = compute_awareness(tape, base, t_v, depth)?;
        let mask = self.config.token_drop.then(|| top_token_mask(tape.value(aw.combined)));

        let x = params.align[layer].forward(tape, t)?;
        let visual_map = match &mask {
            Some(m) => tape.scale(aw.visual, Factor::Mask(m.clone()))?,
            None => aw.visual,
        };
        let (_, delta_v) = attention_optimize(tape, visual_map, x, &params.residual)?;
        let mut branch = params.branch_visual.forward(tape, delta_v)?;
        if let (Some(a_d), Some((_, _, lambda)), Some(mlp)) = (aw.depth, depth, &params.branch_depth) {
            let scaled = tape.scale(a_d, Factor::Scalar(lambda))?;
            let depth_map = match &mask {
                Some(m) => tape.scale(scaled, Factor::Mask(m.clone()))?,
                None => scaled,
            };
            let (_, delta_d) = attention_optimize(tape, depth_map, x, &params.residual)?;
            let b = mlp.forward(tape, delta_d)?;
            branch = tape.add(branch, b)?;
        }
        let delta = params.outer.forward(tape, branch)?;
        Ok(FusedLayer {
            output: tape.add(base, delta)?,
            awareness: Some(aw),
        })
    }

    /// Reads the awareness maps recorded for `layer` off a tape.
    pub fn awareness_map(&self, tape: &Tape<'_>, layer: usize, vars: &AwarenessVars) -> AwarenessMap {
        let lambda = self
            .params()
            .filter(|_| vars.depth.is_some())
            .map(|p| {
                let id = p.lambda[if p.lambda.len() > 1 { layer } else { 0 }];
                tape.store().tensor(id).item()
            })
            .unwrap_or(0.0);
        AwarenessMap {
            layer,
            lambda,
            visual: tape.value(vars.visual).clone(),
            depth: vars.depth.map(|d| tape.value(d).clone()),
            combined: tape.value(vars.combined).clone(),
        }
    }
}

/// `A = softmax(q_v · T_vᵀ / √c) + λ · softmax(q_d · T_dᵀ / √c)`.
///
/// Without a depth term the combined map is the visual map itself.
pub fn compute_awareness(
    tape: &mut Tape<'_>,
    query_v: Var,
    tokens_v: Var,
    depth: Option<(Var, Var, Var)>,
) -> Result<AwarenessVars> {
    let (_, c) = tape.value(query_v).dims2()?;
    let (_, ct) = tape.value(tokens_v).dims2()?;
    if c != ct {
        return Err(Error::shape("awareness channels", c, ct));
    }
    let inv_sqrt = 1.0 / (c as f64).sqrt();
    let visual = attention_weights(tape, query_v, tokens_v, inv_sqrt)?;
    let Some((query_d, tokens_d, lambda)) = depth else {
        return Ok(AwarenessVars {
            visual,
            depth: None,
            combined: visual,
        });
    };
    let (_, cd) = tape.value(query_d).dims2()?;
    let (_, ctd) = tape.value(tokens_d).dims2()?;
    if cd != c || ctd != c {
        return Err(Error::shape("depth awareness channels", c, (cd, ctd)));
    }
    let depth = attention_weights(tape, query_d, tokens_d, inv_sqrt)?;
    let scaled = tape.scale(depth, Factor::Scalar(lambda))?;
    let combined = tape.add(visual, scaled)?;
    Ok(AwarenessVars {
        visual,
        depth: Some(depth),
        combined,
    })
}

fn attention_weights(tape: &mut Tape<'_>, query: Var, keys: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(keys)?;
    let logits = tape.matmul(query, kt)?;
    let logits = tape.scale(logits, Factor::Const(scale))?;
    tape.softmax_rows(logits)
}

/// `Δf̂ = A (T W_T + b_T)` followed by the residual refinement `Δf = φ(Δf̂)`.
///
/// `aligned_tokens` is the already-transformed `T W_T + b_T` (`m × c`).
pub fn attention_optimize(
    tape: &mut Tape<'_>,
    awareness: Var,
    aligned_tokens: Var,
    residual: &ResidualBlock,
) -> Result<(Var, Var)> {
    let (_, m) = tape.value(awareness).dims2()?;
    let (mt, _) = tape.value(aligned_tokens).dims2()?;
    if m != mt {
        return Err(Error::shape("awareness × tokens", m, mt));
    }
    let coarse = tape.matmul(awareness, aligned_tokens)?;
    let refined = residual.forward(tape, coarse)?;
    Ok((coarse, refined))
}

/// 0/1 mask with a zero at each row's first maximal entry.
pub fn top_token_mask(a: &Tensor) -> Vec<f64> {
    let m = a.cols();
    let mut mask = vec![1.0; a.len()];
    for r in 0..a.rows() {
        let row = a.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        mask[r * m + best] = 0.0;
    }
    mask
}

/// Zeroes each row's largest entry, ties going to the lowest column.
pub fn drop_top_token(a: &Tensor) -> Tensor {
    let mask = top_token_mask(a);
    let mut out = a.clone();
    for (v, k) in out.data_mut().iter_mut().zip(mask) {
        *v *= k;
    }
    out
}

/// Frozen computations of one sample that do not depend on trainable state:
/// the visual patch embedding, the output of visual layer 1, and every depth
/// layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenInputs {
    pub visual_embed: Tensor,
    pub visual_first: Tensor,
    pub depth_outputs: Vec<Tensor>,
}

impl FrozenInputs {
    pub fn compute(
        store: &ParamStore,
        visual: &FrozenBackbone,
        depth: &FrozenBackbone,
        image: &Tensor,
        depth_image: &Tensor,
    ) -> Result<Self> {
        if visual.num_layers() != depth.num_layers() {
            return Err(Error::Config("visual and depth backbones must have equal depth".into()));
        }
        let mut tape = Tape::new(store);
        let embed = visual.embed(&mut tape, image)?;
        let first = visual.layer(&mut tape, 0, embed)?;
        let depth_outputs = depth.forward_features(store, depth_image)?.layers;
        Ok(Self {
            visual_embed: tape.value(embed).clone(),
            visual_first: tape.value(first).clone(),
            depth_outputs,
        })
    }
}

/// Adapted visual features of every layer plus the awareness maps recorded
/// along the way.
pub struct AdaptedFeatures {
    pub layers: Vec<Var>,
    pub awareness: Vec<AwarenessVars>,
}

/// Runs the frozen visual stack layer by layer, inserting the fusion adapter
/// after each layer. The depth stream stays purely frozen.
pub fn forward_adapted(
    tape: &mut Tape<'_>,
    visual: &FrozenBackbone,
    fusion: &Fusion,
    inputs: &FrozenInputs,
) -> Result<AdaptedFeatures> {
    let n_layers = visual.num_layers();
    if inputs.depth_outputs.len() != n_layers {
        return Err(Error::shape("depth layer outputs", n_layers, inputs.depth_outputs.len()));
    }
    let mut f_v = tape.input(inputs.visual_embed.clone());
    let mut layers = Vec::with_capacity(n_layers);
    let mut awareness = Vec::new();
    for i in 0..n_layers {
        let out_v = if i == 0 {
            tape.input(inputs.visual_first.clone())
        } else {
            visual.layer(tape, i, f_v)?
        };
        let out_d = tape.input(inputs.depth_outputs[i].clone());
        let fused = fusion.fuse_layer(tape, i, f_v, out_v, out_d)?;
        if let Some(a) = fused.awareness {
            awareness.push(a);
        }
        layers.push(fused.output);
        f_v = fused.output;
    }
    Ok(AdaptedFeatures { layers, awareness })
}
