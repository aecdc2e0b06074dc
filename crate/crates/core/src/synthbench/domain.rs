use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lower clamp of the depth fed to the depth stream.
pub const MIN_DEPTH: f64 = 1e-3;

const VISUAL_STREAM: u64 = 0;
const DEPTH_STREAM: u64 = 1;
const BLACKOUT_STREAM: u64 = 2;

/// A family of input shifts: brightness, fog, sensor noise and blackout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub gain: f64,
    pub fog_density: f64,
    pub fog_color: [f64; 3],
    pub visual_noise: f64,
    /// Replace the visual channels with uniform noise drawn independently of the scene.
    pub visual_blackout: bool,
    pub depth_noise: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainSpec {
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            gain: 1.0,
            fog_density: 0.0,
            fog_color: [1.0, 1.0, 1.0],
            visual_noise: 0.0,
            visual_blackout: false,
            depth_noise: 0.0,
        }
    }

    pub fn night() -> Self {
        Self {
            name: "night".into(),
            gain: 0.2,
            visual_noise: 0.03,
            depth_noise: 0.01,
            ..Self::identity()
        }
    }

    pub fn fog() -> Self {
        Self {
            name: "fog".into(),
            fog_density: 2.5,
            fog_color: [0.8, 0.8, 0.82],
            depth_noise: 0.01,
            ..Self::identity()
        }
    }

    pub fn noise() -> Self {
        Self {
            name: "noise".into(),
            visual_noise: 0.2,
            depth_noise: 0.01,
            ..Self::identity()
        }
    }

    pub fn blackout() -> Self {
        Self {
            name: "blackout".into(),
            visual_blackout: true,
            depth_noise: 0.01,
            ..Self::identity()
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::identity(), Self::night(), Self::fog(), Self::noise(), Self::blackout()]
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::presets()
            .into_iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain preset {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gain >= 0.0
            && self.fog_density >= 0.0
            && self.visual_noise >= 0.0
            && self.depth_noise >= 0.0
            && self.fog_color.iter().all(|c| (0.0..=1.0).contains(c));
        if !ok {
            return Err(Error::Config(format!("domain {:?} has an out-of-range parameter", self.name)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gain == 1.0
            && self.fog_density == 0.0
            && self.visual_noise == 0.0
            && !self.visual_blackout
            && self.depth_noise == 0.0
    }
}

/// Model-ready inputs of one scene under one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `side × side × 3`.
    pub visual: Tensor,
    /// `side × side × 1`.
    pub depth_input: Tensor,
    pub labels: Vec<u8>,
    pub domain: String,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `v = clamp(g·a·e^{−σz} + f·(1 − e^{−σz}) + N(0, η²))`, or uniform noise under
/// blackout; depth gets `clamp(z + N(0, η_d²))`. Labels pass through.
pub fn apply_domain(scene: &Scene, spec: &DomainSpec, seed: u64) -> Result<DomainSample> {
    spec.validate()?;
    let side = scene.image_side;
    let n = side * side;
    let visual = if spec.visual_blackout {
        // Drawn from its own stream without touching the scene.
        let mut rng = stream(seed, BLACKOUT_STREAM);
        (0..n * 3).map(|_| rng.gen::<f64>()).collect()
    } else {
        let mut noise = (spec.visual_noise > 0.0).then(|| {
            (
                stream(seed, VISUAL_STREAM),
                Normal::new(0.0, spec.visual_noise).expect("validated std"),
            )
        });
        let mut v = Vec::with_capacity(n * 3);
        for p in 0..n {
            let t = (-spec.fog_density * scene.depth[p]).exp();
            for ch in 0..3 {
                let mut x = spec.gain * scene.albedo[p * 3 + ch] * t + spec.fog_color[ch] * (1.0 - t);
                if let Some((rng, dist)) = noise.as_mut() {
                    x += dist.sample(rng);
                }
                v.push(x.clamp(0.0, 1.0));
            }
        }
        v
    };
    let depth = if spec.depth_noise > 0.0 {
        let mut rng = stream(seed, DEPTH_STREAM);
        let dist = Normal::new(0.0, spec.depth_noise).expect("validated std");
        scene
            .depth
            .iter()
            .map(|z| (z + dist.sample(&mut rng)).clamp(MIN_DEPTH, 1.0))
            .collect()
    } else {
        scene.depth.clone()
    };
    Ok(DomainSample {
        visual: Tensor::new(&[side, side, 3], visual)?,
        depth_input: Tensor::new(&[side, side, 1], depth)?,
        labels: scene.labels.clone(),
        domain: spec.name.clone(),
    })
}
