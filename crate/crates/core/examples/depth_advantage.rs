//! Trains rein and depthforge with one shared seed on clean scenes, then
//! evaluates both with the visual channels replaced by noise.
//!
//! cargo run --release --example depth_advantage -- [seed]

use depthforge::backbone::BackboneConfig;
use depthforge::run::{self, RunConfig, TrainOutputs};
use depthforge::synthbench::{generate_samples, DatasetSpec, DomainSpec, SceneSpec};
use depthforge::training::TrainConfig;
use depthforge::{Variant, VariantConfig};

fn main() -> depthforge::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let scene = SceneSpec {
        image_side: 32,
        ..Default::default()
    };
    let base = RunConfig {
        backbone: BackboneConfig {
            image_side: 32,
            feature_dim: 32,
            ..Default::default()
        },
        train: TrainConfig {
            total_steps: 2000,
            batch_size: 4,
            ..Default::default()
        },
        train_data: DatasetSpec {
            scene: scene.clone(),
            num_samples: 512,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let train_data = generate_samples(&base.train_data)?;
    let eval = |domain: DomainSpec| {
        generate_samples(&DatasetSpec {
            scene: scene.clone(),
            domain,
            num_samples: 64,
            scene_seed: 1000,
            noise_seed: 2000,
        })
    };
    let clean = eval(DomainSpec::identity())?;
    let blackout = eval(DomainSpec::blackout())?;
    for variant in [Variant::Rein, Variant::DepthForge] {
        let cfg = RunConfig {
            variant: VariantConfig {
                variant,
                ..Default::default()
            },
            ..base.clone()
        };
        let out = run::train(&cfg, &train_data, &TrainOutputs::default())?;
        let c = run::evaluate(&out.model, &clean)?;
        let b = run::evaluate(&out.model, &blackout)?;
        println!(
            "{variant:<11} final loss {:.4}  identity mIoU {:.4}  blackout mIoU {:.4}  (chance {:.4})",
            out.history.last().map_or(f64::NAN, |s| s.loss),
            c.miou,
            b.miou,
            b.chance_miou
        );
    }
    Ok(())
}
