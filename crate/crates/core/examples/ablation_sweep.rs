//! Sweeps every adapter variant on a reduced benchmark and prints the
//! comparison table as CSV.
//!
//! cargo run --release --example ablation_sweep -- [steps]

use depthforge::backbone::BackboneConfig;
use depthforge::run::{ablation_csv, sweep, RunConfig};
use depthforge::synthbench::{generate_samples, DatasetSpec, DomainSpec, SceneSpec};
use depthforge::training::TrainConfig;

fn main() -> depthforge::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps must be an integer"));
    let scene = SceneSpec {
        image_side: 32,
        ..Default::default()
    };
    let cfg = RunConfig {
        backbone: BackboneConfig {
            image_side: 32,
            feature_dim: 32,
            ..Default::default()
        },
        train: TrainConfig {
            total_steps: steps,
            batch_size: 4,
            ..Default::default()
        },
        train_data: DatasetSpec {
            scene: scene.clone(),
            num_samples: 128,
            ..Default::default()
        },
        ..Default::default()
    };
    let train_data = generate_samples(&cfg.train_data)?;
    let eval_sets = ["identity", "fog", "blackout"]
        .into_iter()
        .map(|name| {
            let spec = DatasetSpec {
                scene: scene.clone(),
                domain: DomainSpec::preset(name)?,
                num_samples: 32,
                scene_seed: 1000,
                noise_seed: 2000,
            };
            Ok((name.to_string(), generate_samples(&spec)?))
        })
        .collect::<depthforge::Result<Vec<_>>>()?;
    print!("{}", ablation_csv(&sweep(&cfg, &train_data, &eval_sets)));
    Ok(())
}
