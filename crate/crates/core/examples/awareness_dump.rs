//! Trains depthforge briefly and exports the per-layer awareness maps of one
//! scene as raw f32 grids with JSON sidecars.
//!
//! cargo run --release --example awareness_dump -- [out_dir]

use std::path::PathBuf;

use depthforge::backbone::BackboneConfig;
use depthforge::run::{self, RunConfig, TrainOutputs};
use depthforge::synthbench::{generate_samples, DatasetSpec, SceneSpec};
use depthforge::training::TrainConfig;

fn main() -> depthforge::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/awareness"), PathBuf::from);
    let cfg = RunConfig {
        backbone: BackboneConfig {
            image_side: 32,
            feature_dim: 32,
            ..Default::default()
        },
        train: TrainConfig {
            total_steps: 200,
            ..Default::default()
        },
        train_data: DatasetSpec {
            scene: SceneSpec {
                image_side: 32,
                ..Default::default()
            },
            num_samples: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = generate_samples(&cfg.train_data)?;
    let model = run::train(&cfg, &data, &TrainOutputs::default())?.model;
    let inputs = model.frozen_inputs(&data[0].visual, &data[0].depth_input)?;
    std::fs::create_dir_all(&out).map_err(|e| depthforge::Error::io(&out, e))?;
    for map in model.awareness_maps(&inputs)? {
        let stem = format!("layer{}", map.layer);
        map.export(&out, &stem)?;
        let (n, m) = map.combined.dims2()?;
        let mass: Vec<String> = (0..m)
            .map(|j| format!("{:.2}", (0..n).map(|i| map.combined.row(i)[j]).sum::<f64>() / n as f64))
            .collect();
        println!("layer {}  λ {:.3}  mean weight per token [{}]", map.layer, map.lambda, mass.join(" "));
    }
    println!("maps written to {}", out.display());
    Ok(())
}
