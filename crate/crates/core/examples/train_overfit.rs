//! Trains the desk-scale depthforge model on 32 fixed scenes and stops once
//! it labels at least 95% of their pixels correctly.
//!
//! cargo run --release --example train_overfit

use std::time::Instant;

use depthforge::run::{pixel_accuracy, prepare_samples, RunConfig};
use depthforge::synthbench::{generate_samples, DatasetSpec};
use depthforge::training::{batch_indices, Sample, TrainConfig, Trainer};
use depthforge::{Model, Variant, VariantConfig};

fn main() -> depthforge::Result<()> {
    let cfg = RunConfig {
        variant: VariantConfig {
            variant: Variant::DepthForge,
            num_tokens: 8,
            ..Default::default()
        },
        train: TrainConfig {
            total_steps: 2000,
            batch_size: 4,
            ..Default::default()
        },
        train_data: DatasetSpec {
            num_samples: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let data = generate_samples(&cfg.train_data)?;
    let mut model = Model::new(&cfg.model_config())?;
    println!("trainable parameters: {}", model.count_trainable_params());
    let samples = prepare_samples(&model, &data)?;
    let mut trainer = Trainer::new(cfg.train_config(), &model)?;
    while !trainer.is_done() {
        let idx = batch_indices(trainer.config.seed, trainer.step(), trainer.config.batch_size, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let stats = trainer.train_step(&mut model, &batch)?;
        if trainer.step() % 50 == 0 {
            let acc = pixel_accuracy(&model, &samples)?;
            println!(
                "step {:>4}  lr {:.2e}  loss {:.4}  pixel acc {acc:.4}  {:.0}s",
                trainer.step(),
                stats.lr,
                stats.loss,
                start.elapsed().as_secs_f64()
            );
            if acc >= 0.95 {
                break;
            }
        }
    }
    Ok(())
}
