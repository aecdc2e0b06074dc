//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use depthforge::backbone::BackboneConfig;
use depthforge::decoder::DecoderConfig;
use depthforge::fusion::{compute_awareness, forward_adapted, FrozenInputs};
use depthforge::numerics::{ParamStore, Tape, Tensor};
use depthforge::run::{self, pixel_accuracy, prepare_samples, RunConfig, TrainOutputs};
use depthforge::synthbench::{evaluate_miou, generate_samples, DatasetSpec, DomainSpec, SceneSpec};
use depthforge::training::{batch_indices, lr_at_step, Checkpoint, Sample, TrainConfig, Trainer};
use depthforge::{Model, ModelConfig, Variant, VariantConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn a1_gradient_check() -> Outcome {
    let cfg = RunConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            feature_dim: 16,
            num_heads: 2,
            patch_size: 2,
            image_side: 4,
            input_channels: 3,
            seed: 11,
        },
        variant: VariantConfig {
            variant: Variant::DepthForge,
            num_tokens: 4,
            ..Default::default()
        },
        decoder: DecoderConfig {
            num_classes: 3,
            head_heads: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let report = run::cmd_gradcheck(&cfg).expect("gradient check runs");
    let elapsed = start.elapsed();
    let groups: Vec<String> = report.by_group().iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    outcome(
        report.max_rel_error <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max rel error {:.2e} (≤ 1e-4) in {:.1}s (< 60s); groups: {}",
            report.max_rel_error,
            elapsed.as_secs_f64(),
            groups.join(", ")
        ),
    )
}

fn small_run_config(variant: Variant) -> RunConfig {
    let image_side = 16;
    RunConfig {
        backbone: BackboneConfig {
            num_layers: 2,
            feature_dim: 16,
            num_heads: 2,
            patch_size: 4,
            image_side,
            input_channels: 3,
            seed: 5,
        },
        variant: VariantConfig {
            variant,
            num_tokens: 4,
            ..Default::default()
        },
        decoder: DecoderConfig {
            num_classes: 4,
            head_heads: 2,
            ..Default::default()
        },
        train: TrainConfig {
            total_steps: 100,
            batch_size: 2,
            lr_max: 1e-3,
            ..Default::default()
        },
        train_data: DatasetSpec {
            scene: SceneSpec {
                num_classes: 4,
                image_side,
                ..Default::default()
            },
            num_samples: 8,
            ..Default::default()
        },
        eval_data: Vec::new(),
        ..Default::default()
    }
}

fn a2_frozen_contract() -> Outcome {
    let cfg = small_run_config(Variant::DepthForge);
    let data = generate_samples(&cfg.train_data).unwrap();
    let initial = Model::new(&cfg.model_config()).unwrap();
    let trained = run::train(&cfg, &data, &TrainOutputs::default()).unwrap().model;
    let sha = |m: &Model, p: &str| m.store.sha256_of(&[p]);
    let backbone_same = initial.backbone_checksum() == trained.backbone_checksum();
    let moved: Vec<bool> = ["fusion.layer0.tokens", "fusion.", "decoder."]
        .iter()
        .map(|p| sha(&initial, p) != sha(&trained, p))
        .collect();
    outcome(
        backbone_same && moved.iter().all(|&m| m),
        format!(
            "backbone sha256 unchanged after 100 steps: {backbone_same}; tokens/fusion/decoder payloads changed: {moved:?}"
        ),
    )
}

fn desk_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant: VariantConfig {
            variant,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn sample_inputs(model: &Model, seed: u64) -> FrozenInputs {
    let side = model.config.backbone.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::randn(&[side, side, 3], 0.5, &mut rng);
    let depth = Tensor::randn(&[side, side, 1], 0.5, &mut rng);
    model.frozen_inputs(&image, &depth).unwrap()
}

fn adapted(model: &Model, inputs: &FrozenInputs) -> Vec<Tensor> {
    let mut tape = Tape::new(&model.store);
    let out = forward_adapted(&mut tape, &model.visual, &model.fusion, inputs).unwrap();
    out.layers.iter().map(|&v| tape.value(v).clone()).collect()
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn a3_reductions() -> Outcome {
    let frozen = Model::new(&desk_model(Variant::Frozen)).unwrap();
    let inputs = sample_inputs(&frozen, 3);
    let frozen_out = adapted(&frozen, &inputs);

    let mut df = Model::new(&desk_model(Variant::DepthForge)).unwrap();
    df.store.jitter_zero_trainables(1, 0.3);
    df.fusion.params().unwrap().outer.silence(&mut df.store);
    let a = max_diff(&adapted(&df, &inputs), &frozen_out);

    let mut df = Model::new(&desk_model(Variant::DepthForge)).unwrap();
    df.store.jitter_zero_trainables(2, 0.3);
    let lambda = df.fusion.params().unwrap().lambda[0];
    df.store.tensor_mut(lambda).data_mut()[0] = 0.0;
    df.fusion.params().unwrap().branch_depth.clone().unwrap().silence(&mut df.store);
    let mut rein = Model::new(&desk_model(Variant::Rein)).unwrap();
    let names: Vec<(depthforge::numerics::ParamId, String)> =
        rein.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in names {
        let src = df.store.id(&name).expect("rein parameters exist in depthforge");
        *rein.store.tensor_mut(id) = df.store.tensor(src).clone();
    }
    let b = max_diff(&adapted(&df, &inputs), &adapted(&rein, &inputs));
    let moved = max_diff(&adapted(&rein, &inputs), &frozen_out);

    let ld = Model::new(&desk_model(Variant::LinearDelta)).unwrap();
    let c = max_diff(&adapted(&ld, &inputs), &frozen_out);
    outcome(
        a == 0.0 && b <= 1e-9 && moved > 0.0 && c == 0.0,
        format!("(a) ε zeroed vs frozen {a:e}; (b) λ=0 vs rein {b:.2e} (adapter moves features by {moved:.2e}); (c) ΔW=0 vs frozen {c:e}"),
    )
}

fn a4_awareness_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_single, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..32);
        let m = rng.gen_range(1..16);
        let c = rng.gen_range(1..24);
        let spread = 10f64.powf(rng.gen_range(-1.0..1.5));
        let lambda = rng.gen_range(0.0..4.0);
        let mut store = ParamStore::new();
        let l = store.add("lambda", Tensor::scalar(lambda), true).unwrap();
        let mut tape = Tape::new(&store);
        let qv = tape.input(Tensor::randn(&[n, c], spread, &mut rng));
        let tv = tape.input(Tensor::randn(&[m, c], spread, &mut rng));
        let qd = tape.input(Tensor::randn(&[n, c], spread, &mut rng));
        let td = tape.input(Tensor::randn(&[m, c], spread, &mut rng));
        let lv = tape.param(l);
        let aw = compute_awareness(&mut tape, qv, tv, Some((qd, td, lv))).unwrap();
        for r in 0..n {
            for v in [aw.visual, aw.depth.unwrap()] {
                worst_single = worst_single.max((tape.value(v).row(r).iter().sum::<f64>() - 1.0).abs());
            }
            let s: f64 = tape.value(aw.combined).row(r).iter().sum();
            worst_sum = worst_sum.max((s - 1.0 - lambda).abs());
        }
    }
    outcome(
        worst_single <= 1e-9 && worst_sum <= 1e-9,
        format!("1000 inputs: softmax rows |Σ−1| ≤ {worst_single:.1e}; A rows |Σ−(1+λ)| ≤ {worst_sum:.1e}"),
    )
}

fn a5_overfit() -> Outcome {
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
    let data = generate_samples(&cfg.train_data).unwrap();
    let mut model = Model::new(&cfg.model_config()).unwrap();
    let samples = prepare_samples(&model, &data).unwrap();
    let mut trainer = Trainer::new(cfg.train_config(), &model).unwrap();
    let mut reached = None;
    let mut last = 0.0;
    while !trainer.is_done() {
        let idx = batch_indices(trainer.config.seed, trainer.step(), trainer.config.batch_size, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        trainer.train_step(&mut model, &batch).unwrap();
        if trainer.step() % 100 == 0 {
            last = pixel_accuracy(&model, &samples).unwrap();
            if last >= 0.95 {
                reached = Some(trainer.step());
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    let c = model.config.backbone.feature_dim;
    outcome(
        reached.is_some() && elapsed < Duration::from_secs(600),
        format!(
            "N=4 c={c} m=8 K=6, 32 samples: pixel accuracy {last:.4} (≥ 0.95) at step {} of 2000 in {:.0}s (< 600s)",
            reached.map_or("-".to_string(), |s| s.to_string()),
            elapsed.as_secs_f64()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Reduced-width backbone for the multi-seed experiment: 32 px images,
/// 8 × 8 patches, c = 32.
pub fn a6_config(variant: Variant, seed: u64) -> RunConfig {
    let image_side = 32;
    let scene = SceneSpec {
        image_side,
        ..Default::default()
    };
    RunConfig {
        backbone: BackboneConfig {
            image_side,
            feature_dim: 32,
            ..Default::default()
        },
        variant: VariantConfig {
            variant,
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
        eval_data: vec![DatasetSpec {
            scene,
            domain: DomainSpec::blackout(),
            num_samples: 64,
            scene_seed: 1000,
            noise_seed: 2000,
        }],
        seed,
        ..Default::default()
    }
}

fn a6_depth_advantage() -> Outcome {
    let start = Instant::now();
    let base = a6_config(Variant::Rein, 0);
    let train_data = generate_samples(&base.train_data).unwrap();
    let eval_data = generate_samples(&base.eval_data[0]).unwrap();
    let truths: Vec<&[u8]> = eval_data.iter().map(|d| d.labels.as_slice()).collect();
    let chance = evaluate_miou(&truths, &truths, base.decoder.num_classes).unwrap().chance_miou;
    let (mut rein, mut df) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        for (variant, out) in [(Variant::Rein, &mut rein), (Variant::DepthForge, &mut df)] {
            let cfg = a6_config(variant, seed);
            let model = run::train(&cfg, &train_data, &TrainOutputs::default()).unwrap().model;
            let report = run::evaluate(&model, &eval_data).unwrap();
            out.push(report.miou);
        }
    }
    let elapsed = start.elapsed();
    let (mr, md) = (median(rein.clone()), median(df.clone()));
    let paired = rein.iter().zip(&df).all(|(r, d)| d > r);
    let pass = mr <= chance + 0.05 && md >= chance + 0.15 && paired && elapsed < Duration::from_secs(45 * 60);
    outcome(
        pass,
        format!(
            "blackout mIoU chance {chance:.4}; rein median {mr:.4} (≤ {:.4}); depthforge median {md:.4} (≥ {:.4}); \
             depthforge > rein on every seed: {paired}; per seed rein {rein:.3?} depthforge {df:.3?}; {:.0}s (≤ 2700s)",
            chance + 0.05,
            chance + 0.15,
            elapsed.as_secs_f64()
        ),
    )
}

fn a7_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let warm = (cfg.warmup_fraction * cfg.total_steps as f64) as usize;
    let start = lr_at_step(0, &cfg).unwrap();
    let peak = lr_at_step(warm, &cfg).unwrap();
    let end = lr_at_step(cfg.total_steps, &cfg).unwrap();
    let fine = TrainConfig {
        total_steps: 10_000_000,
        ..Default::default()
    };
    let w = 1_000_000;
    let left = lr_at_step(w - 1, &fine).unwrap();
    let right = lr_at_step(w + 1, &fine).unwrap();
    let pass = (start - 1e-5).abs() < 1e-15
        && (peak - 1e-4).abs() < 1e-15
        && (end - 1e-6).abs() <= 1e-12
        && (left - 1e-4).abs() <= 1e-12
        && (right - 1e-4).abs() <= 1e-12;
    outcome(
        pass,
        format!("lr(0) {start:e}, lr(warmup end) {peak:e}, lr(final) {end:e}, boundary neighbours {left:e} / {right:e}"),
    )
}

fn a8_miou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..100 {
        let p: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let t: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let got = evaluate_miou(&[&p], &[&t], 3).unwrap().miou;
        let mut ious = Vec::new();
        for c in 0..3u8 {
            let inter = p.iter().zip(&t).filter(|(&a, &b)| a == c && b == c).count();
            let union = p.iter().zip(&t).filter(|(&a, &b)| a == c || b == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expected = ious.iter().sum::<f64>() / ious.len() as f64;
        mismatches += usize::from(got != expected);
    }
    outcome(mismatches == 0, format!("100 random 8×8 K=3 grids, exact mismatches: {mismatches}"))
}

/// Trainable-parameter count derived from the architecture description.
fn shape_walk(cfg: &ModelConfig) -> usize {
    let c = cfg.backbone.feature_dim;
    let n = cfg.backbone.num_layers;
    let m = cfg.variant.num_tokens;
    let k = cfg.decoder.num_classes;
    let h = cfg.decoder.hidden_dim.unwrap_or(c);
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * c;
    let block = 2 * norm + linear(c, 3 * c) + linear(c, c) + linear(c, 4 * c) + linear(4 * c, c);
    let decoder = n * (linear(c, h) + linear(h, c))
        + linear(n * c, c)
        + cfg.decoder.head_layers * block
        + norm
        + linear(c, k);
    let mlp = 2 * linear(c, c);
    let tokens = n * m * c + c * c + n * linear(c, c) + mlp + mlp + mlp;
    let fusion = match cfg.variant.variant {
        Variant::Frozen => 0,
        Variant::LinearDelta => n * c * c,
        Variant::Rein | Variant::Config1AddDepth => tokens,
        Variant::Config2TokenDepth => tokens + n * c * c,
        Variant::DepthForge => tokens + c * c + mlp + if cfg.variant.per_layer_lambda { n } else { 1 },
        Variant::DepthForgeNoScale => tokens + c * c + mlp,
    };
    decoder + fusion
}

fn a9_param_accounting() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in Variant::ALL {
        let cfg = desk_model(variant);
        let model = Model::new(&cfg).unwrap();
        let got = model.count_trainable_params();
        let expected = shape_walk(&cfg);
        pass &= got == expected;
        lines.push(format!("{variant} {got}/{expected}"));
    }
    let frozen = Model::new(&desk_model(Variant::Frozen)).unwrap();
    let backbone_trainable = frozen
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("visual.") || p.name.starts_with("depth."))
        .any(|(_, p)| p.trainable);
    pass &= !backbone_trainable;
    outcome(
        pass,
        format!("counted/oracle: {}; any backbone parameter trainable: {backbone_trainable}", lines.join(", ")),
    )
}

fn a10_resume() -> Outcome {
    let mut cfg = small_run_config(Variant::DepthForge);
    cfg.train.total_steps = 30;
    let data = generate_samples(&cfg.train_data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");

    let mut model = Model::new(&cfg.model_config()).unwrap();
    let samples = prepare_samples(&model, &data).unwrap();
    let mut trainer = Trainer::new(cfg.train_config(), &model).unwrap();
    let resume_at = 15;
    let full = trainer
        .run(&mut model, &samples, |s, m, t| {
            if s.step + 1 == resume_at {
                depthforge::training::save_checkpoint(&path, m, Some(t))?;
            }
            Ok(())
        })
        .unwrap();

    let ckpt = depthforge::training::load_checkpoint(&path).unwrap();
    let mut resumed = ckpt.to_model().unwrap();
    let state = ckpt.optim_state(&resumed).unwrap().unwrap();
    let mut trainer = Trainer::with_state(cfg.train_config(), &resumed, state).unwrap();
    let mut tail = Vec::new();
    while tail.len() < 10 {
        let idx = batch_indices(trainer.config.seed, trainer.step(), trainer.config.batch_size, samples.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        tail.push(trainer.train_step(&mut resumed, &batch).unwrap());
    }
    let worst = full[resume_at..resume_at + 10]
        .iter()
        .zip(&tail)
        .map(|(a, b)| (a.loss - b.loss).abs())
        .fold(0.0, f64::max);
    let bytes = std::fs::read(&path).unwrap();
    let reencoded = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    outcome(
        worst <= 1e-6 && reencoded == bytes,
        format!("max |Δloss| over 10 post-resume steps {worst:.2e} (≤ 1e-6); byte-identical re-save: {}", reencoded == bytes),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("A1", "gradient correctness", a1_gradient_check),
        ("A2", "frozen contract", a2_frozen_contract),
        ("A3", "reduction identities", a3_reductions),
        ("A4", "awareness normalization", a4_awareness_normalization),
        ("A5", "overfit sanity", a5_overfit),
        ("A6", "depth advantage under blackout", a6_depth_advantage),
        ("A7", "schedule values", a7_schedule),
        ("A8", "mIoU oracle", a8_miou_oracle),
        ("A9", "trainable-parameter accounting", a9_param_accounting),
        ("A10", "checkpoint round trip", a10_resume),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!("{id} {} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
