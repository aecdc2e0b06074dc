//! Config-driven runs: dataset generation, training, evaluation, gradient
//! checks and variant sweeps, each a pure function of a [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{Variant, VariantConfig};
use crate::model::{Model, ModelConfig};
use crate::numerics::{finite_diff_check, GradCheckReport, Tape};
use crate::synthbench::{
    derive_seed, evaluate_miou, generate_samples, generate_scene_with, apply_domain, read_dataset, write_dataset,
    Confusion, DatasetSpec, DomainSample, DomainSpec, EvalReport, SceneSpec,
};
use crate::training::{load_checkpoint, save_checkpoint, segmentation_loss, CsvLog, Sample, StepStats, TrainConfig, Trainer};

/// Largest `patches × channels` product accepted by the gradient check.
pub const GRADCHECK_MAX_SIZE: usize = 4096;
/// Relative-error threshold of the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-6;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub variant: VariantConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub train_data: DatasetSpec,
    pub eval_data: Vec<DatasetSpec>,
    pub output_dir: PathBuf,
    /// Drives adapter/decoder initialization and the data order. The frozen
    /// backbones keep `backbone.seed`.
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Variants trained by the sweep command.
    pub sweep: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval_data = ["identity", "night", "fog", "noise", "blackout"]
            .iter()
            .map(|name| DatasetSpec {
                domain: DomainSpec::preset(name).expect("built-in preset"),
                num_samples: 16,
                scene_seed: 1000,
                noise_seed: 2000,
                ..Default::default()
            })
            .collect();
        Self {
            backbone: BackboneConfig::default(),
            variant: VariantConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            train_data: DatasetSpec::default(),
            eval_data,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            checkpoint_every: 0,
            sweep: Variant::ALL.to_vec(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub variant: Option<Variant>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(steps) = o.steps {
            self.train.total_steps = steps;
        }
        if let Some(v) = o.variant {
            self.variant.variant = v;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        for d in std::iter::once(&self.train_data).chain(&self.eval_data) {
            d.scene.validate()?;
            d.domain.validate()?;
            if d.scene.image_side != self.backbone.image_side || d.scene.num_classes != self.decoder.num_classes {
                return Err(Error::Config(format!(
                    "dataset {:?} renders {}px scenes with {} classes; the model expects {}px and {} classes",
                    d.domain.name, d.scene.image_side, d.scene.num_classes, self.backbone.image_side, self.decoder.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Model configuration with the run seed folded into the trainable inits.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            variant: VariantConfig {
                init_seed: derive_seed(self.seed, 1),
                ..self.variant.clone()
            },
            decoder: DecoderConfig {
                init_seed: derive_seed(self.seed, 2),
                ..self.decoder.clone()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 3),
            ..self.train.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn dataset_dir(&self, spec: &DatasetSpec, train: bool) -> PathBuf {
        if train {
            self.data_dir().join("train")
        } else {
            self.data_dir().join(format!("eval-{}", spec.domain.name))
        }
    }
}

/// Resolved configuration written next to every run's outputs.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    model: ModelConfig,
    train: TrainConfig,
    trainable_params: usize,
    backbone_sha256: String,
}

/// Caches the frozen computations of every sample.
pub fn prepare_samples(model: &Model, data: &[DomainSample]) -> Result<Vec<Sample>> {
    data.par_iter()
        .map(|d| Sample::new(model, &d.visual, &d.depth_input, d.labels.clone()))
        .collect()
}

/// Arg-max label maps for every sample.
pub fn predict_labels(model: &Model, data: &[DomainSample]) -> Result<Vec<Vec<u8>>> {
    data.par_iter()
        .map(|d| Ok(model.predict(&model.frozen_inputs(&d.visual, &d.depth_input)?)?.labels()))
        .collect()
}

pub fn evaluate(model: &Model, data: &[DomainSample]) -> Result<EvalReport> {
    let preds = predict_labels(model, data)?;
    let truths: Vec<&[u8]> = data.iter().map(|d| d.labels.as_slice()).collect();
    evaluate_miou(&preds, &truths, model.num_classes())
}

/// Pixel accuracy of cached samples.
pub fn pixel_accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut conf = Confusion::new(model.num_classes());
    for s in samples {
        conf.add(&model.predict(&s.inputs)?.labels(), &s.labels)?;
    }
    Ok(conf.report()?.pixel_accuracy)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepStats>,
}

/// Where a training run writes its artifacts; `None` trains in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains a freshly initialized model of `cfg` on `data`.
pub fn train(cfg: &RunConfig, data: &[DomainSample], outputs: &TrainOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(&cfg.model_config())?;
    let samples = prepare_samples(&model, data)?;
    let mut trainer = Trainer::new(cfg.train_config(), &model)?;
    let mut log = outputs.log.as_deref().map(CsvLog::create).transpose()?;
    let every = cfg.checkpoint_every;
    let history = trainer.run(&mut model, &samples, |stats, model, trainer| {
        if let Some(log) = log.as_mut() {
            log.record(stats)?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if every > 0 && trainer.step() % every == 0 && !trainer.is_done() {
                save_checkpoint(&dir.join(format!("step_{:06}.ckpt", trainer.step())), model, Some(trainer))?;
            }
        }
        Ok(())
    })?;
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), &model, Some(&trainer))?;
    }
    Ok(TrainOutcome { model, history })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the training dataset and every evaluation dataset; returns
/// `(directory, sample count)` pairs.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<(PathBuf, usize)>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for (spec, is_train) in std::iter::once((&cfg.train_data, true)).chain(cfg.eval_data.iter().map(|d| (d, false))) {
        let dir = cfg.dataset_dir(spec, is_train);
        let samples = generate_samples(spec)?;
        write_dataset(&dir, spec, &samples)?;
        written.push((dir, samples.len()));
    }
    Ok(written)
}

fn load_or_generate(cfg: &RunConfig, spec: &DatasetSpec, is_train: bool) -> Result<Vec<DomainSample>> {
    let dir = cfg.dataset_dir(spec, is_train);
    if dir.join("dataset.json").exists() {
        let (on_disk, samples) = read_dataset(&dir)?;
        if &on_disk != spec {
            return Err(Error::Config(format!(
                "{} was generated from a different dataset spec; regenerate it",
                dir.display()
            )));
        }
        Ok(samples)
    } else {
        Err(Error::io(
            dir.join("dataset.json"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset missing; run the generate command first"),
        ))
    }
}

/// Trains on the generated training set and writes `checkpoints/final.ckpt`,
/// `train_log.csv` and `run_manifest.json`. Returns the final checkpoint path.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = load_or_generate(cfg, &cfg.train_data, true)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let outputs = TrainOutputs {
        log: Some(cfg.output_dir.join("train_log.csv")),
        checkpoint_dir: Some(ckpt_dir.clone()),
    };
    let outcome = train(cfg, &data, &outputs)?;
    let manifest = RunManifest {
        config: cfg,
        model: cfg.model_config(),
        train: cfg.train_config(),
        trainable_params: outcome.model.count_trainable_params(),
        backbone_sha256: outcome.model.backbone_checksum(),
    };
    write_text(&cfg.output_dir.join("run_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(ckpt_dir.join("final.ckpt"))
}

/// Evaluates a checkpoint on a dataset directory and writes
/// `<out>/<domain>.json` and `<out>/<domain>.csv`.
pub fn cmd_eval(checkpoint: &Path, dataset_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let (spec, data) = read_dataset(dataset_dir)?;
    if spec.scene.image_side != model.config.backbone.image_side || spec.scene.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset {} ({}px, {} classes) does not match the checkpoint ({}px, {} classes)",
            dataset_dir.display(),
            spec.scene.image_side,
            spec.scene.num_classes,
            model.config.backbone.image_side,
            model.num_classes()
        )));
    }
    let report = evaluate(&model, &data)?;
    create_dir(out_dir)?;
    let stem = &spec.domain.name;
    write_text(&out_dir.join(format!("{stem}.json")), &report.to_json()?)?;
    write_text(&out_dir.join(format!("{stem}.csv")), &report.to_csv())?;
    Ok(report)
}

/// Central-difference check of every trainable gradient of the full model
/// on one synthetic sample.
///
/// Zero-initialized output layers are replaced by small noise first, so the
/// check exercises every path instead of comparing zeros.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.backbone.validate()?;
    let size = cfg.backbone.num_patches() * cfg.backbone.feature_dim;
    if size > GRADCHECK_MAX_SIZE {
        return Err(Error::Config(format!(
            "gradient check needs patches × channels ≤ {GRADCHECK_MAX_SIZE}, config gives {size}"
        )));
    }
    let mut model = Model::new(&cfg.model_config())?;
    model.store.jitter_zero_trainables(derive_seed(cfg.seed, 4), 0.1);
    let scene_spec = SceneSpec {
        num_classes: cfg.decoder.num_classes,
        image_side: cfg.backbone.image_side,
        cell_size: 1,
        min_visible_cells: 1,
        ..Default::default()
    };
    let scene = generate_scene_with(derive_seed(cfg.seed, 5), &scene_spec)?;
    let sample = apply_domain(&scene, &DomainSpec::identity(), 0)?;
    let inputs = model.frozen_inputs(&sample.visual, &sample.depth_input)?;
    let (grid, patch) = (cfg.backbone.grid_side(), cfg.backbone.patch_size);
    let Model {
        store,
        visual,
        fusion,
        decoder,
        ..
    } = &mut model;
    let (visual, fusion, decoder) = (&*visual, &*fusion, &*decoder);
    finite_diff_check(store, GRADCHECK_EPS, |tape: &mut Tape<'_>| {
        let adapted = crate::fusion::forward_adapted(tape, visual, fusion, &inputs)?;
        let logits = decoder.forward(tape, &adapted.layers)?;
        segmentation_loss(tape, logits, &sample.labels, grid, patch)
    })
}

/// One sweep result row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub domain: String,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub chance_miou: Option<f64>,
    pub trainable_params: Option<usize>,
    pub status: String,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut s = String::from("variant,domain,miou,pixel_accuracy,chance_miou,trainable_params,status\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant,
            r.domain,
            fmt(r.miou),
            fmt(r.pixel_accuracy),
            fmt(r.chance_miou),
            r.trainable_params.map_or(String::new(), |p| p.to_string()),
            r.status
        ));
    }
    s
}

/// Trains every variant of the sweep list with shared seeds and data and
/// evaluates each on all evaluation domains. A failing member yields rows
/// marked `failed: ...` and the sweep continues.
pub fn sweep(cfg: &RunConfig, train_data: &[DomainSample], eval_sets: &[(String, Vec<DomainSample>)]) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &variant in &cfg.sweep {
        let mut member = cfg.clone();
        member.variant.variant = variant;
        let result = train(&member, train_data, &TrainOutputs::default()).and_then(|out| {
            eval_sets
                .iter()
                .map(|(name, data)| Ok((name.clone(), evaluate(&out.model, data)?)))
                .collect::<Result<Vec<_>>>()
                .map(|reports| (out.model.count_trainable_params(), reports))
        });
        match result {
            Ok((params, reports)) => rows.extend(reports.into_iter().map(|(domain, r)| AblationRow {
                variant,
                domain,
                miou: Some(r.miou),
                pixel_accuracy: Some(r.pixel_accuracy),
                chance_miou: Some(r.chance_miou),
                trainable_params: Some(params),
                status: "ok".into(),
            })),
            Err(e) => rows.extend(eval_sets.iter().map(|(domain, _)| AblationRow {
                variant,
                domain: domain.clone(),
                miou: None,
                pixel_accuracy: None,
                chance_miou: None,
                trainable_params: None,
                status: format!("failed: {}", e.to_string().replace(',', ";")),
            })),
        }
    }
    rows
}

/// Runs [`sweep`] on the generated datasets and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep list is empty".into()));
    }
    let train_data = load_or_generate(cfg, &cfg.train_data, true)?;
    let eval_sets = cfg
        .eval_data
        .iter()
        .map(|d| Ok((d.domain.name.clone(), load_or_generate(cfg, d, false)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep(cfg, &train_data, &eval_sets);
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Process exit status for an error: 2 configuration, 3 numeric, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } | Error::Json(_) => 2,
        Error::NonFinite(_) | Error::Numeric(_) | Error::TapeConsumed => 3,
        Error::Io { .. } | Error::Checkpoint(_) | Error::Format(_) => 4,
    }
}
