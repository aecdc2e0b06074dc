//! Procedural RGB-D segmentation scenes, domain shifts that degrade the
//! visual channels while leaving geometry intact, and an mIoU evaluator.

mod domain;
mod eval;
mod io;
mod scene;

pub use domain::{apply_domain, DomainSample, DomainSpec, MIN_DEPTH};
pub use eval::{chance_miou, evaluate_miou, Confusion, EvalReport};
pub use io::{
    decode_pfm, decode_pgm, encode_pfm, encode_pgm, generate_samples, read_dataset, write_dataset, DatasetSpec,
};
pub use scene::{
    class_color, class_depth, derive_seed, generate_scene, generate_scene_with, ground_depth, Scene, SceneSpec,
    GROUND_FAR, GROUND_NEAR,
};

#[cfg(test)]
mod tests;
