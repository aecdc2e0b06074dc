use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::domain::{apply_domain, DomainSample, DomainSpec};
use super::scene::{derive_seed, generate_scene_with, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A seed-indexed collection of scenes rendered under one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub domain: DomainSpec,
    pub num_samples: usize,
    /// Fixes the layouts; datasets sharing it share labels.
    pub scene_seed: u64,
    /// Fixes the domain noise.
    pub noise_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            domain: DomainSpec::identity(),
            num_samples: 32,
            scene_seed: 0,
            noise_seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn scene_seed_of(&self, index: usize) -> u64 {
        derive_seed(self.scene_seed, index as u64)
    }

    pub fn noise_seed_of(&self, index: usize) -> u64 {
        derive_seed(self.noise_seed, index as u64)
    }
}

/// Renders every sample; pure in the spec and parallel over samples.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<DomainSample>> {
    spec.scene.validate()?;
    spec.domain.validate()?;
    (0..spec.num_samples)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene_with(spec.scene_seed_of(i), &spec.scene)?;
            apply_domain(&scene, &spec.domain, spec.noise_seed_of(i))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    num_classes: usize,
    image_side: usize,
    spec: DatasetSpec,
    scene_seeds: Vec<u64>,
    noise_seeds: Vec<u64>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `samples/NNNN.{visual,depth}.pfm`, `samples/NNNN.labels.pgm` and
/// `dataset.json` under `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, samples: &[DomainSample]) -> Result<()> {
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let side = spec.scene.image_side;
    for (i, s) in samples.iter().enumerate() {
        write(&sample_dir.join(format!("{i:04}.visual.pfm")), &encode_pfm(&s.visual, side, 3)?)?;
        write(&sample_dir.join(format!("{i:04}.depth.pfm")), &encode_pfm(&s.depth_input, side, 1)?)?;
        write(&sample_dir.join(format!("{i:04}.labels.pgm")), &encode_pgm(&s.labels, side)?)?;
    }
    let manifest = DatasetManifest {
        num_classes: spec.scene.num_classes,
        image_side: side,
        spec: spec.clone(),
        scene_seeds: (0..samples.len()).map(|i| spec.scene_seed_of(i)).collect(),
        noise_seeds: (0..samples.len()).map(|i| spec.noise_seed_of(i)).collect(),
    };
    write(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<DomainSample>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&read(&dir.join("dataset.json"))?)?;
    let side = manifest.image_side;
    let n = manifest.scene_seeds.len();
    let sample_dir = dir.join("samples");
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let visual = decode_pfm(&read(&sample_dir.join(format!("{i:04}.visual.pfm")))?, side, 3)?;
        let depth_input = decode_pfm(&read(&sample_dir.join(format!("{i:04}.depth.pfm")))?, side, 1)?;
        let labels = decode_pgm(&read(&sample_dir.join(format!("{i:04}.labels.pgm")))?, side)?;
        samples.push(DomainSample {
            visual,
            depth_input,
            labels,
            domain: manifest.spec.domain.name.clone(),
        });
    }
    Ok((manifest.spec, samples))
}

/// Portable float map, little-endian, scanlines stored bottom to top.
pub fn encode_pfm(image: &Tensor, side: usize, channels: usize) -> Result<Vec<u8>> {
    if image.len() != side * side * channels || !(channels == 1 || channels == 3) {
        return Err(Error::shape("pfm image", [side, side, channels], image.shape()));
    }
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{side} {side}\n-1.0\n").into_bytes();
    let row = side * channels;
    for y in (0..side).rev() {
        for &v in &image.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn split_header(bytes: &[u8], lines: usize) -> Result<(Vec<String>, &[u8])> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < lines {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("image header ends early".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| Error::Format("header is not text".into()))?;
        fields.push(line.trim().to_owned());
        pos += end + 1;
    }
    Ok((fields, &bytes[pos..]))
}

fn check_dims(field: &str, side: usize) -> Result<()> {
    let dims: Vec<usize> = field.split_whitespace().filter_map(|d| d.parse().ok()).collect();
    if dims != [side, side] {
        return Err(Error::Format(format!("expected a {side}×{side} image, header says {field:?}")));
    }
    Ok(())
}

pub fn decode_pfm(bytes: &[u8], side: usize, channels: usize) -> Result<Tensor> {
    let (header, body) = split_header(bytes, 3)?;
    let expected_tag = if channels == 3 { "PF" } else { "Pf" };
    if header[0] != expected_tag {
        return Err(Error::Format(format!("expected {expected_tag} map, found {:?}", header[0])));
    }
    check_dims(&header[1], side)?;
    let scale: f64 = header[2].parse().map_err(|_| Error::Format("bad pfm scale".into()))?;
    if body.len() != side * side * channels * 4 {
        return Err(Error::Format(format!(
            "pfm body holds {} bytes, expected {}",
            body.len(),
            side * side * channels * 4
        )));
    }
    let read = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let row = side * channels;
    let mut data = vec![0.0; side * side * channels];
    for (file_row, chunk) in body.chunks_exact(row * 4).enumerate() {
        let y = side - 1 - file_row;
        for (x, c) in chunk.chunks_exact(4).enumerate() {
            data[y * row + x] = read(c) as f64;
        }
    }
    Tensor::new(&[side, side, channels], data)
}

pub fn encode_pgm(labels: &[u8], side: usize) -> Result<Vec<u8>> {
    if labels.len() != side * side {
        return Err(Error::shape("pgm labels", side * side, labels.len()));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8], side: usize) -> Result<Vec<u8>> {
    let (header, body) = split_header(bytes, 3)?;
    if header[0] != "P5" || header[2] != "255" {
        return Err(Error::Format("expected an 8-bit binary graymap".into()));
    }
    check_dims(&header[1], side)?;
    if body.len() != side * side {
        return Err(Error::Format(format!("pgm body holds {} bytes, expected {}", body.len(), side * side)));
    }
    Ok(body.to_vec())
}
