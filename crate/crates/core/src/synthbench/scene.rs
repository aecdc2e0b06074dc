use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth of the ground plane at the bottom and top image rows.
pub const GROUND_NEAR: f64 = 0.2;
pub const GROUND_FAR: f64 = 1.0;

/// Half-width of each class's depth band.
const BAND_HALF_WIDTH: f64 = 0.02;
const PLACEMENT_RETRIES: usize = 32;
const MAX_REGENERATIONS: usize = 64;

/// Scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub image_side: usize,
    /// Primitives are rasterized on a grid of `cell_size`-pixel cells.
    pub cell_size: usize,
    /// Amplitude of the per-pixel albedo texture around each class color.
    pub texture: f64,
    /// Minimum number of visible cells each primitive must keep.
    pub min_visible_cells: usize,
    /// Deal the primitive palettes to classes in a per-scene random order.
    /// Off, every class always wears the same palette and color alone
    /// identifies it.
    pub shuffle_palettes: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            image_side: 64,
            cell_size: 4,
            texture: 0.08,
            min_visible_cells: 2,
            shuffle_palettes: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes must lie in [2, 255], got {}", self.num_classes)));
        }
        if self.cell_size == 0 || self.image_side == 0 || self.image_side % self.cell_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} must be a positive multiple of cell_size {}",
                self.image_side, self.cell_size
            )));
        }
        let cells = self.grid_side() * self.grid_side();
        if cells < self.num_classes * self.min_visible_cells.max(1) {
            return Err(Error::Config(format!(
                "a {0}×{0} cell grid cannot hold {1} classes",
                self.grid_side(),
                self.num_classes
            )));
        }
        if !(0.0..=0.5).contains(&self.texture) {
            return Err(Error::Config("texture must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.cell_size
    }
}

/// A rendered scene before any domain shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_side: usize,
    pub num_classes: usize,
    /// Row-major depth in `(0, 1]`, 1 being the far plane.
    pub depth: Vec<f64>,
    /// Row-major RGB albedo in `[0, 1]`.
    pub albedo: Vec<f64>,
    pub labels: Vec<u8>,
    pub seed: u64,
}

/// Base color of every class: the ground is a neutral gray, the remaining
/// classes sit at evenly spaced hues.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.42, 0.40];
    }
    let h = (class - 1) as f64 / (num_classes - 1) as f64 * 6.0;
    let (s, v) = (0.75, 0.85);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Center of the depth band assigned to primitive class `class ≥ 1`.
pub fn class_depth(class: usize, num_classes: usize) -> f64 {
    if num_classes == 2 {
        return 0.5;
    }
    0.12 + 0.8 * (class - 1) as f64 / (num_classes - 2) as f64
}

/// Ground depth at pixel row `y`: near at the bottom, far at the top.
pub fn ground_depth(y: usize, image_side: usize) -> f64 {
    if image_side == 1 {
        return GROUND_FAR;
    }
    let t = y as f64 / (image_side - 1) as f64;
    GROUND_FAR * (1.0 - t) + GROUND_NEAR * t
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn covers(&self, gx: usize, gy: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => gx >= x0 && gx < x0 + w && gy >= y0 && gy < y0 + h,
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (gx as f64 + 0.5 - cx, gy as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, grid: usize) -> Self {
        let max_extent = (grid / 2).max(2);
        if rng.gen_bool(0.5) {
            let w = rng.gen_range(2..=max_extent.min(grid));
            let h = rng.gen_range(2..=max_extent.min(grid));
            Shape::Rect {
                x0: rng.gen_range(0..=grid - w),
                y0: rng.gen_range(0..=grid - h),
                w,
                h,
            }
        } else {
            let hi = (grid as f64 / 4.0).max(1.0);
            let r = if hi > 1.0 { rng.gen_range(1.0..hi) } else { 1.0 };
            Shape::Disc {
                cx: rng.gen_range(r..=grid as f64 - r),
                cy: rng.gen_range(r..=grid as f64 - r),
                r,
            }
        }
    }
}

/// Seed derivation shared by every seed-indexed generator in the crate.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene with `K − 1` primitives over a ground plane, on the default layout.
pub fn generate_scene(seed: u64, num_classes: usize, image_side: usize) -> Result<Scene> {
    let cell_size = if image_side % 4 == 0 { 4 } else { 1 };
    let spec = SceneSpec {
        num_classes,
        image_side,
        cell_size,
        ..Default::default()
    };
    generate_scene_with(seed, &spec)
}

/// Every primitive is one class with a uniform depth; nearer primitives
/// occlude farther ones. Layouts in which some primitive keeps fewer than
/// `min_visible_cells` visible cells are re-drawn.
pub fn generate_scene_with(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut attempt_seed = seed;
    for _ in 0..MAX_REGENERATIONS {
        if let Some(cells) = place_primitives(attempt_seed, spec) {
            return Ok(render(seed, attempt_seed, spec, &cells));
        }
        attempt_seed = derive_seed(attempt_seed, u64::MAX);
    }
    Err(Error::InvalidArgument(format!(
        "no valid layout for {} classes on a {}-cell grid",
        spec.num_classes,
        spec.grid_side()
    )))
}

/// Per-cell `(class, depth)` for primitive-covered cells, `None` for ground.
type CellMap = Vec<Option<(u8, f64)>>;

fn place_primitives(seed: u64, spec: &SceneSpec) -> Option<CellMap> {
    let grid = spec.grid_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes;
    let mut prims: Vec<(u8, f64, Shape)> = Vec::with_capacity(k - 1);
    for class in 1..k {
        let z = class_depth(class, k) + rng.gen_range(-BAND_HALF_WIDTH..=BAND_HALF_WIDTH);
        prims.push((class as u8, z, Shape::Rect { x0: 0, y0: 0, w: 0, h: 0 }));
    }
    for _ in 0..PLACEMENT_RETRIES {
        for p in prims.iter_mut() {
            p.2 = Shape::random(&mut rng, grid);
        }
        // Paint far to near so nearer primitives occlude.
        let mut order: Vec<usize> = (0..prims.len()).collect();
        order.sort_by(|&a, &b| prims[b].1.total_cmp(&prims[a].1));
        let mut cells: CellMap = vec![None; grid * grid];
        for &i in &order {
            let (class, z, shape) = prims[i];
            for gy in 0..grid {
                for gx in 0..grid {
                    if shape.covers(gx, gy) {
                        cells[gy * grid + gx] = Some((class, z));
                    }
                }
            }
        }
        let mut visible = vec![0usize; k];
        for c in &cells {
            visible[c.map_or(0, |(class, _)| class as usize)] += 1;
        }
        let need = spec.min_visible_cells.max(1);
        if visible[0] >= 1 && visible[1..].iter().all(|&v| v >= need) {
            return Some(cells);
        }
    }
    None
}

fn render(seed: u64, layout_seed: u64, spec: &SceneSpec, cells: &CellMap) -> Scene {
    let side = spec.image_side;
    let grid = spec.grid_side();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(layout_seed, 1));
    let mut depth = Vec::with_capacity(side * side);
    let mut albedo = Vec::with_capacity(side * side * 3);
    let mut labels = Vec::with_capacity(side * side);
    let mut colors: Vec<usize> = (0..spec.num_classes).collect();
    if spec.shuffle_palettes {
        colors[1..].shuffle(&mut rng);
    }
    for y in 0..side {
        for x in 0..side {
            let cell = cells[(y / spec.cell_size) * grid + x / spec.cell_size];
            let (class, z) = cell.unwrap_or((0, ground_depth(y, side)));
            labels.push(class);
            depth.push(z);
            let base = class_color(colors[class as usize], spec.num_classes);
            for ch in base {
                let jitter = if spec.texture > 0.0 {
                    rng.gen_range(-spec.texture..=spec.texture)
                } else {
                    0.0
                };
                albedo.push((ch + jitter).clamp(0.0, 1.0));
            }
        }
    }
    Scene {
        image_side: side,
        num_classes: spec.num_classes,
        depth,
        albedo,
        labels,
        seed,
    }
}
