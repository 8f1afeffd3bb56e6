//! Procedural layered scenes: an opaque background followed by shape layers,
//! each shape its own RGBA layer with antialiased alpha.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{compose_stack, LayerImage};
use crate::error::{CganError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    /// Total layers including the background; at least 1.
    pub layers: usize,
    pub size: usize,
    /// Background colors; each scene picks one and jitters it slightly.
    pub palette: Vec<[f64; 3]>,
    pub shapes: Vec<ShapeKind>,
    /// Shape radius range as a fraction of the image side.
    pub scale: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        SyntheticRecipe {
            layers: 2,
            size: 32,
            palette: vec![
                [0.15, 0.2, 0.45],
                [0.85, 0.8, 0.6],
                [0.3, 0.55, 0.3],
                [0.6, 0.6, 0.65],
            ],
            shapes: vec![ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Rectangle],
            scale: (0.15, 0.35),
            seed: 0,
        }
    }
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CganError::Argument(format!("synthetic recipe: {m}")));
        if self.layers == 0 {
            return bad("needs at least one layer");
        }
        if self.size == 0 {
            return bad("size must be at least 1");
        }
        if self.palette.is_empty() {
            return bad("palette is empty");
        }
        if self.layers > 1 && self.shapes.is_empty() {
            return bad("shape vocabulary is empty");
        }
        if !(0.0 < self.scale.0 && self.scale.0 <= self.scale.1) {
            return bad("scale range must satisfy 0 < min <= max");
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("palette colors must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One rendered scene: ground-truth layers, background first, and their composite.
#[derive(Clone, Debug)]
pub struct Scene {
    pub layers: Vec<LayerImage>,
    /// `[3, S, S]`
    pub image: Tensor,
}

enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rectangle { cx: f64, cy: f64, hw: f64, hh: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rectangle { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Triangle { v } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// Samples per pixel side used for antialiased coverage.
const SUPERSAMPLE: usize = 4;

fn coverage(shape: &Shape, size: usize) -> Vec<f64> {
    let n = SUPERSAMPLE;
    let mut out = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                    hits += shape.contains(x, y) as usize;
                }
            }
            out[py * size + px] = hits as f64 / (n * n) as f64;
        }
    }
    out
}

fn random_shape(kind: ShapeKind, recipe: &SyntheticRecipe, rng: &mut ChaCha8Rng) -> Shape {
    let s = recipe.size as f64;
    let r = rng.random_range(recipe.scale.0..=recipe.scale.1) * s;
    let cx = rng.random_range(0.2..0.8) * s;
    let cy = rng.random_range(0.2..0.8) * s;
    match kind {
        ShapeKind::Circle => Shape::Circle { cx, cy, r },
        ShapeKind::Rectangle => {
            let aspect: f64 = rng.random_range(0.6..1.0);
            let (hw, hh) = if rng.random_bool(0.5) { (r, r * aspect) } else { (r * aspect, r) };
            Shape::Rectangle { cx, cy, hw, hh }
        }
        ShapeKind::Triangle => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let v = [0.0, 1.0, 2.0].map(|k: f64| {
                let a = theta + k * 2.0 * PI / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Shape::Triangle { v }
        }
    }
}

fn single_layer(rgb: Vec<f64>, alpha: Vec<f64>, size: usize) -> Result<LayerImage> {
    LayerImage::new(
        Tensor::new(&[1, 3, size, size], rgb)?,
        Tensor::new(&[1, 1, size, size], alpha)?,
    )
}

/// Renders scene `index`; every scene has its own random stream, so scenes can
/// be produced in any order.
pub fn render_scene(recipe: &SyntheticRecipe, index: u64) -> Result<Scene> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(index);
    let size = recipe.size;
    let plane = size * size;

    let base = recipe.palette[rng.random_range(0..recipe.palette.len())];
    let bg: Vec<f64> = base
        .iter()
        .flat_map(|&c| {
            let v = (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            std::iter::repeat_n(v, plane)
        })
        .collect();
    let mut layers = vec![single_layer(bg, vec![1.0; plane], size)?];

    for _ in 1..recipe.layers {
        let kind = recipe.shapes[rng.random_range(0..recipe.shapes.len())];
        let shape = random_shape(kind, recipe, &mut rng);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let rgb = color.iter().flat_map(|&c| std::iter::repeat_n(c, plane)).collect();
        layers.push(single_layer(rgb, coverage(&shape, size), size)?);
    }
    let image = compose_stack(&layers)?.final_image().rgb().unstack().remove(0);
    Ok(Scene { layers, image })
}

pub fn make_synthetic(recipe: &SyntheticRecipe, count: usize) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(CganError::Argument("synthetic count must be at least 1".into()));
    }
    (0..count as u64).into_par_iter().map(|i| render_scene(recipe, i)).collect()
}

/// Composites of scenes `indices` as `[N, 3, S, S]`.
pub fn render_images(recipe: &SyntheticRecipe, indices: Range<usize>) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(CganError::Argument("synthetic count must be at least 1".into()));
    }
    let images = indices
        .into_par_iter()
        .map(|i| render_scene(recipe, i as u64).map(|s| s.image))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&images)
}
