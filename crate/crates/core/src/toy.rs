//! Procedural stroke-glyph corpus for desk-scale experiments.
//!
//! Each class is a fixed combination of stroke primitives (bars, diagonals,
//! arcs, loops). Every sample re-renders its class with jittered control
//! points, a small random rotation/scale/offset and a random pen width, as
//! dark ink on a white background.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::write_atomic;
use crate::error::{invalid, io_err, Error, Result};

pub const TOY_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Line([f64; 2], [f64; 2]),
    /// Center, radius, start angle, sweep (radians).
    Arc([f64; 2], f64, f64, f64),
}

const PRIMITIVES: [Primitive; 14] = [
    Primitive::Line([0.2, 0.25], [0.8, 0.25]),
    Primitive::Line([0.2, 0.5], [0.8, 0.5]),
    Primitive::Line([0.2, 0.75], [0.8, 0.75]),
    Primitive::Line([0.25, 0.2], [0.25, 0.8]),
    Primitive::Line([0.5, 0.2], [0.5, 0.8]),
    Primitive::Line([0.75, 0.2], [0.75, 0.8]),
    Primitive::Line([0.2, 0.2], [0.8, 0.8]),
    Primitive::Line([0.8, 0.2], [0.2, 0.8]),
    Primitive::Arc([0.5, 0.5], 0.27, PI, PI),
    Primitive::Arc([0.5, 0.5], 0.27, 0.0, PI),
    Primitive::Arc([0.5, 0.5], 0.27, 0.5 * PI, PI),
    Primitive::Arc([0.5, 0.5], 0.27, -0.5 * PI, PI),
    Primitive::Arc([0.5, 0.33], 0.13, 0.0, 2.0 * PI),
    Primitive::Arc([0.5, 0.67], 0.13, 0.0, 2.0 * PI),
];

/// Primitive indices making up each class, chosen greedily so that two
/// classes share as few primitives as the class count allows.
fn class_recipes(classes: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = PRIMITIVES.len();
    let mut pool: Vec<Vec<usize>> = Vec::new();
    for size in [3usize, 4] {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            pool.push(combo.clone());
            let Some(i) = (0..size).rev().find(|&i| combo[i] < n - size + i) else {
                break;
            };
            combo[i] += 1;
            for j in i + 1..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    if classes > pool.len() {
        return Err(invalid(format!(
            "the toy generator supports at most {} classes",
            pool.len()
        )));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7079_6c67_6f54_2121));
    let shared = |a: &[usize], b: &[usize]| a.iter().filter(|p| b.contains(p)).count();
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(classes);
    for allowed in 1..=3 {
        for cand in &pool {
            if chosen.len() == classes {
                break;
            }
            if !chosen.contains(cand) && chosen.iter().all(|c| shared(c, cand) <= allowed) {
                chosen.push(cand.clone());
            }
        }
    }
    Ok(chosen)
}

/// Polyline approximation of a primitive in unit coordinates.
fn polyline(p: Primitive) -> Vec<[f64; 2]> {
    match p {
        Primitive::Line(a, b) => vec![a, b],
        Primitive::Arc(c, r, start, sweep) => {
            let steps = ((sweep.abs() / (2.0 * PI)) * 24.0).ceil().max(4.0) as usize;
            (0..=steps)
                .map(|i| {
                    let t = start + sweep * i as f64 / steps as f64;
                    [c[0] + r * t.cos(), c[1] + r * t.sin()]
                })
                .collect()
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Renders one jittered sample of a class recipe.
fn render<R: Rng + ?Sized>(recipe: &[usize], size: usize, rng: &mut R) -> GrayImage {
    let jitter = Normal::new(0.0, 0.025).expect("valid deviation");
    let angle = rng.random_range(-8.0f64..=8.0).to_radians();
    let scale = rng.random_range(0.9..=1.1);
    let offset = [rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05)];
    let pen = rng.random_range(1.6..=2.6);
    let (sin, cos) = angle.sin_cos();
    let s = size as f64;

    let mut strokes: Vec<Vec<[f64; 2]>> = Vec::new();
    for &p in recipe {
        let mut pts = polyline(PRIMITIVES[p]);
        let shift = [jitter.sample(rng), jitter.sample(rng)];
        for pt in &mut pts {
            let (x, y) = (pt[0] + shift[0] - 0.5, pt[1] + shift[1] - 0.5);
            let (x, y) = (scale * (cos * x - sin * y), scale * (sin * x + cos * y));
            *pt = [(x + 0.5 + offset[0]) * s, (y + 0.5 + offset[1]) * s];
        }
        strokes.push(pts);
    }

    let mut img = GrayImage::new(size as u32, size as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let c = [x as f64 + 0.5, y as f64 + 0.5];
        let d = strokes
            .iter()
            .flat_map(|pts| pts.windows(2).map(|w| segment_distance(c, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let ink = (pen / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        px.0[0] = (255.0 * (1.0 - ink)).round() as u8;
    }
    img
}

pub fn toy_class_name(class: usize) -> String {
    format!("class_{class:03}")
}

/// Renders `per_class` samples of each of `classes` glyph classes into
/// `out/<class>/<index>.png`. Output is a pure function of the arguments.
pub fn generate_toy_corpus(out: &Path, classes: usize, per_class: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 {
        return Err(invalid("need at least one image per class"));
    }
    let recipes = class_recipes(classes, seed)?;
    let mut written = Vec::with_capacity(classes * per_class);
    for (class, recipe) in recipes.iter().enumerate() {
        let dir = out.join(toy_class_name(class));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((class as u64) << 32) | i as u64);
            let img = render(recipe, TOY_IMAGE_SIZE, &mut rng);
            let path = dir.join(format!("{i:05}.png"));
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipes_are_distinct_and_sparse_in_overlap() {
        let r = class_recipes(10, 7).unwrap();
        assert_eq!(r.len(), 10);
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                let shared = r[i].iter().filter(|p| r[j].contains(p)).count();
                assert!(shared <= 1, "classes {i} and {j} share {shared}");
            }
        }
        assert_eq!(class_recipes(300, 1).unwrap().len(), 300);
        assert!(class_recipes(5000, 1).is_err());
    }

    #[test]
    fn rendering_is_dark_on_white() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = render(&[0, 4, 12], 32, &mut rng);
        let raw = img.as_raw();
        let ink = raw.iter().filter(|&&p| p < 128).count();
        assert!(ink > 20 && ink < 600, "{ink} ink pixels");
        assert_eq!(img.get_pixel(0, 0).0[0], 255);
    }
}
