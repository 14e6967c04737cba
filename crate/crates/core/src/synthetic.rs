//! Procedural stand-in corpus: one coloured geometric shape per image on a
//! striped, noisy background. Class `c` fixes the hue (14 evenly spaced) and
//! the shape (`c % 7`); position, size, background and noise vary.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CorpusError;
use crate::imaging;
use crate::labels::LabelMap;
use crate::trainer::ImageSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bar,
}

const SHAPES: [Shape; 7] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Bar,
];

pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % SHAPES.len()]
}

/// Fully saturated colour at hue `360 * class / num_classes` degrees.
pub fn class_color(class: usize, num_classes: usize) -> [u8; 3] {
    let h = 6.0 * class as f64 / num_classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (30.0 + 215.0 * v).round() as u8)
}

fn inside(shape: Shape, dx: f64, dy: f64) -> bool {
    // dx, dy are offsets from the centre in units of the shape radius.
    match shape {
        Shape::Disc => dx * dx + dy * dy <= 1.0,
        Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        Shape::Triangle => (-1.0..=0.8).contains(&dy) && dx.abs() <= (dy + 1.0) * 0.55,
        Shape::Cross => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
        Shape::Bar => dx.abs() <= 1.0 && dy.abs() <= 0.35,
    }
}

/// Renders one `size`x`size` sample of `class`.
pub fn render(class: usize, num_classes: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let s = size as f64;
    let base: f64 = rng.random_range(60.0..190.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.15..0.6) * 32.0 / s;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let radius = s * rng.random_range(0.22..0.34);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let shape = class_shape(class);
    let color = class_color(class, num_classes);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));

    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise: f64 = rng.random_range(-18.0..18.0);
            let px = if inside(shape, (fx - cx) / radius, (fy - cy) / radius) {
                std::array::from_fn(|c| (color[c] as f64 + jitter[c] + noise * 0.5).clamp(0.0, 255.0) as u8)
            } else {
                let stripe = 35.0 * ((fx * ca + fy * sa) * freq + phase).sin();
                let v = (base + stripe + noise).clamp(0.0, 255.0) as u8;
                [v, v, v]
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Label map `shape-00 .. shape-NN` for a generated corpus.
pub fn label_map(num_classes: usize) -> LabelMap {
    LabelMap::new((0..num_classes).map(|c| (format!("shape-{c:02}"), "Synthetic".to_string())))
        .expect("generated names are unique")
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    rng
}

/// Writes `per_class` PNGs for every class of `labels` under
/// `root/<class name>/NNNN.png`.
pub fn write_corpus(
    root: &Path,
    labels: &LabelMap,
    per_class: usize,
    image_size: u32,
    seed: u64,
) -> Result<(), CorpusError> {
    for entry in labels.entries() {
        let dir = root.join(&entry.name);
        fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
        let mut rng = class_rng(seed, entry.index);
        for i in 0..per_class {
            let img = render(entry.index, labels.len(), image_size, &mut rng);
            let path = dir.join(format!("{i:04}.png"));
            img.save(&path)
                .map_err(|e| CorpusError::io(&path, std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

/// `per_class` samples of each class rendered straight into an [`ImageSet`].
pub fn image_set(num_classes: usize, per_class: usize, input_size: usize, seed: u64) -> ImageSet {
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let mut rng = class_rng(seed, class);
        for _ in 0..per_class {
            let img = render(class, num_classes, input_size as u32, &mut rng);
            images.push(imaging::to_tensor_data(&img, input_size));
            labels.push(class);
        }
    }
    ImageSet {
        input_size,
        images,
        labels,
    }
}
