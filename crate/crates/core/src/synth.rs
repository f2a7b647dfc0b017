//! Procedural fine-grained glyph dataset.
//!
//! Every image shows one object: a round body with three parts placed in
//! compass slots around it. All classes draw their parts from the same small
//! pool of shapes, so a class is identified by which shape sits in which
//! slot rather than by what appears in the image. Objects are translated and
//! slightly rotated per image, and loose copies of the part shapes are
//! scattered in the background as clutter.
//!
//! On disk a dataset is a directory with `train/` and `test/` splits, each
//! holding binary PGM images and a `manifest.tsv` of `filename<TAB>label`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

/// Parts per object.
pub const PARTS_PER_CLASS: usize = 3;
/// Angular positions a part can occupy around the body.
pub const SLOTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Plus,
}

/// Shapes available to parts and clutter.
pub const PART_SHAPES: [Shape; 4] = [Shape::Square, Shape::Triangle, Shape::Ring, Shape::Plus];

impl Shape {
    /// Whether the local point `(u, v)` (pixels, unit scale) is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 6.0 * 6.0,
            Shape::Square => u.abs() <= 3.5 && v.abs() <= 3.5,
            Shape::Triangle => (-4.0..=4.0).contains(&v) && u.abs() <= (v + 4.0) * 0.5,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (2.0 * 2.0..=4.2 * 4.2).contains(&r2)
            }
            Shape::Plus => (u.abs() <= 1.5 && v.abs() <= 4.5) || (v.abs() <= 1.5 && u.abs() <= 4.5),
        }
    }

    /// Gray level of the shape when drawn as a part; each part shape has its own.
    fn part_intensity(self) -> f64 {
        match self {
            Shape::Disk => BODY_INTENSITY,
            Shape::Square => 0.45,
            Shape::Triangle => 0.6,
            Shape::Ring => 0.75,
            Shape::Plus => 0.9,
        }
    }

    /// Radius of a circle enclosing the shape at unit scale.
    fn extent(self) -> f64 {
        match self {
            Shape::Disk => 6.0,
            Shape::Square => 5.0,
            Shape::Triangle => 4.5,
            Shape::Ring => 4.2,
            Shape::Plus => 4.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartSpec {
    pub shape: Shape,
    /// Compass slot, `0..SLOTS`, counter-clockwise from the +x axis.
    pub slot: usize,
    /// Distance from the body centre, pixels.
    pub radius: f64,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderNoise {
    /// Standard deviation of the per-image translation jitter, pixels.
    pub jitter_sigma: f64,
    /// Largest rotation of the whole object, radians.
    pub max_rotation: f64,
    pub clutter: usize,
    /// Standard deviation of additive pixel noise, in intensity units.
    pub pixel_sigma: f64,
}

impl Default for RenderNoise {
    fn default() -> Self {
        Self {
            jitter_sigma: 6.0,
            max_rotation: 15f64.to_radians(),
            clutter: 2,
            pixel_sigma: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub class: usize,
    pub body: Shape,
    pub parts: Vec<PartSpec>,
    pub noise: RenderNoise,
}

impl GlyphSpec {
    /// Sorted `(shape, slot)` pairs, which identify the class.
    pub fn signature(&self) -> Vec<(Shape, usize)> {
        let mut sig: Vec<_> = self.parts.iter().map(|p| (p.shape, p.slot)).collect();
        sig.sort();
        sig
    }

    fn outer_radius(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| p.radius + p.shape.extent() * p.scale)
            .fold(self.body.extent(), f64::max)
    }
}

const PART_RADIUS: f64 = 15.0;
const PART_SCALE: f64 = 1.3;

/// Class layouts: each class takes three of the four part shapes and three
/// distinct slots. Any two classes differ in at least two `(shape, slot)`
/// placements and share at least two shapes.
pub fn class_specs(seed: u64, n_classes: usize, noise: RenderNoise) -> Result<Vec<GlyphSpec>> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut specs: Vec<GlyphSpec> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while specs.len() < n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!("cannot lay out {n_classes} distinguishable classes")));
        }
        let mut shapes = PART_SHAPES.to_vec();
        shapes.shuffle(&mut rng);
        shapes.truncate(PARTS_PER_CLASS);
        let mut slots: Vec<usize> = (0..SLOTS).collect();
        slots.shuffle(&mut rng);
        let parts: Vec<PartSpec> = shapes
            .iter()
            .zip(&slots)
            .map(|(&shape, &slot)| PartSpec {
                shape,
                slot,
                radius: PART_RADIUS,
                scale: PART_SCALE,
            })
            .collect();
        let candidate = GlyphSpec {
            class: specs.len(),
            body: Shape::Disk,
            parts,
            noise,
        };
        let sig = candidate.signature();
        let distinct = specs.iter().all(|s| {
            let other = s.signature();
            sig.iter().filter(|p| !other.contains(p)).count() >= 2
        });
        if distinct {
            specs.push(candidate);
        }
    }
    Ok(specs)
}

const BACKGROUND: f64 = 0.04;
const BODY_INTENSITY: f64 = 0.95;
const CLUTTER_INTENSITY: f64 = 0.3;
const CLUTTER_SCALE: f64 = 0.7;
const SUPERSAMPLE: usize = 3;

struct Stamp {
    shape: Shape,
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
    intensity: f64,
}

/// Renders one image of `spec` with randomness from `rng`.
pub fn render<R: Rng + ?Sized>(spec: &GlyphSpec, size: usize, rng: &mut R) -> Result<GrayImage> {
    let reach = spec.outer_radius();
    let margin = reach + 1.0;
    if 2.0 * margin >= size as f64 {
        return Err(Error::Config(format!("image size {size} too small for objects of radius {reach}")));
    }
    let noise = spec.noise;
    let centre = size as f64 / 2.0;
    let jitter = Normal::new(0.0, noise.jitter_sigma.max(1e-12)).expect("finite sigma");
    let clamp = |v: f64| v.clamp(margin, size as f64 - margin);
    let cx = clamp(centre + jitter.sample(rng));
    let cy = clamp(centre + jitter.sample(rng));
    let rotation = rng.random_range(-noise.max_rotation..=noise.max_rotation);

    let mut stamps = vec![Stamp {
        shape: spec.body,
        cx,
        cy,
        angle: rotation,
        scale: 1.0,
        intensity: BODY_INTENSITY,
    }];
    for part in &spec.parts {
        let angle = rotation + 2.0 * PI * part.slot as f64 / SLOTS as f64;
        stamps.push(Stamp {
            shape: part.shape,
            cx: cx + part.radius * angle.cos(),
            // Image rows grow downwards; slots run counter-clockwise on screen.
            cy: cy - part.radius * angle.sin(),
            angle: rotation,
            scale: part.scale,
            intensity: part.shape.part_intensity(),
        });
    }
    // Clutter stays clear of the object and inside the frame.
    for _ in 0..noise.clutter {
        let shape = PART_SHAPES[rng.random_range(0..PART_SHAPES.len())];
        let r = shape.extent() * CLUTTER_SCALE;
        let mut placed = None;
        for _ in 0..200 {
            let x = rng.random_range(r + 0.5..size as f64 - r - 0.5);
            let y = rng.random_range(r + 0.5..size as f64 - r - 0.5);
            if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() > reach + r + 1.0 {
                placed = Some((x, y));
                break;
            }
        }
        if let Some((x, y)) = placed {
            stamps.push(Stamp {
                shape,
                cx: x,
                cy: y,
                angle: rng.random_range(-PI..PI),
                scale: CLUTTER_SCALE,
                intensity: CLUTTER_INTENSITY,
            });
        }
    }

    let pixel_noise = Normal::new(0.0, noise.pixel_sigma.max(1e-12)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(size * size);
    let sub = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * sub;
                    let y = py as f64 + (sy as f64 + 0.5) * sub;
                    let mut v = BACKGROUND;
                    for s in &stamps {
                        let (dx, dy) = (x - s.cx, y - s.cy);
                        let reach = s.shape.extent() * s.scale;
                        if dx.abs() > reach || dy.abs() > reach {
                            continue;
                        }
                        let (sin, cos) = s.angle.sin_cos();
                        // Rotate into the stamp frame; v points up on screen.
                        let u = (dx * cos - dy * sin) / s.scale;
                        let w = -(dx * sin + dy * cos) / s.scale;
                        if s.shape.contains(u, w) {
                            v = f64::max(v, s.intensity);
                        }
                    }
                    acc += v;
                }
            }
            let v = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + pixel_noise.sample(rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    GrayImage::new(size, size, pixels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
}

impl Sample {
    /// `H×W×3` tensor, gray replicated to three channels and scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.image.pixels.len() * 3);
        for &p in &self.image.pixels {
            let v = p as f64 / 255.0;
            data.extend_from_slice(&[v, v, v]);
        }
        Tensor::new([self.image.height, self.image.width, 3], data).expect("pixel count matches")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("{i:05}.pgm");
            s.image.save(&dir.join(&name))?;
            writeln!(manifest, "{name}\t{}", s.label).expect("string write");
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a split from its `manifest.tsv`.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (file, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("manifest", format!("line {}: expected filename<TAB>label", n + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::format("manifest", format!("line {}: bad label `{label}`", n + 1)))?;
            samples.push(Sample {
                image: GrayImage::load(&dir.join(file))?,
                label,
            });
        }
        Ok(Self { samples })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join("train"))?;
        self.test.save(&dir.join("test"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = Split::load(&dir.join("train"))?;
        let test = Split::load(&dir.join("test"))?;
        let classes = train
            .samples
            .iter()
            .chain(&test.samples)
            .map(|s| s.label + 1)
            .max()
            .unwrap_or(0);
        if train.is_empty() {
            return Err(Error::format("dataset", "empty training split"));
        }
        Ok(Self { classes, train, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub noise: RenderNoise,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 8,
            train: 1600,
            test: 400,
            size: 64,
            noise: RenderNoise::default(),
        }
    }
}

/// Generates a dataset in memory. Image `i` of a split has label
/// `i mod classes` and its own random stream, so the result depends only on
/// the options.
pub fn generate(opts: &GenerateOptions) -> Result<Dataset> {
    let specs = class_specs(opts.seed, opts.classes, opts.noise)?;
    let make = |split: u64, count: usize| -> Result<Split> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream((split << 32) | i as u64);
            let label = i % opts.classes;
            samples.push(Sample {
                image: render(&specs[label], opts.size, &mut rng)?,
                label,
            });
        }
        Ok(Split { samples })
    };
    Ok(Dataset {
        classes: opts.classes,
        train: make(0, opts.train)?,
        test: make(1, opts.test)?,
    })
}

/// Test accuracy of a nearest-class-mean classifier on raw pixels.
pub fn centroid_baseline(dataset: &Dataset) -> f64 {
    let Some((h, w)) = dataset.train.image_size() else {
        return 0.0;
    };
    let dim = h * w;
    let mut sums = vec![vec![0.0; dim]; dataset.classes];
    let mut counts = vec![0usize; dataset.classes];
    for s in &dataset.train.samples {
        counts[s.label] += 1;
        for (acc, &p) in sums[s.label].iter_mut().zip(&s.image.pixels) {
            *acc += p as f64;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let correct = dataset
        .test
        .samples
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| -> f64 {
                c.iter().zip(&s.image.pixels).map(|(m, &p)| (m - p as f64).powi(2)).sum()
            };
            let mut best = 0;
            for (k, c) in sums.iter().enumerate() {
                if counts[k] > 0 && (counts[best] == 0 || dist(c) < dist(&sums[best])) {
                    best = k;
                }
            }
            best == s.label
        })
        .count();
    correct as f64 / dataset.test.len().max(1) as f64
}
