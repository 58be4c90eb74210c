//! ShapesWorld: procedural images of coloured shapes with exact labels.
//!
//! Class 0 is a near-gray background. Each shape class has its own hue and
//! outline (rectangle, disk or triangle, cycling). Shapes are painted as a
//! random gray level plus `contrast` times the class chroma, so the class is
//! carried by chroma alone and `contrast` sets how far inputs sit from the
//! decision boundaries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{LabelMap, Rng, Tensor};
use crate::tseg;

/// One image with its ground-truth label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesWorldSpec {
    /// Image height and width.
    pub size: usize,
    /// Background plus `classes - 1` shape classes.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-width of the uniform per-channel colour noise.
    pub noise: f64,
    /// Scale of the class chroma added to a shape's gray level.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for ShapesWorldSpec {
    fn default() -> Self {
        Self {
            size: 32,
            classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            noise: 0.05,
            contrast: CONTRAST,
            seed: 0,
        }
    }
}

/// Image counts per split; global indices run train, then val, then test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 256,
            val: 64,
            test: 64,
        }
    }
}

impl SplitSizes {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// First global index of `split`.
    pub fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

pub const CONTRAST: f64 = 0.3;

impl ShapesWorldSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.size >= 4, InvalidArgument, "image size must be >= 4, got {}", self.size);
        ensure!(
            (2..=255).contains(&self.classes),
            InvalidArgument,
            "classes must be in 2..=255, got {}",
            self.classes
        );
        ensure!(
            self.min_shapes <= self.max_shapes,
            InvalidArgument,
            "min_shapes {} > max_shapes {}",
            self.min_shapes,
            self.max_shapes
        );
        ensure!(
            self.noise.is_finite() && (0.0..=0.5).contains(&self.noise),
            InvalidArgument,
            "noise must be in [0, 0.5], got {}",
            self.noise
        );
        ensure!(
            self.contrast.is_finite() && self.contrast > 0.0 && self.contrast <= 1.0,
            InvalidArgument,
            "contrast must be in (0, 1], got {}",
            self.contrast
        );
        Ok(())
    }

    /// Zero-mean chroma direction of shape class `c >= 1`, entries in `[-0.5, 0.5]`.
    pub fn class_chroma(&self, class: usize) -> [f64; 3] {
        let hue = (class - 1) as f64 / (self.classes - 1) as f64;
        hsv_to_rgb(hue, 1.0, 1.0).map(|v| v - 0.5)
    }

    /// Colour of a class-`c` shape at gray level `gray`.
    pub fn shape_colour(&self, class: usize, gray: f64) -> [f64; 3] {
        self.class_chroma(class).map(|v| gray + self.contrast * v)
    }

    /// Sample with global index `index`; depends only on `(seed, index)`.
    pub fn generate(&self, index: u64) -> Result<Sample> {
        self.validate()?;
        let mut rng = Rng::for_item(self.seed, index);
        let gray = rng.uniform(0.35, 0.65);
        let tint = 0.1 * self.contrast;
        let background = [
            gray + rng.uniform(-tint, tint),
            gray + rng.uniform(-tint, tint),
            gray + rng.uniform(-tint, tint),
        ];
        let n = rng.int_in(self.min_shapes, self.max_shapes);
        let s = self.size as f64;
        let shapes: Vec<Shape> = (0..n)
            .map(|_| {
                let class = rng.int_in(1, self.classes - 1);
                let half = rng.uniform(0.12 * s, 0.25 * s);
                let cx = rng.uniform(0.0, s);
                let cy = rng.uniform(0.0, s);
                let outline = match (class - 1) % 3 {
                    0 => Outline::Rect {
                        half_w: half,
                        half_h: half * rng.uniform(0.5, 1.0),
                    },
                    1 => Outline::Disk { radius: half },
                    _ => Outline::Triangle { half },
                };
                let gray = rng.uniform(0.35, 0.65);
                Shape {
                    class: class as u8,
                    gray,
                    cx,
                    cy,
                    outline,
                }
            })
            .collect();
        render_scene(self, background, &shapes, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outline {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
    /// Upward isosceles triangle with base and height `2 * half`.
    Triangle { half: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub gray: f64,
    pub cx: f64,
    pub cy: f64,
    pub outline: Outline,
}

impl Shape {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.outline {
            Outline::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Outline::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            Outline::Triangle { half } => {
                let depth = dy + half;
                (0.0..=2.0 * half).contains(&depth) && dx.abs() <= depth / 2.0
            }
        }
    }
}

/// Paints `shapes` in order over `background`, then adds colour noise.
pub fn render_scene(spec: &ShapesWorldSpec, background: [f64; 3], shapes: &[Shape], rng: &mut Rng) -> Result<Sample> {
    let n = spec.size;
    let mut labels = LabelMap::filled(n, n, 0);
    let mut owner: Vec<Option<&Shape>> = vec![None; n * n];
    for (i, (l, o)) in labels.data_mut().iter_mut().zip(owner.iter_mut()).enumerate() {
        let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        for s in shapes {
            if s.contains(x, y) {
                *l = s.class;
                *o = Some(s);
            }
        }
    }
    labels.check_classes(spec.classes)?;
    let mut data = vec![0.0f64; 3 * n * n];
    for (i, o) in owner.iter().enumerate() {
        let colour = match o {
            Some(s) => spec.shape_colour(s.class as usize, s.gray),
            None => background,
        };
        for (c, &v) in colour.iter().enumerate() {
            let noise = if spec.noise > 0.0 { rng.uniform(-spec.noise, spec.noise) } else { 0.0 };
            data[c * n * n + i] = (v + noise).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Tensor::from_f64(vec![3, n, n], &data)?,
        labels,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub const MANIFEST: &str = "manifest.csv";

/// Row of a split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: u64,
    pub image: String,
    pub label: String,
}

/// Writes `samples` (global indices from `first_index`) and a manifest to `dir`.
pub fn write_split(dir: &Path, first_index: u64, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Parse(format!("{}: {e}", manifest.display())))?;
    for (i, s) in samples.iter().enumerate() {
        let index = first_index + i as u64;
        let row = ManifestRow {
            index,
            image: format!("img_{index:05}.tseg"),
            label: format!("lbl_{index:05}.tseg"),
        };
        tseg::write_tensor(&dir.join(&row.image), &s.image)?;
        tseg::write_labels(&dir.join(&row.label), &s.labels)?;
        w.serialize(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Generates all three splits under `root/{train,val,test}`.
pub fn gen_dataset(spec: &ShapesWorldSpec, sizes: SplitSizes, root: &Path) -> Result<()> {
    spec.validate()?;
    ensure!(
        sizes.train + sizes.val + sizes.test >= 1,
        InvalidArgument,
        "dataset needs at least one image"
    );
    for split in Split::ALL {
        let first = sizes.offset(split) as u64;
        let samples = (0..sizes.count(split) as u64)
            .map(|i| spec.generate(first + i))
            .collect::<Result<Vec<_>>>()?;
        write_split(&split_dir(root, split), first, &samples)?;
    }
    Ok(())
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loads every sample listed in `dir`'s manifest, in manifest order.
pub fn load_split_dir(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .iter()
        .map(|row| {
            let image = tseg::read_tensor(&dir.join(&row.image))?;
            let labels = tseg::read_labels(&dir.join(&row.label))?;
            let (_, h, w) = image.chw()?;
            ensure!(
                labels.height() == h && labels.width() == w,
                Shape,
                "sample {}: labels {}x{} vs image {h}x{w}",
                row.index,
                labels.height(),
                labels.width()
            );
            Ok(Sample { image, labels })
        })
        .collect()
}

/// Access to dataset splits; benchmarks go through this so split discipline
/// can be observed.
pub trait SplitSource {
    fn load(&self, split: Split) -> Result<Vec<Sample>>;
}

/// Splits stored under one root directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub root: PathBuf,
}

impl SplitSource for DirSource {
    fn load(&self, split: Split) -> Result<Vec<Sample>> {
        load_split_dir(&split_dir(&self.root, split))
    }
}
