//! Synthetic two-domain segmentation scenes and their on-disk layout.
//!
//! Both domains draw shape geometry from the same distribution. Source
//! images are flat-coloured shapes on a plain background; target images are
//! the same kind of scene seen through a low-frequency haze, a global colour
//! cast and additive Gaussian noise.
//!
//! A dataset directory holds `manifest.txt` with one line per sample,
//! `<image.ppm> <label.pgm|-> <domain 0|1>`, next to the referenced files.
//! Label PGMs store the class id directly as the pixel value.

pub mod pnm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};
use crate::util::stream_seed;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    /// Domain label used by the adversarial loss: 0 source, 1 target.
    pub fn label(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle = 1,
    Square = 2,
    Triangle = 3,
}

impl ShapeKind {
    pub fn class_id(self) -> u8 {
        self as u8
    }
}

/// Number of segmentation classes: background plus three shape kinds.
pub const NUM_CLASSES: usize = 4;

/// 8-bit RGB raster, interleaved row-major as in a PPM payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// Planar `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.rgb[p * 3 + c] as f64 / 255.0
        })
    }
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn to_indices(&self) -> Vec<usize> {
        self.classes.iter().map(|&c| c as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: Option<LabelMap>,
    pub domain: Domain,
}

/// Appearance shift applied to target images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Severity {
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    /// Peak haze blend weight; also scales the colour cast.
    pub haze_alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub severity: Severity,
    /// Per-channel offset added to target images, scaled by `haze_alpha`.
    pub color_shift: [f64; 3],
    pub fog_color: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 6.0,
            max_radius: 14.0,
            severity: Severity {
                noise_sigma: 0.08,
                haze_alpha: 0.6,
            },
            color_shift: [0.15, 0.05, -0.15],
            fog_color: [0.8, 0.8, 0.85],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("scene size must be >= 8".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        if !(self.min_radius >= 1.0
            && self.min_radius <= self.max_radius
            && 2.0 * self.max_radius < self.size as f64)
        {
            return Err(Error::Config(
                "shape radii must satisfy 1 <= min <= max < size/2".into(),
            ));
        }
        let s = self.severity;
        if !(s.noise_sigma >= 0.0 && (0.0..=1.0).contains(&s.haze_alpha)) {
            return Err(Error::Config(
                "severity needs sigma >= 0 and alpha in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Square => {
                let half = 0.85 * self.radius;
                dx.abs() <= half && dy.abs() <= half
            }
            ShapeKind::Triangle => {
                // upright equilateral triangle with circumradius 1.2 r
                let r = 1.2 * self.radius;
                let apex = (0.0, -r);
                let left = (-r * 0.866_025_403_784_438_6, 0.5 * r);
                let right = (r * 0.866_025_403_784_438_6, 0.5 * r);
                let edge = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0)
                };
                let e0 = edge(apex, right);
                let e1 = edge(right, left);
                let e2 = edge(left, apex);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

struct Scene {
    background: [f64; 3],
    shapes: Vec<Shape>,
}

fn draw_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let level = rng.gen_range(0.05..0.35);
    let background = [
        level + rng.gen_range(-0.03..0.03),
        level + rng.gen_range(-0.03..0.03),
        level + rng.gen_range(-0.03..0.03),
    ];
    let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let size = spec.size as f64;
    let shapes = (0..n)
        .map(|_| {
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                _ => ShapeKind::Triangle,
            };
            let radius = rng.gen_range(spec.min_radius..=spec.max_radius);
            let cx = rng.gen_range(radius..size - radius);
            let cy = rng.gen_range(radius..size - radius);
            let color = [
                rng.gen_range(0.35..1.0),
                rng.gen_range(0.35..1.0),
                rng.gen_range(0.35..1.0),
            ];
            Shape {
                kind,
                cx,
                cy,
                radius,
                color,
            }
        })
        .collect();
    Scene { background, shapes }
}

/// Renders the clean scene as planar RGB floats plus its label map.
fn render(spec: &SceneSpec, scene: &Scene) -> (Vec<f64>, Vec<u8>) {
    let s = spec.size;
    let mut rgb = vec![0.0; 3 * s * s];
    let mut labels = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = scene.background;
            for shape in &scene.shapes {
                if shape.contains(px, py) {
                    color = shape.color;
                    labels[y * s + x] = shape.kind.class_id();
                }
            }
            for c in 0..3 {
                rgb[c * s * s + y * s + x] = color[c];
            }
        }
    }
    (rgb, labels)
}

/// Blends in low-frequency haze, the colour cast and pixel noise.
fn degrade(spec: &SceneSpec, rgb: &mut [f64], rng: &mut ChaCha8Rng) {
    let Severity {
        noise_sigma,
        haze_alpha,
    } = spec.severity;
    let s = spec.size;
    let coarse = Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(0.0..1.0));
    let field = resize_bilinear(&coarse, s, s).expect("valid extents");
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    for c in 0..3 {
        for p in 0..s * s {
            let w = haze_alpha * (0.5 + 0.5 * field.data()[p]);
            let v = &mut rgb[c * s * s + p];
            *v = (1.0 - w) * *v + w * spec.fog_color[c] + haze_alpha * spec.color_shift[c];
            if noise_sigma > 0.0 {
                *v += noise.sample(rng);
            }
        }
    }
}

fn quantize(spec: &SceneSpec, planar: &[f64]) -> Image {
    let s = spec.size;
    let mut rgb = vec![0u8; 3 * s * s];
    for p in 0..s * s {
        for c in 0..3 {
            rgb[p * 3 + c] = (planar[c * s * s + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Image {
        width: s,
        height: s,
        rgb,
    }
}

/// One scene, fully determined by `(spec, domain, seed, index)`. Geometry
/// depends only on `(seed, index)`, so both domains share it for equal
/// arguments. Labels are produced for both domains.
pub fn generate_one(spec: &SceneSpec, domain: Domain, seed: u64, index: u64) -> Sample {
    let mut geo = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, index, 0x6e0]));
    let scene = draw_scene(spec, &mut geo);
    let (mut rgb, labels) = render(spec, &scene);
    if domain == Domain::Target {
        let mut look = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, index, 0x10c]));
        degrade(spec, &mut rgb, &mut look);
    }
    Sample {
        image: quantize(spec, &rgb),
        labels: Some(LabelMap {
            width: spec.size,
            height: spec.size,
            classes: labels,
        }),
        domain,
    }
}

pub fn generate(spec: &SceneSpec, domain: Domain, count: usize, seed: u64) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| generate_one(spec, domain, seed, i))
        .collect()
}

/// Train and test splits for a two-domain benchmark. Each of the four
/// (split, domain) pools has its own geometry stream, so target training
/// scenes are not re-renderings of source training scenes.
pub fn generate_splits(
    spec: &SceneSpec,
    seed: u64,
    train_count: usize,
    test_count: usize,
) -> (Vec<Sample>, Vec<Sample>) {
    let pool = |split: u64, domain: Domain, count: usize| {
        generate(
            spec,
            domain,
            count,
            stream_seed(&[seed, split, domain as u64]),
        )
    };
    let mut train = pool(0, Domain::Source, train_count);
    train.extend(pool(0, Domain::Target, train_count));
    let mut test = pool(1, Domain::Source, test_count);
    test.extend(pool(1, Domain::Target, test_count));
    (train, test)
}

/// Writes `train/` (target labels withheld) and `test/` (all labelled)
/// under `root`.
pub fn save_splits(root: &Path, train: &[Sample], test: &[Sample]) -> Result<()> {
    save_dataset(&root.join("train"), train, |s| s.domain == Domain::Source)?;
    save_dataset(&root.join("test"), test, |_| true)
}

/// Writes samples as `img_NNNNN.ppm` / `lbl_NNNNN.pgm` plus the manifest.
/// Labels of samples for which `keep_label` is false are written as `-`.
pub fn save_dataset(
    dir: &Path,
    samples: &[Sample],
    keep_label: impl Fn(&Sample) -> bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img_name = format!("img_{i:05}.ppm");
        let img = pnm::encode_ppm(s.image.width, s.image.height, &s.image.rgb);
        let path = dir.join(&img_name);
        fs::write(&path, img).map_err(|e| Error::io(&path, e))?;
        let label_field = match &s.labels {
            Some(l) if keep_label(s) => {
                let name = format!("lbl_{i:05}.pgm");
                let path = dir.join(&name);
                fs::write(&path, pnm::encode_pgm(l.width, l.height, &l.classes))
                    .map_err(|e| Error::io(&path, e))?;
                name
            }
            _ => "-".to_string(),
        };
        manifest.push_str(&format!("{img_name} {label_field} {}\n", s.domain as u8));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (width, height, rgb) =
        pnm::decode_ppm(&read_file(path)?).map_err(|e| Error::data(path, e.to_string()))?;
    Ok(Image { width, height, rgb })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad =
            |detail: String| Error::data(&manifest_path, format!("line {}: {detail}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [img, lbl, dom] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let domain = dom
            .parse::<u8>()
            .ok()
            .and_then(Domain::from_id)
            .ok_or_else(|| bad(format!("bad domain {dom:?}")))?;
        let img_path = dir.join(img);
        if !img_path.is_file() {
            return Err(bad(format!("missing image {img}")));
        }
        let image = load_image(&img_path)?;
        let labels = if lbl == "-" {
            None
        } else {
            let lbl_path: PathBuf = dir.join(lbl);
            if !lbl_path.is_file() {
                return Err(bad(format!("missing label map {lbl}")));
            }
            let (width, height, classes) = pnm::decode_pgm(&read_file(&lbl_path)?)
                .map_err(|e| Error::data(&lbl_path, e.to_string()))?;
            if (width, height) != (image.width, image.height) {
                return Err(bad(format!(
                    "label map {lbl} size differs from image {img}"
                )));
            }
            Some(LabelMap {
                width,
                height,
                classes,
            })
        };
        samples.push(Sample {
            image,
            labels,
            domain,
        });
    }
    Ok(samples)
}

/// Fraction of pixels per class over a set of samples with labels.
pub fn class_frequencies(samples: &[Sample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for l in samples.iter().filter_map(|s| s.labels.as_ref()) {
        for &c in &l.classes {
            counts[c as usize] += 1;
        }
        total += l.classes.len();
    }
    counts
        .iter()
        .map(|&c| c as f64 / total.max(1) as f64)
        .collect()
}
