//! Procedural benchmark scenes with planted object changes.
//!
//! Every scene is a smooth gradient background carrying a handful of
//! non-overlapping textured rectangles. A query is a noisy copy of one
//! reference scene in which, with probability `change_rate`, one object has
//! been replaced by a new texture; the replaced object's box is the
//! annotation. Destructor scenes are further references that no query is
//! derived from. Object boxes are exported as externally detected proposals.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bolf::BoundingBox;
use crate::error::{Error, Result};
use crate::eval::Annotation;
use crate::image::GrayImage;
use crate::manifest::{write_annotations, write_jsonl, ImageRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Reference scenes that queries are derived from (one query each).
    pub n_refs: usize,
    /// Reference scenes no query is derived from.
    pub n_destructors: usize,
    pub change_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_refs: 50,
            n_destructors: 50,
            change_rate: 0.8,
            noise_sigma: 0.03,
            seed: 0,
            width: 160,
            height: 120,
            min_objects: 3,
            max_objects: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: GrayImage,
    /// Object boxes, as an external detector would report them.
    pub objects: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScene {
    pub scene: Scene,
    pub reference_id: String,
    pub changed: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Reference scenes followed by destructors.
    pub references: Vec<Scene>,
    pub queries: Vec<QueryScene>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Stripes { freq: f64, angle: f64, phase: f64 },
    Checker { cell: f64 },
    Rings { freq: f64 },
    Ramp { angle: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    pattern: Pattern,
    lo: f64,
    hi: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let pattern = match rng.random_range(0..4) {
            0 => Pattern::Stripes {
                freq: rng.random_range(0.15..0.6),
                angle: rng.random_range(0.0..PI),
                phase: rng.random_range(0.0..2.0 * PI),
            },
            1 => Pattern::Checker {
                cell: rng.random_range(2.0..7.0),
            },
            2 => Pattern::Rings {
                freq: rng.random_range(0.2..0.8),
            },
            _ => Pattern::Ramp {
                angle: rng.random_range(0.0..2.0 * PI),
            },
        };
        let a: f64 = rng.random_range(0.0..1.0);
        let b: f64 = rng.random_range(0.0..1.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        // keep enough contrast for the pattern to be visible
        let hi = hi.max((lo + 0.35).min(1.0));
        let lo = lo.min(hi - 0.35);
        Self { pattern, lo, hi }
    }

    /// Intensity at offset `(u, v)` inside a `w`×`h` object.
    fn at(&self, u: f64, v: f64, w: f64, h: f64) -> f64 {
        let t = match self.pattern {
            Pattern::Stripes { freq, angle, phase } => {
                0.5 + 0.5 * ((u * angle.cos() + v * angle.sin()) * freq + phase).sin()
            }
            Pattern::Checker { cell } => {
                (((u / cell).floor() + (v / cell).floor()) as i64).rem_euclid(2) as f64
            }
            Pattern::Rings { freq } => {
                let r = ((u - w / 2.0).powi(2) + (v - h / 2.0).powi(2)).sqrt();
                0.5 + 0.5 * (r * freq).cos()
            }
            Pattern::Ramp { angle } => {
                let d = (u / w - 0.5) * angle.cos() + (v / h - 0.5) * angle.sin();
                (d + 0.5).clamp(0.0, 1.0)
            }
        };
        self.lo + (self.hi - self.lo) * t
    }
}

fn background(rng: &mut ChaCha8Rng, width: u32, height: u32) -> GrayImage {
    let base = rng.random_range(0.25..0.75);
    let slope = rng.random_range(0.1..0.4);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let wave = rng.random_range(0.03..0.1);
    let kx = rng.random_range(0.5..3.0) * 2.0 * PI / width as f64;
    let ky = rng.random_range(0.5..3.0) * 2.0 * PI / height as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut img = GrayImage::filled(width, height, 0.0);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64 - 0.5;
            let v = y as f64 / height as f64 - 0.5;
            let g = base
                + slope * (u * angle.cos() + v * angle.sin())
                + wave * (kx * x as f64 + ky * y as f64 + phase).sin();
            img.set(x, y, g.clamp(0.0, 1.0));
        }
    }
    img
}

fn paint(img: &mut GrayImage, b: &BoundingBox, tex: &Texture) {
    let (w, h) = (b.width() as f64, b.height() as f64);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            img.set(x, y, tex.at((x - b.x0) as f64, (y - b.y0) as f64, w, h));
        }
    }
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<BoundingBox> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let max_side = (cfg.width.min(cfg.height) / 3).max(4);
    let min_side = (max_side / 2).max(2);
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 500 {
        attempts += 1;
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let x0 = rng.random_range(0..=cfg.width - w);
        let y0 = rng.random_range(0..=cfg.height - h);
        let candidate = BoundingBox {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        // two-pixel gap between objects
        let padded = BoundingBox {
            x0: x0.saturating_sub(2),
            y0: y0.saturating_sub(2),
            x1: x0 + w + 2,
            y1: y0 + h + 2,
        };
        if boxes.iter().all(|b| b.intersection(&padded).is_none()) {
            boxes.push(candidate);
        }
    }
    boxes
}

fn scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: String) -> (Scene, Vec<Texture>) {
    let mut image = background(rng, cfg.width, cfg.height);
    let objects = place_objects(rng, cfg);
    let textures: Vec<Texture> = objects.iter().map(|_| Texture::random(rng)).collect();
    for (b, t) in objects.iter().zip(&textures) {
        paint(&mut image, b, t);
    }
    image.quantize_8bit();
    (Scene { id, image, objects }, textures)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    if cfg.n_refs == 0 {
        return Err(Error::InvalidArgument("need at least one reference scene".into()));
    }
    if !(0.0..=1.0).contains(&cfg.change_rate) {
        return Err(Error::InvalidArgument(format!(
            "change rate {} outside [0, 1]",
            cfg.change_rate
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument("noise sigma must be finite and nonnegative".into()));
    }
    if cfg.width < 12 || cfg.height < 12 || cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::InvalidArgument("scene geometry is too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut references = Vec::with_capacity(cfg.n_refs + cfg.n_destructors);
    let mut textures = Vec::with_capacity(cfg.n_refs);
    for i in 0..cfg.n_refs {
        let (s, t) = scene(&mut rng, cfg, format!("r{i:04}"));
        references.push(s);
        textures.push(t);
    }
    for i in 0..cfg.n_destructors {
        references.push(scene(&mut rng, cfg, format!("d{i:04}")).0);
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut queries = Vec::with_capacity(cfg.n_refs);
    let mut annotations = Vec::new();
    for (i, reference) in references[..cfg.n_refs].iter().enumerate() {
        let id = format!("q{i:04}");
        let mut image = reference.image.clone();
        let changed = if rng.random::<f64>() < cfg.change_rate && !reference.objects.is_empty() {
            let k = rng.random_range(0..reference.objects.len());
            let old = textures[i][k];
            let mut new = Texture::random(&mut rng);
            // make the replacement clearly differ in brightness
            while (new.lo + new.hi - old.lo - old.hi).abs() < 0.3 {
                new = Texture::random(&mut rng);
            }
            let b = reference.objects[k];
            paint(&mut image, &b, &new);
            Some(b)
        } else {
            None
        };
        if cfg.noise_sigma > 0.0 {
            for p in image.pixels_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        image.quantize_8bit();
        if let Some(b) = changed {
            annotations.push(Annotation {
                query_id: id.clone(),
                boxes: vec![b],
            });
        }
        queries.push(QueryScene {
            scene: Scene {
                id,
                image,
                objects: reference.objects.clone(),
            },
            reference_id: reference.id.clone(),
            changed,
        });
    }
    Ok(SyntheticDataset {
        references,
        queries,
        annotations,
    })
}

/// Manifest file names written by [`SyntheticDataset::write_to`].
pub const REFERENCES_FILE: &str = "references.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

fn image_record(s: &Scene) -> ImageRecord {
    ImageRecord {
        id: s.id.clone(),
        width: s.image.width(),
        height: s.image.height(),
        image_path: Some(format!("images/{}.pgm", s.id)),
        boxes: s.objects.iter().map(BoundingBox::to_array).collect(),
        features: None,
        reference_id: None,
    }
}

impl SyntheticDataset {
    /// Writes PGM images under `images/` plus the reference, query and
    /// annotation manifests.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in self.references.iter().chain(self.queries.iter().map(|q| &q.scene)) {
            s.image.write_pgm(images.join(format!("{}.pgm", s.id)))?;
        }
        let refs: Vec<ImageRecord> = self.references.iter().map(image_record).collect();
        write_jsonl(&dir.join(REFERENCES_FILE), &refs)?;
        let queries: Vec<ImageRecord> = self
            .queries
            .iter()
            .map(|q| ImageRecord {
                reference_id: Some(q.reference_id.clone()),
                ..image_record(&q.scene)
            })
            .collect();
        write_jsonl(&dir.join(QUERIES_FILE), &queries)?;
        write_annotations(dir.join(ANNOTATIONS_FILE), &self.annotations)
    }
}
