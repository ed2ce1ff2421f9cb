//! Procedural cluttered scenes with annotated grain-like objects.
//!
//! Each object is a rotated elliptical body with a class signature:
//! healthy bodies are plain gold, false smut bodies carry dark green-black
//! spots, neck blast bodies are brown-grey with a thin dark neck line that
//! runs through and past the body. Background clutter (thin strokes and
//! small blobs) is coloured by interpolating from the background palette
//! toward the object colours by `clutter_similarity`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, Annotation, ClassLabel, DatasetManifest, ImageRecord, RasterImage, IMAGES_DIR};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const GOLD: [u8; 3] = [212, 170, 64];
pub const SMUT: [u8; 3] = [34, 48, 26];
pub const BLAST: [u8; 3] = [128, 112, 96];
pub const BLAST_LINE: [u8; 3] = [60, 45, 35];

/// Every colour an object can be painted with.
pub const OBJECT_COLOURS: [[u8; 3]; 4] = [GOLD, SMUT, BLAST, BLAST_LINE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Clutter items per 10 000 pixels.
    pub clutter_density: f64,
    pub palette: Vec<[u8; 3]>,
    /// In `[0, 1]`; 0 keeps clutter in palette colours, 1 paints it in object colours.
    pub clutter_similarity: f64,
    /// Relative class counts in `ClassLabel::ANNOTATED` order.
    pub class_mix: [u32; 3],
    /// Probability that an image carries a second object of another class.
    pub multiclass_rate: f64,
    /// Object body length as a fraction of the shorter image side.
    pub object_scale: (f64, f64),
    /// Per-channel uniform pixel noise amplitude.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            clutter_density: 3.0,
            palette: vec![[78, 128, 70], [104, 150, 84], [64, 96, 128], [150, 160, 170]],
            clutter_similarity: 0.5,
            class_mix: [75, 63, 62],
            multiclass_rate: 0.1,
            object_scale: (0.3, 0.5),
            noise: 6,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("scene {}x{} is too small", self.width, self.height)));
        }
        if !(0.0..=1.0).contains(&self.clutter_similarity) {
            return Err(Error::Config("clutter_similarity must lie in [0, 1]".into()));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(Error::Config("clutter_density must be finite and non-negative".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        if self.class_mix.iter().sum::<u32>() == 0 {
            return Err(Error::Config("class_mix sums to zero".into()));
        }
        if !(0.0..=1.0).contains(&self.multiclass_rate) {
            return Err(Error::Config("multiclass_rate must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.8) {
            return Err(Error::Config("object_scale must satisfy 0 < min <= max <= 0.8".into()));
        }
        Ok(())
    }
}

/// Splits `n` by `mix` with largest-remainder rounding; ties go to the
/// earlier class.
pub fn class_counts(mix: &[u32; 3], n: usize) -> [usize; 3] {
    let total: u64 = mix.iter().map(|&m| m as u64).sum();
    let mut counts = [0usize; 3];
    let mut rem = [(0u64, 0usize); 3];
    for i in 0..3 {
        let num = mix[i] as u64 * n as u64;
        counts[i] = (num / total) as usize;
        rem[i] = (num % total, i);
    }
    let short = n - counts.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rem.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RasterImage,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub images: Vec<RasterImage>,
    pub manifest: DatasetManifest,
}

impl SyntheticDataset {
    /// Writes `images/*.ppm` under `root` and the manifest at `manifest_path`.
    pub fn write(&self, root: &Path, manifest_path: &Path) -> Result<()> {
        for (img, rec) in self.images.iter().zip(&self.manifest.records) {
            write_atomic(&root.join(&rec.image), &img.encode_ppm())?;
        }
        self.manifest.save(manifest_path)
    }
}

/// Primary class of every image, in image order.
pub fn primary_labels(spec: &SceneSpec, n: usize) -> Vec<ClassLabel> {
    let counts = class_counts(&spec.class_mix, n);
    let mut labels: Vec<ClassLabel> = ClassLabel::ANNOTATED
        .iter()
        .zip(counts)
        .flat_map(|(&c, k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    labels.shuffle(&mut rng);
    labels
}

pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (i, label) in primary_labels(spec, n).into_iter().enumerate() {
        let scene = render_scene(spec, i, label)?;
        records.push(ImageRecord {
            image: format!("{IMAGES_DIR}/img_{i:04}.ppm"),
            width: spec.width,
            height: spec.height,
            annotations: scene.annotations,
        });
        images.push(scene.image);
    }
    Ok(SyntheticDataset {
        images,
        manifest: DatasetManifest::new(records, Path::new("")),
    })
}

#[derive(Clone, Copy, Debug)]
struct Grain {
    class: ClassLabel,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Grain {
    fn axis(&self) -> (f64, f64) {
        (self.angle.cos(), self.angle.sin())
    }

    fn neck(&self) -> Option<((f64, f64), (f64, f64))> {
        (self.class == ClassLabel::NeckBlast).then(|| {
            let (c, s) = self.axis();
            let from = (self.cx - 0.8 * self.a * c, self.cy - 0.8 * self.a * s);
            let len = 1.35 * self.a;
            (from, (self.cx + len * c, self.cy + len * s))
        })
    }

    /// Conservative extent including the neck line.
    fn extent(&self) -> (f64, f64, f64, f64) {
        let (c, s) = self.axis();
        let hx = (self.a * self.a * c * c + self.b * self.b * s * s).sqrt();
        let hy = (self.a * self.a * s * s + self.b * self.b * c * c).sqrt();
        let mut e = (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy);
        if let Some((p, q)) = self.neck() {
            for (x, y) in [p, q] {
                e = (e.0.min(x - 1.5), e.1.min(y - 1.5), e.2.max(x + 1.5), e.3.max(y + 1.5));
            }
        }
        e
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (c, s) = self.axis();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    std::array::from_fn(|k| (a[k] as f64 + t * (b[k] as f64 - a[k] as f64)).round() as u8)
}

fn dist_to_segment(x: f64, y: f64, p: (f64, f64), q: (f64, f64)) -> f64 {
    let (vx, vy) = (q.0 - p.0, q.1 - p.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((x - p.0) * vx + (y - p.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((x - p.0 - t * vx).powi(2) + (y - p.1 - t * vy).powi(2)).sqrt()
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covering a float extent, clipped.
fn pixel_span(e: (f64, f64, f64, f64), w: usize, h: usize) -> (usize, usize, usize, usize) {
    let c = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    (c(e.0.floor(), w), c(e.1.floor(), h), c(e.2.ceil() + 1.0, w), c(e.3.ceil() + 1.0, h))
}

struct Canvas {
    img: RasterImage,
    bounds: Option<(usize, usize, usize, usize)>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, colour: [u8; 3], track: bool) {
        self.img.set_pixel(x, y, colour);
        if track {
            self.bounds = Some(match self.bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, colour: [u8; 3], mask: Option<&Grain>) {
        let (w, h) = (self.img.width(), self.img.height());
        let (x0, y0, x1, y1) = pixel_span((cx - r, cy - r, cx + r, cy + r), w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= r * r && mask.is_none_or(|g| g.inside(px, py)) {
                    self.paint(x, y, colour, mask.is_some());
                }
            }
        }
    }

    fn stroke(&mut self, p: (f64, f64), q: (f64, f64), half_width: f64, colour: [u8; 3], track: bool) {
        let (w, h) = (self.img.width(), self.img.height());
        let e = (
            p.0.min(q.0) - half_width,
            p.1.min(q.1) - half_width,
            p.0.max(q.0) + half_width,
            p.1.max(q.1) + half_width,
        );
        let (x0, y0, x1, y1) = pixel_span(e, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, p, q) <= half_width {
                    self.paint(x, y, colour, track);
                }
            }
        }
    }

    fn grain(&mut self, g: &Grain, rng: &mut ChaCha8Rng) {
        let (w, h) = (self.img.width(), self.img.height());
        let body = if g.class == ClassLabel::NeckBlast { BLAST } else { GOLD };
        let (x0, y0, x1, y1) = pixel_span(g.extent(), w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if g.inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.paint(x, y, body, true);
                }
            }
        }
        match g.class {
            ClassLabel::FalseSmut => {
                let (c, s) = g.axis();
                for _ in 0..rng.random_range(3..=6) {
                    let u = rng.random_range(-0.6..0.6) * g.a;
                    let v = rng.random_range(-0.3..0.3) * g.b;
                    let r = rng.random_range(0.25..0.4) * g.b;
                    self.disc(g.cx + u * c - v * s, g.cy + u * s + v * c, r, SMUT, Some(g));
                }
            }
            ClassLabel::NeckBlast => {
                let (p, q) = g.neck().expect("neck blast grains have a neck");
                self.stroke(p, q, 1.0, BLAST_LINE, true);
            }
            _ => {}
        }
    }
}

fn sample_grain(spec: &SceneSpec, class: ClassLabel, scale: f64, rng: &mut ChaCha8Rng) -> Option<Grain> {
    let short = spec.width.min(spec.height) as f64;
    let (lo, hi) = spec.object_scale;
    let len = rng.random_range(lo..=hi) * short * scale;
    let mut g = Grain {
        class,
        cx: 0.0,
        cy: 0.0,
        a: len / 2.0,
        b: len / 2.0 * rng.random_range(0.35..0.5),
        angle: rng.random_range(0.0..PI),
    };
    let (ex0, ey0, ex1, ey1) = g.extent();
    let margin = 2.0;
    let (fx0, fx1) = (margin - ex0, spec.width as f64 - margin - ex1);
    let (fy0, fy1) = (margin - ey0, spec.height as f64 - margin - ey1);
    if fx0 >= fx1 || fy0 >= fy1 {
        return None;
    }
    g.cx = rng.random_range(fx0..fx1);
    g.cy = rng.random_range(fy0..fy1);
    Some(g)
}

fn boxes_touch(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), gap: f64) -> bool {
    a.0 < b.2 + gap && b.0 < a.2 + gap && a.1 < b.3 + gap && b.1 < a.3 + gap
}

fn place(spec: &SceneSpec, classes: &[ClassLabel], rng: &mut ChaCha8Rng) -> Result<Vec<Grain>> {
    let mut scale = 1.0;
    for _ in 0..8 {
        'attempt: for _ in 0..40 {
            let mut placed: Vec<Grain> = Vec::new();
            for &c in classes {
                let Some(g) = sample_grain(spec, c, scale, rng) else {
                    continue 'attempt;
                };
                if placed.iter().any(|p| boxes_touch(p.extent(), g.extent(), 4.0)) {
                    continue 'attempt;
                }
                placed.push(g);
            }
            return Ok(placed);
        }
        scale *= 0.8;
    }
    Err(Error::Config(format!(
        "cannot fit {} objects into a {}x{} scene",
        classes.len(),
        spec.width,
        spec.height
    )))
}

/// Renders image `index` of the dataset defined by `spec`. Images use
/// independent random streams, so a scene does not depend on dataset size.
pub fn render_scene(spec: &SceneSpec, index: usize, primary: ClassLabel) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (w, h) = (spec.width, spec.height);

    let base = spec.palette[rng.random_range(0..spec.palette.len())];
    let mut canvas = Canvas {
        img: RasterImage::filled(w, h, base),
        bounds: None,
    };

    let n_clutter = (spec.clutter_density * (w * h) as f64 / 10_000.0).round() as usize;
    for _ in 0..n_clutter {
        let from = spec.palette[rng.random_range(0..spec.palette.len())];
        let to = OBJECT_COLOURS[rng.random_range(0..OBJECT_COLOURS.len())];
        let colour = lerp(from, to, spec.clutter_similarity);
        let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        if rng.random_bool(0.5) {
            let len = rng.random_range(8.0..32.0);
            let t = rng.random_range(0.0..PI);
            let q = (x + len * t.cos(), y + len * t.sin());
            canvas.stroke((x, y), q, rng.random_range(0.5..1.2), colour, false);
        } else {
            canvas.disc(x, y, rng.random_range(1.5..4.5), colour, None);
        }
    }

    let mut classes = vec![primary];
    if rng.random_bool(spec.multiclass_rate) {
        let others: Vec<ClassLabel> = ClassLabel::ANNOTATED.iter().copied().filter(|&c| c != primary).collect();
        classes.push(others[rng.random_range(0..others.len())]);
    }
    let grains = place(spec, &classes, &mut rng)?;
    let mut annotations = Vec::with_capacity(grains.len());
    for g in &grains {
        canvas.bounds = None;
        canvas.grain(g, &mut rng);
        let (x0, y0, x1, y1) = canvas.bounds.expect("placed grains cover at least one pixel");
        annotations.push(Annotation {
            bbox: BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)?,
            class: g.class,
        });
    }

    if spec.noise > 0 {
        let amp = spec.noise as i16;
        for v in canvas.img.data_mut() {
            *v = (*v as i16 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8;
        }
    }
    Ok(Scene {
        image: canvas.img,
        annotations,
    })
}
