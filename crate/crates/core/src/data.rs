//! Datasets and image files.
//!
//! Folder ingestion takes precomputed crop boxes in place of a face detector. The sprite
//! generator draws small synthetic faces whose eyes, brows and mouth depend on one of the
//! seven expression classes, for experiments that need no external data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{decode_jpeg, encode_jpeg};
use crate::error::{CisError, Result};
use crate::image::{ImageTensor, IMAGE_SIZE};
use crate::message::{ExpressionLabel, N_EXPRESSIONS};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<ExpressionLabel>>,
    /// File names (or generated ids), parallel to `images`.
    pub names: Vec<String>,
    /// Where the data came from, e.g. `sprites(n=5000, seed=0)`.
    pub source: String,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Option<Vec<ExpressionLabel>>,
        names: Vec<String>,
        source: String,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(CisError::Empty("dataset"));
        }
        let (h, w) = (images[0].height(), images[0].width());
        if images.iter().any(|i| i.height() != h || i.width() != w) {
            return Err(CisError::Invalid("dataset images differ in size".into()));
        }
        if let Some(l) = &labels {
            crate::error::check_dim("label count", images.len(), l.len())?;
        }
        crate::error::check_dim("name count", images.len(), names.len())?;
        Ok(Self {
            images,
            labels,
            names,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` items (or all of them).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        self.images.truncate(n);
        self.names.truncate(n);
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
        self
    }

    /// Write every image as PNG plus `labels.csv` when labelled.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (img, name) in self.images.iter().zip(&self.names) {
            save_image(img, &dir.join(format!("{name}.png")), None)?;
        }
        if let Some(labels) = &self.labels {
            let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
            w.write_record(["file", "label"])?;
            for (name, l) in self.names.iter().zip(labels) {
                w.write_record([format!("{name}.png").as_str(), l.name()])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Optional per-folder label table: `file,label` with a header row; labels by name or index.
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CropSpec {
    /// Centered crop keeping this fraction of each side; 1.0 keeps the whole image.
    Center(f64),
    /// Boxes by file name; files without a box are used whole.
    Boxes(BTreeMap<String, CropBox>),
}

impl Default for CropSpec {
    fn default() -> Self {
        Self::Center(1.0)
    }
}

impl CropSpec {
    /// Read boxes from a CSV with header `file,x,y,w,h`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut boxes = BTreeMap::new();
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.deserialize() {
            let (file, x, y, w, h): (String, u32, u32, u32, u32) = rec?;
            boxes.insert(file, CropBox { x, y, w, h });
        }
        Ok(Self::Boxes(boxes))
    }

    fn box_for(&self, name: &str, width: u32, height: u32) -> Result<CropBox> {
        let b = match self {
            Self::Center(f) => {
                if !(*f > 0.0 && *f <= 1.0) {
                    return Err(CisError::Invalid(format!("center-crop fraction {f} outside (0, 1]")));
                }
                let w = ((width as f64 * f).round() as u32).max(1);
                let h = ((height as f64 * f).round() as u32).max(1);
                CropBox {
                    x: (width - w) / 2,
                    y: (height - h) / 2,
                    w,
                    h,
                }
            }
            Self::Boxes(m) => match m.get(name) {
                Some(b) => *b,
                None => CropBox {
                    x: 0,
                    y: 0,
                    w: width,
                    h: height,
                },
            },
        };
        if b.w == 0 || b.h == 0 || b.x + b.w > width || b.y + b.h > height {
            return Err(CisError::Invalid(format!(
                "crop box {b:?} outside the {width}x{height} image `{name}`"
            )));
        }
        Ok(b)
    }
}

/// Crop then resize (bilinear) to `size`×`size`.
pub fn crop_resize(img: &RgbImage, b: CropBox, size: u32) -> RgbImage {
    let cropped = image::imageops::crop_imm(img, b.x, b.y, b.w, b.h).to_image();
    if cropped.width() == size && cropped.height() == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size, size, FilterType::Triangle)
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, ExpressionLabel>> {
    let mut out = BTreeMap::new();
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.deserialize() {
        let (file, label): (String, String) = rec?;
        let l = match label.parse::<usize>() {
            Ok(i) => ExpressionLabel::new(i)?,
            Err(_) => ExpressionLabel::from_name(&label)?,
        };
        out.insert(file, l);
    }
    Ok(out)
}

/// Load every PNG/JPEG in `dir` in lexicographic order of file name.
///
/// A `labels.csv` next to the images attaches expression labels, and it must then cover
/// every loaded file. With `skip_unreadable` set, undecodable files are logged and skipped.
pub fn load_dataset(dir: &Path, crop: &CropSpec, skip_unreadable: bool) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_image_file(p));
    files.sort();
    if files.is_empty() {
        return Err(CisError::Empty("image directory"));
    }
    let label_path = dir.join(LABELS_FILE);
    let label_map = if label_path.exists() {
        Some(read_labels(&label_path)?)
    } else {
        None
    };

    let mut images = Vec::with_capacity(files.len());
    let mut names = Vec::with_capacity(files.len());
    let mut labels = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let rgb = match image::open(&path) {
            Ok(i) => i.to_rgb8(),
            Err(e) if skip_unreadable => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let b = crop.box_for(&name, rgb.width(), rgb.height())?;
        images.push(ImageTensor::from_rgb8(&crop_resize(&rgb, b, IMAGE_SIZE as u32)));
        if let Some(m) = &label_map {
            let l = m
                .get(&name)
                .ok_or_else(|| CisError::Invalid(format!("{LABELS_FILE} has no label for `{name}`")))?;
            labels.push(*l);
        }
        names.push(name);
    }
    if images.is_empty() {
        return Err(CisError::Empty("no decodable images"));
    }
    let labels = label_map.map(|_| labels);
    Dataset::new(images, labels, names, format!("folder({})", dir.display()))
}

/// Load `spec`, which is either `sprites` (generated with `seed`) or an image folder.
pub fn load_named(spec: &str, n: usize, seed: u64) -> Result<Dataset> {
    if spec == "sprites" {
        make_synthetic_sprites(n, seed, N_EXPRESSIONS)
    } else {
        Ok(load_dataset(Path::new(spec), &CropSpec::default(), false)?.truncate(n))
    }
}

// ----- sprites -----

type Rgb = [f64; 3];

fn smooth_coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

fn ellipse_sd(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
}

fn segment_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((px - a.0) * vx + (py - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((px - a.0 - t * vx).powi(2) + (py - a.1 - t * vy).powi(2)).sqrt()
}

/// Distance to a polyline sampled from `f` over `dx ∈ [-w, w]`.
fn curve_dist(px: f64, py: f64, cx: f64, w: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    const SEGMENTS: usize = 10;
    let pt = |i: usize| {
        let dx = -w + 2.0 * w * i as f64 / SEGMENTS as f64;
        (cx + dx, f(dx))
    };
    (0..SEGMENTS)
        .map(|i| segment_dist(px, py, pt(i), pt(i + 1)))
        .fold(f64::INFINITY, f64::min)
}

struct Face {
    bg: Rgb,
    skin: Rgb,
    ink: Rgb,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    class: usize,
}

impl Face {
    fn random<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Self {
        let mut color = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let bg = color(0.0, 1.0);
        let skin = color(0.45, 1.0);
        let ink = color(0.0, 0.2);
        Self {
            bg,
            skin,
            ink,
            cx: 16.0 + rng.random_range(-1.5..1.5),
            cy: 16.5 + rng.random_range(-1.5..1.5),
            rx: rng.random_range(10.0..12.0),
            ry: rng.random_range(12.0..14.0),
            eye_dx: rng.random_range(4.0..5.0),
            class,
        }
    }

    /// Signed distance to the ink (eyes, brows, mouth) for this expression class.
    fn ink_sd(&self, px: f64, py: f64) -> f64 {
        let (cx, cy, ex) = (self.cx, self.cy, self.eye_dx);
        let ey = cy - 3.0;
        let my = cy + 5.0;
        let stroke = 0.7;
        let eyes = |r: f64| ellipse_sd(px, py, cx - ex, ey, r, r).min(ellipse_sd(px, py, cx + ex, ey, r, r));
        let mouth = |w: f64, f: &dyn Fn(f64) -> f64| curve_dist(px, py, cx, w, f) - stroke;
        // brows as two segments; `tilt` > 0 lowers the inner ends
        let brows = |lift: f64, tilt: f64| {
            let by = ey - 3.0 - lift;
            let l = segment_dist(px, py, (cx - ex - 2.0, by - tilt), (cx - ex + 2.0, by + tilt));
            let r = segment_dist(px, py, (cx + ex - 2.0, by + tilt), (cx + ex + 2.0, by - tilt));
            l.min(r) - 0.5
        };
        match self.class {
            // surprise: big round eyes, open mouth, raised brows
            0 => eyes(2.2).min(ellipse_sd(px, py, cx, my + 0.5, 2.2, 3.0)).min(brows(1.5, 0.0)),
            // sadness: small eyes, frown, brows raised at the inner ends
            1 => eyes(1.2)
                .min(mouth(4.0, &|dx| my + 1.0 - 2.0 * (1.0 - (dx / 4.0).powi(2))))
                .min(brows(0.5, -1.2)),
            // neutral: straight mouth
            2 => eyes(1.5).min(mouth(4.0, &|_| my)),
            // joy: wide smile
            3 => eyes(1.5).min(mouth(5.5, &|dx| my - 1.0 + 2.5 * (1.0 - (dx / 5.5).powi(2)))),
            // anger: V-shaped brows, short tight mouth
            4 => eyes(1.3)
                .min(mouth(3.0, &|dx| my + 0.8 * (dx / 3.0).powi(2)))
                .min(brows(0.0, 1.5)),
            // fear: wide eyes, wavy mouth
            5 => eyes(2.0).min(mouth(5.0, &|dx| my + 1.2 * (dx * 1.6).sin())),
            // disgust: one squinting eye, slanted mouth
            _ => {
                let squint = segment_dist(px, py, (cx - ex - 2.0, ey), (cx - ex + 2.0, ey)) - stroke;
                let open = ellipse_sd(px, py, cx + ex, ey, 1.5, 1.5);
                squint.min(open).min(mouth(4.0, &|dx| my + 0.45 * dx))
            }
        }
    }

    fn render(&self) -> ImageTensor {
        let mut pixels = vec![[0.0; 3]; IMAGE_SIZE * IMAGE_SIZE];
        for (i, px) in pixels.iter_mut().enumerate() {
            let (x, y) = ((i % IMAGE_SIZE) as f64 + 0.5, (i / IMAGE_SIZE) as f64 + 0.5);
            let face = smooth_coverage(ellipse_sd(x, y, self.cx, self.cy, self.rx, self.ry));
            let ink = face * smooth_coverage(self.ink_sd(x, y));
            for c in 0..3 {
                let v = self.bg[c] * (1.0 - face) + self.skin[c] * face;
                px[c] = v * (1.0 - ink) + self.ink[c] * ink;
            }
        }
        ImageTensor::from_fn(IMAGE_SIZE, IMAGE_SIZE, |c, y, x| 2.0 * pixels[y * IMAGE_SIZE + x][c] - 1.0)
            .quantize8()
    }
}

/// Draw `n` face-like sprites with uniformly random classes in `0..n_classes`.
pub fn make_synthetic_sprites(n: usize, seed: u64, n_classes: usize) -> Result<Dataset> {
    if n < 1 {
        return Err(CisError::Empty("sprite count"));
    }
    if !(1..=N_EXPRESSIONS).contains(&n_classes) {
        return Err(CisError::Invalid(format!(
            "sprite classes must lie in 1..={N_EXPRESSIONS}, got {n_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..n_classes);
        images.push(Face::random(class, &mut rng).render());
        labels.push(ExpressionLabel::new(class)?);
    }
    let names = (0..n).map(|i| format!("sprite_{i:06}")).collect();
    Dataset::new(images, Some(labels), names, format!("sprites(n={n}, seed={seed})"))
}

// ----- image files -----

/// Save as PNG, or as JPEG when `jpeg_quality` is given (required for `.jpg`/`.jpeg`).
pub fn save_image(img: &ImageTensor, path: &Path, jpeg_quality: Option<u8>) -> Result<()> {
    match format_of(path)? {
        ImageFormat::Png => {
            if jpeg_quality.is_some() {
                return Err(CisError::Invalid("a JPEG quality was given for a PNG path".into()));
            }
            img.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        }
        _ => {
            let qf = jpeg_quality
                .ok_or_else(|| CisError::Invalid("JPEG output needs a quality factor".into()))?;
            std::fs::write(path, encode_jpeg(img, qf)?)?;
        }
    }
    Ok(())
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let format = format_of(path)?;
    let bytes = std::fs::read(path)?;
    match format {
        ImageFormat::Png => {
            let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
            Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
        }
        _ => decode_jpeg(&bytes),
    }
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "jpg" | "jpeg" => Ok(ImageFormat::Jpeg),
        _ => Err(CisError::Invalid(format!(
            "unsupported image extension for {}",
            path.display()
        ))),
    }
}
