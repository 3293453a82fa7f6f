//! Datasets: manifest files, PNG I/O, the synthetic shape generator and
//! random cropping.
//!
//! A dataset directory holds a `manifest.tsv`:
//!
//! ```text
//! # clickseg-manifest v1
//! # mean=0.485,0.456,0.406 std=0.229,0.224,0.225
//! images/000000.png<TAB>masks/000000.png<TAB>ellipse<TAB>synth-000000
//! ```
//!
//! Paths are relative to the manifest. Images are 8-bit PNGs, masks
//! single-channel PNGs where values ≥ 128 are foreground.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb};
pub use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{reflect_pad_image, reflect_pad_mask, ImageTensor, Mask};
use crate::numeric::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "# clickseg-manifest v1";

/// One image with its ground-truth object mask, normalised for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor<f32>,
    pub mask: Mask,
    pub class_label: String,
    pub id: String,
}

impl Sample {
    pub fn new(image: ImageTensor<f32>, mask: Mask, class_label: String, id: String) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Sample {
                id,
                reason: format!("image {:?} vs mask {:?}", image.dims(), mask.dims()),
            });
        }
        Ok(Self {
            image,
            mask,
            class_label,
            id,
        })
    }
}

/// A sample that could not be used, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

/// An 8-bit sample as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub rgb: RgbImage,
    pub mask: Mask,
    pub class_label: String,
    pub id: String,
}

impl RawSample {
    pub fn to_sample(&self, norm: &Normalization) -> Sample {
        Sample {
            image: norm.apply(&self.rgb),
            mask: self.mask.clone(),
            class_label: self.class_label.clone(),
            id: self.id.clone(),
        }
    }
}

/// Per-channel statistics of `pixel / 255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Channel mean and standard deviation over every pixel of `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let m = sum[c] / n;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
        out
    }

    pub fn apply(&self, img: &RgbImage) -> ImageTensor<f32> {
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((h * w * 3) as usize);
        for p in img.pixels() {
            for c in 0..3 {
                data.push((p.0[c] as f32 / 255.0 - self.mean[c]) / self.std[c]);
            }
        }
        ImageTensor::new(Tensor::new([h as usize, w as usize, 3], data).expect("sized by the image"))
            .expect("three channels")
    }

    fn header(&self) -> String {
        let f = |v: &[f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!("# mean={} std={}", f(&self.mean), f(&self.std))
    }

    fn parse_header(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed normalisation header `{line}`"));
        let mut out = Self::default();
        let body = line.trim_start_matches('#').trim();
        let mut seen = 0;
        for part in body.split_whitespace() {
            let (key, vals) = part.split_once('=').ok_or_else(bad)?;
            let parsed: Vec<f32> = vals
                .split(',')
                .map(|v| v.parse::<f32>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let arr: [f32; 3] = parsed.try_into().map_err(|_| bad())?;
            match key {
                "mean" => out.mean = arr,
                "std" if arr.iter().all(|&s| s > 0.0) => out.std = arr,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 2 {
            return Err(bad());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub class_label: String,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub normalization: Normalization,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_MAGIC) {
            return Err(Error::Config(format!("manifest must start with `{MANIFEST_MAGIC}`")));
        }
        let mut normalization = None;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with('#') {
                if line.contains("mean=") {
                    normalization = Some(Normalization::parse_header(line)?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, mask, class_label, id] = fields[..] else {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    n + 2,
                    fields.len()
                )));
            };
            entries.push(ManifestEntry {
                image: image.into(),
                mask: mask.into(),
                class_label: class_label.into(),
                id: id.into(),
            });
        }
        Ok(Self {
            normalization: normalization.unwrap_or_default(),
            entries,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC}\n{}\n", self.normalization.header());
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.image.display(),
                e.mask.display(),
                e.class_label,
                e.id
            );
        }
        out
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image(e.to_string()))
}

/// Decodes a mask image, binarising at 50% gray.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let gray = image::load_from_memory(bytes)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Mask::from_bits(h as usize, w as usize, gray.pixels().map(|p| p.0[0] >= 128).collect())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// `{0, 255}` single-channel PNG bytes.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    encode_png(&image::DynamicImage::ImageLuma8(mask_to_gray(mask)))
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    encode_png(&image::DynamicImage::ImageRgb8(img.clone()))
}

fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads one manifest entry. Every failure names the sample id.
pub fn load_raw(root: &Path, entry: &ManifestEntry) -> Result<RawSample> {
    let fail = |reason: String| Error::Sample {
        id: entry.id.clone(),
        reason,
    };
    let rgb = read_rgb(&root.join(&entry.image)).map_err(|e| fail(e.to_string()))?;
    let mask = read_mask(&root.join(&entry.mask)).map_err(|e| fail(e.to_string()))?;
    let (w, h) = rgb.dimensions();
    if (h as usize, w as usize) != mask.dims() {
        return Err(fail(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    if mask.is_empty() {
        return Err(fail("mask has no foreground".into()));
    }
    Ok(RawSample {
        rgb,
        mask,
        class_label: entry.class_label.clone(),
        id: entry.id.clone(),
    })
}

/// Loaded samples plus the entries that failed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkippedSample>,
    pub normalization: Normalization,
}

/// Reads `manifest` (or `root/manifest.tsv` when `root` is a directory).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with(root, None)
}

/// Like [`load_dataset`], but normalises with `normalization` instead of the
/// manifest header when given (a trained model's statistics).
pub fn load_dataset_with(root: &Path, normalization: Option<Normalization>) -> Result<Dataset> {
    let manifest_path = if root.is_dir() {
        root.join(MANIFEST_FILE)
    } else {
        root.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::parse(&text)?;
    let norm = normalization.unwrap_or(manifest.normalization);
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.entries {
        match load_raw(&base, entry) {
            Ok(raw) => samples.push(raw.to_sample(&norm)),
            Err(e) => skipped.push(SkippedSample {
                id: entry.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(Dataset {
        samples,
        skipped,
        normalization: norm,
    })
}

/// Writes PNGs plus a manifest whose header carries the channel statistics
/// of these samples.
pub fn write_dataset(dir: &Path, samples: &[RawSample]) -> Result<Manifest> {
    let normalization = Normalization::from_images(samples.iter().map(|s| &s.rgb));
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:06}.png"));
        let mask = PathBuf::from(format!("masks/{i:06}.png"));
        write_file(&dir.join(&image), &encode_rgb_png(&s.rgb)?)?;
        write_file(&dir.join(&mask), &encode_mask_png(&s.mask)?)?;
        entries.push(ManifestEntry {
            image,
            mask,
            class_label: s.class_label.clone(),
            id: s.id.clone(),
        });
    }
    let manifest = Manifest {
        normalization,
        entries,
    };
    write_file(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// Crops a `size × size` window uniformly among windows that contain at
/// least one foreground pixel; images smaller than `size` are reflect-padded
/// first.
pub fn random_crop<R: Rng>(sample: &Sample, size: usize, patch: usize, rng: &mut R) -> Result<Sample> {
    if size == 0 || patch == 0 || size % patch != 0 {
        return Err(Error::Divisibility {
            axis: "crop size",
            size,
            patch,
        });
    }
    let (h0, w0) = sample.image.dims();
    let (h, w) = (h0.max(size), w0.max(size));
    let (image, mask) = if (h, w) != (h0, w0) {
        (
            reflect_pad_image(&sample.image, h, w),
            reflect_pad_mask(&sample.mask, h, w),
        )
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    // integral image of the mask for O(1) window counts
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0u32;
        for j in 0..w {
            row += mask.get(i, j) as u32;
            integral[(i + 1) * (w + 1) + j + 1] = integral[i * (w + 1) + j + 1] + row;
        }
    }
    let count = |t: usize, l: usize| {
        let (b, r) = (t + size, l + size);
        integral[b * (w + 1) + r] + integral[t * (w + 1) + l]
            - integral[t * (w + 1) + r]
            - integral[b * (w + 1) + l]
    };
    let windows: Vec<(usize, usize)> = (0..=h - size)
        .flat_map(|t| (0..=w - size).map(move |l| (t, l)))
        .filter(|&(t, l)| count(t, l) > 0)
        .collect();
    if windows.is_empty() {
        return Err(Error::Sample {
            id: sample.id.clone(),
            reason: "no crop window contains foreground".into(),
        });
    }
    let (t, l) = windows[rng.random_range(0..windows.len())];
    Ok(Sample {
        image: image.crop(t, l, size, size)?,
        mask: mask.crop(t, l, size, size)?,
        class_label: sample.class_label.clone(),
        id: sample.id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    Bar,
    MultiPart,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Polygon,
        ShapeKind::Bar,
        ShapeKind::MultiPart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Polygon => "polygon",
            ShapeKind::Bar => "bar",
            ShapeKind::MultiPart => "multi_part",
        }
    }
}

/// Relative frequency of each shape kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMix {
    pub ellipse: f64,
    pub polygon: f64,
    pub bar: f64,
    pub multi_part: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        Self {
            ellipse: 0.4,
            polygon: 0.4,
            bar: 0.1,
            multi_part: 0.1,
        }
    }
}

impl ShapeMix {
    pub fn only(kind: ShapeKind) -> Self {
        let mut m = Self {
            ellipse: 0.0,
            polygon: 0.0,
            bar: 0.0,
            multi_part: 0.0,
        };
        *m.weight_mut(kind) = 1.0;
        m
    }

    fn weight_mut(&mut self, kind: ShapeKind) -> &mut f64 {
        match kind {
            ShapeKind::Ellipse => &mut self.ellipse,
            ShapeKind::Polygon => &mut self.polygon,
            ShapeKind::Bar => &mut self.bar,
            ShapeKind::MultiPart => &mut self.multi_part,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.ellipse, self.polygon, self.bar, self.multi_part]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub mix: ShapeMix,
    /// Offset added to every sample index, so disjoint splits can share a seed.
    pub first_index: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            height: 112,
            width: 112,
            mix: ShapeMix::default(),
            first_index: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, patch: usize) -> Result<()> {
        let w = self.mix.weights();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("shape mix weights must be non-negative with a positive sum: {w:?}")));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("synthetic canvas must be at least 32x32".into()));
        }
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} must be a multiple of the patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// What was drawn for one synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePlan {
    pub kind: ShapeKind,
    /// Number of disjoint parts (connected components).
    pub parts: usize,
}

type Region = Box<dyn Fn(f64, f64) -> bool>;

fn ellipse_region(cy: f64, cx: f64, ry: f64, rx: f64, theta: f64) -> Region {
    let (s, c) = theta.sin_cos();
    Box::new(move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    })
}

/// Star-shaped polygon: vertices at increasing angles around the centre.
fn polygon_region<R: Rng>(cy: f64, cx: f64, rmin: f64, rmax: f64, rng: &mut R) -> Region {
    let n = rng.random_range(5..=9);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    let verts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = offset + std::f64::consts::TAU * (k as f64 + rng.random_range(-0.3..0.3)) / n as f64;
            let r = rng.random_range(rmin..rmax);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    Box::new(move |y, x| {
        // even-odd crossing test
        let mut inside = false;
        let mut j = verts.len() - 1;
        for i in 0..verts.len() {
            let (yi, xi) = verts[i];
            let (yj, xj) = verts[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    })
}

/// Pixels whose centres lie within `width / 2` of a segment's centre line.
fn bar_region(cy: f64, cx: f64, length: f64, width: f64, theta: f64) -> Region {
    let (s, c) = theta.sin_cos();
    Box::new(move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= length / 2.0 && across.abs() <= width / 2.0
    })
}

fn rasterize(h: usize, w: usize, region: &dyn Fn(f64, f64) -> bool) -> Mask {
    Mask::from_fn(h, w, |i, j| region(i as f64, j as f64))
}

/// Every pixel of `a` is further than `gap` (Chebyshev) from every pixel of `b`.
fn separated(a: &Mask, b: &Mask, gap: usize) -> bool {
    let (h, w) = a.dims();
    for (i, j) in a.positions() {
        for y in i.saturating_sub(gap)..=(i + gap).min(h - 1) {
            for x in j.saturating_sub(gap)..=(j + gap).min(w - 1) {
                if b.get(y, x) {
                    return false;
                }
            }
        }
    }
    true
}

fn draw_shape<R: Rng>(kind: ShapeKind, h: usize, w: usize, rng: &mut R) -> (Mask, usize) {
    let side = h.min(w) as f64;
    let centre = |rng: &mut R, margin: f64| {
        (
            rng.random_range(margin..h as f64 - margin),
            rng.random_range(margin..w as f64 - margin),
        )
    };
    loop {
        let (mask, parts) = match kind {
            ShapeKind::Ellipse => {
                let (cy, cx) = centre(rng, side * 0.3);
                let ry = rng.random_range(side * 0.12..side * 0.3);
                let rx = rng.random_range(side * 0.12..side * 0.3);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                (rasterize(h, w, &ellipse_region(cy, cx, ry, rx, theta)), 1)
            }
            ShapeKind::Polygon => {
                let (cy, cx) = centre(rng, side * 0.3);
                let region = polygon_region(cy, cx, side * 0.12, side * 0.3, rng);
                (rasterize(h, w, &region), 1)
            }
            ShapeKind::Bar => {
                let (cy, cx) = centre(rng, side * 0.35);
                let length = rng.random_range(side * 0.4..side * 0.75);
                let width = rng.random_range(2.0..=6.0);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                (rasterize(h, w, &bar_region(cy, cx, length, width, theta)), 1)
            }
            ShapeKind::MultiPart => {
                let n = rng.random_range(2..=3);
                let mut union = Mask::zeros(h, w);
                let mut ok = true;
                for _ in 0..n {
                    let (cy, cx) = centre(rng, side * 0.18);
                    let ry = rng.random_range(side * 0.1..side * 0.18);
                    let rx = rng.random_range(side * 0.1..side * 0.18);
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let part = rasterize(h, w, &ellipse_region(cy, cx, ry, rx, theta));
                    if part.is_empty() || !separated(&part, &union, 4) {
                        ok = false;
                        break;
                    }
                    for (i, j) in part.positions() {
                        union.set(i, j, true);
                    }
                }
                if !ok {
                    continue;
                }
                (union, n)
            }
        };
        if mask.count() >= 16 {
            return (mask, parts);
        }
    }
}

fn random_colour<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

/// Low-frequency stripes plus pixel noise around a base colour.
struct Texture {
    base: [f64; 3],
    freq: (f64, f64),
    phase: f64,
    amplitude: f64,
    noise: f64,
}

impl Texture {
    fn random<R: Rng>(rng: &mut R, base: [f64; 3]) -> Self {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let f = rng.random_range(0.05..0.4);
        Self {
            base,
            freq: (f * angle.sin(), f * angle.cos()),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude: rng.random_range(5.0..25.0),
            noise: rng.random_range(2.0..12.0),
        }
    }

    fn sample<R: Rng>(&self, i: usize, j: usize, rng: &mut R) -> Rgb<u8> {
        let wave = self.amplitude * (self.freq.0 * i as f64 + self.freq.1 * j as f64 + self.phase).sin();
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = self.base[c] + wave + rng.random_range(-self.noise..=self.noise);
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    }
}

fn colour_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Generates sample `index` of the synthetic set; a pure function of
/// `(config.seed, index)`.
pub fn synth_sample(config: &SynthConfig, index: u64) -> (RawSample, ShapePlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let weights = config.mix.weights();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut kind = ShapeKind::ALL[0];
    for (k, &wgt) in ShapeKind::ALL.iter().zip(&weights) {
        if wgt > 0.0 {
            kind = *k;
            if pick < wgt {
                break;
            }
            pick -= wgt;
        }
    }
    let (h, w) = (config.height, config.width);
    let (mask, parts) = draw_shape(kind, h, w, &mut rng);
    let bg = random_colour(&mut rng);
    let fg = loop {
        let c = random_colour(&mut rng);
        if colour_distance(&c, &bg) >= 90.0 {
            break c;
        }
    };
    let bg_tex = Texture::random(&mut rng, bg);
    let fg_tex = Texture::random(&mut rng, fg);
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let tex = if mask.get(i, j) { &fg_tex } else { &bg_tex };
            rgb.put_pixel(j as u32, i as u32, tex.sample(i, j, &mut rng));
        }
    }
    (
        RawSample {
            rgb,
            mask,
            class_label: kind.name().to_string(),
            id: format!("synth-{:06}", index),
        },
        ShapePlan { kind, parts },
    )
}

/// Deterministic synthetic dataset: `count` samples starting at
/// `first_index`.
pub fn synth_generate(config: &SynthConfig) -> Vec<RawSample> {
    (0..config.count as u64)
        .map(|k| synth_sample(config, config.first_index + k).0)
        .collect()
}
