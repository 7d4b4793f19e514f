//! Datasets: label manifests, augmentation, splitting and the synthetic
//! multi-label shape generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ppm::{self, RgbImage};
use crate::tensor::Tensor;

/// Independent RNG stream for `(seed, stream, index)`.
///
/// Used wherever per-sample randomness has to be reproducible regardless of
/// the order or thread in which samples are prepared.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image_path: PathBuf,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            class_names: self.class_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Write as CSV. Image paths are stored relative to `base` when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let io_err = |e: csv::Error| Error::data(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header = vec!["image_path".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).map_err(io_err)?;
        for row in &self.rows {
            let rel = row.image_path.strip_prefix(base).unwrap_or(&row.image_path);
            let mut record = vec![rel.display().to_string()];
            record.extend(row.labels.iter().map(|l| l.to_string()));
            w.write_record(&record).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parse a manifest CSV with header `image_path,<class1>,...`.
///
/// Relative image paths are resolved against the manifest's directory and
/// every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::data(format!("manifest {} not found", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: bad header: {e}", path.display())))?
        .clone();
    if header.get(0) != Some("image_path") || header.len() < 2 {
        return Err(Error::data(format!(
            "{}: header must be \"image_path,<class>,...\"",
            path.display()
        )));
    }
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // data rows are numbered from 1, the header being row 0
        let row_no = i + 1;
        let record = record.map_err(|e| Error::data(format!("row {row_no}: {e}")))?;
        if record.len() != class_names.len() + 1 {
            return Err(Error::data(format!(
                "row {row_no}: expected {} fields, got {}",
                class_names.len() + 1,
                record.len()
            )));
        }
        let labels = record
            .iter()
            .skip(1)
            .map(|cell| match cell {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::data(format!(
                    "row {row_no}: label {other:?} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let image_path = base.join(&record[0]);
        if !image_path.is_file() {
            return Err(Error::data(format!(
                "row {row_no}: image {} does not exist",
                image_path.display()
            )));
        }
        rows.push(ManifestRow { image_path, labels });
    }
    Ok(Manifest { class_names, rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Samples decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let samples = manifest
            .rows
            .iter()
            .map(|row| {
                Ok(LabeledSample {
                    image: ppm::decode_image(&row.image_path)?,
                    labels: row.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: manifest.class_names.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// All samples resized to `size × size`, stacked into `[N, 3, size, size]`,
    /// with labels `[N, C]`.
    pub fn batch(&self, indices: &[usize], size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let images = indices
            .iter()
            .map(|&i| {
                let img = resize_bilinear(&self.samples[i].image, size, size)?;
                let dims = img.dims().to_vec();
                img.reshape(&[1, dims[0], dims[1], dims[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = label_matrix(indices.iter().map(|&i| &self.samples[i].labels[..]))?;
        Ok((Tensor::stack_batch(&images)?, labels))
    }
}

/// Stack label vectors into a `[N, C]` float matrix.
pub fn label_matrix<'a>(rows: impl IntoIterator<Item = &'a [u8]>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut c = None;
    for row in rows {
        if *c.get_or_insert(row.len()) != row.len() {
            return Err(Error::data("label vectors have different lengths"));
        }
        data.extend(row.iter().map(|&l| f32::from(l)));
        n += 1;
    }
    match c {
        Some(c) if n > 0 && c > 0 => Tensor::new(&[n, c], data),
        _ => Err(Error::data("no labels to stack")),
    }
}

/// Bilinear resize of a `[C, H, W]` tensor with corner-aligned sampling.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = image.dims() else {
        return Err(Error::config(format!("expected [C, H, W], got {:?}", image.dims())));
    };
    let (c, h, w) = (*c, *h, *w);
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::config("resize to or from an empty image"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let coords = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = if out == 1 {
                    0.0
                } else {
                    o as f64 * (input - 1) as f64 / (out - 1) as f64
                };
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let dims = image.dims();
    let w = dims[dims.len() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Crop and flip parameters drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentChoice {
    pub flip: bool,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl AugmentChoice {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            min_area: 0.6,
            max_area: 1.0,
            min_aspect: 3.0 / 4.0,
            max_aspect: 4.0 / 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && 0.0 < self.min_area
            && self.min_area <= self.max_area
            && self.max_area <= 1.0
            && 0.0 < self.min_aspect
            && self.min_aspect <= self.max_aspect;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid augmentation ranges {self:?}")))
        }
    }

    /// Draw a flip and a scaled crop for an `height × width` image.
    pub fn sample<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> AugmentChoice {
        const ATTEMPTS: usize = 10;
        let flip = rng.random::<f64>() < self.flip_prob;
        let area = (height * width) as f64;
        for _ in 0..ATTEMPTS {
            let frac = rng.random_range(self.min_area..=self.max_area);
            let aspect = (rng.random_range(self.min_aspect.ln()..=self.max_aspect.ln())).exp();
            let cw = (frac * area * aspect).sqrt().round() as usize;
            let ch = (frac * area / aspect).sqrt().round() as usize;
            if (1..=width).contains(&cw) && (1..=height).contains(&ch) {
                return AugmentChoice {
                    flip,
                    x0: rng.random_range(0..=width - cw),
                    y0: rng.random_range(0..=height - ch),
                    width: cw,
                    height: ch,
                };
            }
        }
        AugmentChoice {
            flip,
            ..AugmentChoice::identity(height, width)
        }
    }
}

/// Apply a drawn augmentation: flip, crop, then resize to `target_size`.
pub fn apply_augmentation(
    sample: &LabeledSample,
    choice: AugmentChoice,
    target_size: usize,
) -> Result<LabeledSample> {
    let [c, h, w] = sample.image.dims() else {
        return Err(Error::config("sample image must be [3, H, W]"));
    };
    let (c, h, w) = (*c, *h, *w);
    if choice.x0 + choice.width > w || choice.y0 + choice.height > h || choice.width == 0 || choice.height == 0 {
        return Err(Error::config(format!("crop {choice:?} outside a {h}x{w} image")));
    }
    let source = if choice.flip {
        flip_horizontal(&sample.image)
    } else {
        sample.image.clone()
    };
    let cropped = if (choice.width, choice.height) == (w, h) {
        source
    } else {
        let mut data = Vec::with_capacity(c * choice.width * choice.height);
        for ch in 0..c {
            for y in choice.y0..choice.y0 + choice.height {
                let start = ch * h * w + y * w + choice.x0;
                data.extend_from_slice(&source.data()[start..start + choice.width]);
            }
        }
        Tensor::new(&[c, choice.height, choice.width], data)?
    };
    Ok(LabeledSample {
        image: resize_bilinear(&cropped, target_size, target_size)?,
        labels: sample.labels.clone(),
    })
}

/// Random horizontal flip and scaled crop, resized to `target_size`.
pub fn augment<R: Rng + ?Sized>(
    sample: &LabeledSample,
    config: &AugmentConfig,
    rng: &mut R,
    target_size: usize,
) -> Result<LabeledSample> {
    if target_size < 8 {
        return Err(Error::config(format!("target size {target_size} is below 8")));
    }
    let dims = sample.image.dims();
    let choice = config.sample(dims[1], dims[2], rng);
    apply_augmentation(sample, choice, target_size)
}

/// Seeded shuffle into `⌈fraction·N⌉` training rows and the rest for testing.
pub fn split_train_test(manifest: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if manifest.is_empty() {
        return Err(Error::data("cannot split an empty manifest"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n = manifest.len();
    let n_train = train_count(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n_train);
    Ok((manifest.subset(train), manifest.subset(test)))
}

fn train_count(n: usize, fraction: f64) -> usize {
    // the epsilon absorbs representation error such as 0.8 · 10 = 8.000…01
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(0, n)
}

/// Ground-truth bounding box of one rendered shape, inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeBox {
    pub class: usize,
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl ShapeBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.xmin..=self.xmax).contains(&x) && (self.ymin..=self.ymax).contains(&y)
    }
}

pub const MAX_SYNTH_CLASSES: usize = 8;

pub const SYNTH_CLASS_NAMES: [&str; MAX_SYNTH_CLASSES] = [
    "square", "triangle", "diamond", "disc", "ring", "cross", "stripe", "frame",
];

const SYNTH_COLORS: [[u8; 3]; MAX_SYNTH_CLASSES] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [235, 215, 40],
    [210, 50, 210],
    [40, 210, 220],
    [245, 140, 30],
    [245, 245, 245],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub presence_prob: f64,
}

impl SynthConfig {
    pub fn new(n_images: usize, image_size: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            n_images,
            image_size,
            num_classes,
            seed,
            presence_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 24 {
            return Err(Error::config(format!("synthetic image size {} is below 24", self.image_size)));
        }
        if self.num_classes == 0 || self.num_classes > MAX_SYNTH_CLASSES {
            return Err(Error::config(format!(
                "synthetic class count {} must be in 1..={MAX_SYNTH_CLASSES}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.presence_prob) {
            return Err(Error::config("presence probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn paint(&mut self, x: i64, y: i64, color: [u8; 3], jitter: i16) -> bool {
        let size = self.img.width as i64;
        if x < 0 || y < 0 || x >= size || y >= self.img.height as i64 {
            return false;
        }
        let c = color.map(|v| (i16::from(v) + jitter).clamp(0, 255) as u8);
        self.img.put(x as usize, y as usize, c);
        true
    }
}

/// Draw shape `class` with bounding square `(x0, y0, side)` and return the
/// bounding box of the pixels actually painted.
fn draw_shape<R: Rng + ?Sized>(
    canvas: &mut Canvas,
    class: usize,
    x0: i64,
    y0: i64,
    side: i64,
    rng: &mut R,
) -> Option<ShapeBox> {
    let color = SYNTH_COLORS[class];
    let s = side as f64;
    let stroke = (s * 0.22).max(2.0);
    let (cx, cy) = (x0 as f64 + s / 2.0, y0 as f64 + s / 2.0);
    let mut bounds: Option<ShapeBox> = None;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            // pixel-center coordinates relative to the shape's square, in [0, 1]
            let u = (x - x0) as f64 + 0.5;
            let v = (y - y0) as f64 + 0.5;
            let (du, dv) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match class {
                0 => true,
                1 => v >= s * 0.1 && (u - s / 2.0).abs() <= (v - s * 0.1) * 0.55,
                2 => du.abs() + dv.abs() <= s / 2.0,
                3 => du * du + dv * dv <= (s / 2.0) * (s / 2.0),
                4 => {
                    let r = (du * du + dv * dv).sqrt();
                    r <= s / 2.0 && r >= s / 2.0 - stroke
                }
                5 => du.abs() <= stroke / 2.0 || dv.abs() <= stroke / 2.0,
                6 => (u - v).abs() <= stroke * 0.75,
                _ => {
                    let edge = u.min(v).min(s - u).min(s - v);
                    edge <= stroke
                }
            };
            if inside && canvas.paint(x, y, color, rng.random_range(-12..=12)) {
                let (xu, yu) = (x as usize, y as usize);
                bounds = Some(match bounds {
                    None => ShapeBox { class, xmin: xu, ymin: yu, xmax: xu, ymax: yu },
                    Some(b) => ShapeBox {
                        class,
                        xmin: b.xmin.min(xu),
                        ymin: b.ymin.min(yu),
                        xmax: b.xmax.max(xu),
                        ymax: b.ymax.max(yu),
                    },
                });
            }
        }
    }
    bounds
}

/// Side length range of each archetype as fractions of the image size.
fn size_range(class: usize) -> (f64, f64) {
    match class {
        0 => (0.55, 0.8),
        1 => (0.4, 0.6),
        2 => (0.35, 0.5),
        3 => (0.3, 0.4),
        4 => (0.45, 0.65),
        5 => (0.4, 0.6),
        6 => (0.45, 0.65),
        _ => (0.45, 0.7),
    }
}

/// Render one image containing the classes in `present` (drawn largest first).
pub fn render_synthetic<R: Rng + ?Sized>(
    size: usize,
    present: &[usize],
    rng: &mut R,
) -> Result<(RgbImage, Vec<ShapeBox>)> {
    if size < 24 {
        return Err(Error::config(format!("synthetic image size {size} is below 24")));
    }
    if let Some(&bad) = present.iter().find(|&&c| c >= MAX_SYNTH_CLASSES) {
        return Err(Error::config(format!("no synthetic archetype for class {bad}")));
    }
    let mut canvas = Canvas { img: RgbImage::new(size, size) };
    let base: f64 = rng.random_range(0.3..0.55);
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.0..6.28),
    );
    for y in 0..size {
        for x in 0..size {
            let wave = 0.06 * ((x as f64 * fx + phase).sin() + (y as f64 * fy).cos());
            let v = base + wave + rng.random_range(-0.08..0.08);
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.img.put(x, y, [g, g, g]);
        }
    }
    let mut order: Vec<(usize, i64)> = present
        .iter()
        .map(|&c| {
            let (lo, hi) = size_range(c);
            let side = (rng.random_range(lo..=hi) * size as f64).round() as i64;
            (c, side.max(3))
        })
        .collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut boxes = Vec::with_capacity(order.len());
    for (class, side) in order {
        let max_origin = size as i64 - side;
        let x0 = rng.random_range(0..=max_origin);
        let y0 = rng.random_range(0..=max_origin);
        if let Some(b) = draw_shape(&mut canvas, class, x0, y0, side, rng) {
            boxes.push(b);
        }
    }
    boxes.sort_by_key(|b| b.class);
    Ok((canvas.img, boxes))
}

/// Generated dataset: manifest on disk plus in-memory boxes per row.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub boxes: Vec<Vec<ShapeBox>>,
}

/// Draw the per-class presence bits and render image `index`.
pub fn synth_sample(config: &SynthConfig, index: usize) -> Result<(RgbImage, Vec<u8>, Vec<ShapeBox>)> {
    config.validate()?;
    let mut rng = derived_rng(config.seed, 0x5359_4e54, index as u64);
    let labels: Vec<u8> = (0..config.num_classes)
        .map(|_| u8::from(rng.random::<f64>() < config.presence_prob))
        .collect();
    let present: Vec<usize> = (0..config.num_classes).filter(|&c| labels[c] == 1).collect();
    let (img, boxes) = render_synthetic(config.image_size, &present, &mut rng)?;
    Ok((img, labels, boxes))
}

/// Write `images/*.ppm`, `manifest.csv` and `boxes.csv` under `out_dir`.
pub fn generate_synthetic_dataset(out_dir: impl AsRef<Path>, config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let class_names: Vec<String> = SYNTH_CLASS_NAMES[..config.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::with_capacity(config.n_images);
    let mut all_boxes = Vec::with_capacity(config.n_images);
    for index in 0..config.n_images {
        let (img, labels, boxes) = synth_sample(config, index)?;
        let image_path = image_dir.join(format!("img_{index:05}.ppm"));
        ppm::write_ppm(&image_path, &img)?;
        rows.push(ManifestRow { image_path, labels });
        all_boxes.push(boxes);
    }
    let manifest = Manifest { class_names, rows };
    manifest.write(out_dir.join("manifest.csv"))?;
    write_boxes(out_dir.join("boxes.csv"), &manifest, &all_boxes)?;
    Ok(SynthOutput {
        manifest,
        boxes: all_boxes,
    })
}

fn write_boxes(path: PathBuf, manifest: &Manifest, boxes: &[Vec<ShapeBox>]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let err = |e: csv::Error| Error::data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["image_path", "class", "xmin", "ymin", "xmax", "ymax"])
        .map_err(err)?;
    for (row, row_boxes) in manifest.rows.iter().zip(boxes) {
        let rel = row.image_path.strip_prefix(&base).unwrap_or(&row.image_path);
        for b in row_boxes {
            w.write_record([
                rel.display().to_string(),
                manifest.class_names[b.class].clone(),
                b.xmin.to_string(),
                b.ymin.to_string(),
                b.xmax.to_string(),
                b.ymax.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Read a boxes sidecar, keyed by resolved image path.
pub fn load_boxes(path: impl AsRef<Path>, class_names: &[String]) -> Result<Vec<(PathBuf, ShapeBox)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| Error::data(format!("row {row_no}: {e}")))?;
        if record.len() != 6 {
            return Err(Error::data(format!("row {row_no}: expected 6 fields")));
        }
        let class = class_names
            .iter()
            .position(|c| c == &record[1])
            .ok_or_else(|| Error::data(format!("row {row_no}: unknown class {:?}", &record[1])))?;
        let num = |k: usize| -> Result<usize> {
            record[k]
                .parse()
                .map_err(|_| Error::data(format!("row {row_no}: bad coordinate {:?}", &record[k])))
        };
        out.push((
            base.join(&record[0]),
            ShapeBox {
                class,
                xmin: num(2)?,
                ymin: num(3)?,
                xmax: num(4)?,
                ymax: num(5)?,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, seed: u64) -> LabeledSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledSample {
            image: Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng),
            labels: vec![1, 0, 1],
        }
    }

    fn write_file(path: &Path, contents: &str) {
        fs::write(path, contents).unwrap();
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.ppm", "c.ppm"] {
            ppm::write_ppm(dir.path().join(name), &RgbImage::new(2, 2)).unwrap();
        }
        let path = dir.path().join("m.csv");
        write_file(&path, "image_path,cat,dog\na.ppm,1,0\nb.ppm,0,0\nc.ppm,1,1\n");
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.len(), 3);
        assert_eq!(m.rows[2].labels, vec![1, 1]);

        write_file(&path, "image_path,cat,dog\na.ppm,1,0\nb.ppm,2,0\n");
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");

        write_file(&path, "image_path,cat\nmissing.ppm,1\n");
        assert!(load_manifest(&path).is_err());
        write_file(&path, "path,cat\na.ppm,1\n");
        assert!(load_manifest(&path).is_err());
        assert!(matches!(load_manifest(dir.path().join("nope.csv")), Err(Error::Data(_))));
    }

    #[test]
    fn ten_class_header() {
        let dir = tempfile::tempdir().unwrap();
        let names = [
            "Road Clear",
            "Road Blocked",
            "Building No Damage",
            "Building Minor Damage",
            "Building Major Damage",
            "Building Total Destruction",
            "Water",
            "Tree",
            "Vehicle",
            "Pool",
        ];
        let path = dir.path().join("m.csv");
        write_file(&path, &format!("image_path,{}\n", names.join(",")));
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_classes(), 10);
        assert_eq!(m.class_names[1], "Road Blocked");
    }

    #[test]
    fn identity_augmentation_is_plain_resize() {
        let s = sample(20, 24, 1);
        let out = apply_augmentation(&s, AugmentChoice::identity(20, 24), 16).unwrap();
        assert_eq!(out.image, resize_bilinear(&s.image, 16, 16).unwrap());
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn corner_aligned_resize() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(&img, 3, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn paper_scale_target_is_accepted() {
        let s = sample(40, 40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&s, &AugmentConfig::default(), &mut rng, 448).unwrap();
        assert_eq!(out.image.dims(), &[3, 448, 448]);
        assert!(augment(&s, &AugmentConfig::default(), &mut rng, 7).is_err());
    }

    #[test]
    fn split_sizes() {
        let rows = |n: usize| Manifest {
            class_names: vec!["a".into()],
            rows: (0..n)
                .map(|i| ManifestRow {
                    image_path: PathBuf::from(format!("{i}.ppm")),
                    labels: vec![(i % 2) as u8],
                })
                .collect(),
        };
        let m = rows(10);
        let (train, test) = split_train_test(&m, 0.8, 5).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<_> = train.rows.iter().chain(&test.rows).map(|r| r.image_path.clone()).collect();
        all.sort();
        let mut orig: Vec<_> = m.rows.iter().map(|r| r.image_path.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_train_test(&m, 0.8, 5).unwrap().0, train);

        assert_eq!(train_count(4494, 0.8), 3596);
        let (a, b) = split_train_test(&rows(4494), 0.8, 0).unwrap();
        assert_eq!((a.len(), b.len()), (3596, 898));
        assert!(split_train_test(&rows(0), 0.8, 0).is_err());
        assert!(split_train_test(&m, 1.0, 0).is_err());
    }

    #[test]
    fn synthetic_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let all: Vec<usize> = (0..MAX_SYNTH_CLASSES).collect();
        let (_, boxes) = render_synthetic(32, &all, &mut rng).unwrap();
        assert_eq!(boxes.iter().map(|b| b.class).collect::<Vec<_>>(), all);
        let (img, boxes) = render_synthetic(32, &[], &mut rng).unwrap();
        assert!(boxes.is_empty());
        assert_eq!((img.width, img.height), (32, 32));
        assert!(render_synthetic(16, &[0], &mut rng).is_err());
    }

    #[test]
    fn boxes_cover_painted_class_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for class in 0..MAX_SYNTH_CLASSES {
            let (img, boxes) = render_synthetic(32, &[class], &mut rng).unwrap();
            let b = boxes[0];
            assert!(b.xmax - b.xmin >= 8 && b.ymax - b.ymin >= 8, "{class}: {b:?}");
            // the color never appears outside the box
            let target = SYNTH_COLORS[class];
            for y in 0..32 {
                for x in 0..32 {
                    let p = img.get(x, y);
                    let close = (0..3).all(|k| (i16::from(p[k]) - i16::from(target[k])).abs() <= 12);
                    if close {
                        assert!(b.contains(x, y), "class {class} pixel ({x},{y}) outside {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn generated_dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig::new(200, 32, 6, 21);
        let out = generate_synthetic_dataset(dir.path(), &config).unwrap();
        let m = load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m, out.manifest);
        for c in 0..6 {
            let prevalence = m.rows.iter().filter(|r| r.labels[c] == 1).count() as f64 / 200.0;
            assert!((0.3..=0.7).contains(&prevalence), "class {c}: {prevalence}");
        }
        let boxes = load_boxes(dir.path().join("boxes.csv"), &m.class_names).unwrap();
        let total: usize = out.boxes.iter().map(Vec::len).sum();
        assert_eq!(boxes.len(), total);
        // labels agree with the recorded shapes
        for (row, row_boxes) in m.rows.iter().zip(&out.boxes) {
            let from_boxes: Vec<u8> = (0..6)
                .map(|c| u8::from(row_boxes.iter().any(|b| b.class == c)))
                .collect();
            assert_eq!(from_boxes, row.labels);
        }
        let ds = Dataset::from_manifest(&m).unwrap();
        let (x, y) = ds.batch(&[0, 1, 2], 32).unwrap();
        assert_eq!(x.dims(), &[3, 3, 32, 32]);
        assert_eq!(y.dims(), &[3, 6]);
    }

    #[test]
    fn forced_full_subset_labels() {
        let config = SynthConfig {
            presence_prob: 1.0,
            ..SynthConfig::new(1, 32, 8, 0)
        };
        let (_, labels, boxes) = synth_sample(&config, 0).unwrap();
        assert_eq!(labels, vec![1; 8]);
        assert_eq!(boxes.len(), 8);
        let none = SynthConfig {
            presence_prob: 0.0,
            ..config
        };
        assert_eq!(synth_sample(&none, 0).unwrap().1, vec![0; 8]);
    }

    proptest! {
        #[test]
        fn double_flip_is_identity(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let s = sample(h, w, seed);
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&s.image)), s.image);
        }

        #[test]
        fn augmentation_keeps_labels_and_range(seed in any::<u64>(), h in 8usize..30, w in 8usize..30) {
            let s = sample(h, w, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let out = augment(&s, &AugmentConfig::default(), &mut rng, 12).unwrap();
            prop_assert_eq!(&out.labels, &s.labels);
            prop_assert_eq!(out.image.dims(), &[3, 12, 12]);
            prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn split_is_deterministic_partition(n in 1usize..200, seed in any::<u64>()) {
            let m = Manifest {
                class_names: vec!["a".into()],
                rows: (0..n).map(|i| ManifestRow { image_path: PathBuf::from(i.to_string()), labels: vec![0] }).collect(),
            };
            let (a, b) = split_train_test(&m, 0.8, seed).unwrap();
            let (a2, b2) = split_train_test(&m, 0.8, seed).unwrap();
            prop_assert_eq!(&a, &a2);
            prop_assert_eq!(&b, &b2);
            prop_assert_eq!(a.len() + b.len(), n);
            prop_assert_eq!(a.len(), (0.8 * n as f64 - 1e-9).ceil() as usize);
        }
    }
}
