//! Image/label-map datasets: class registry, PNG I/O, per-class mask
//! splitting, soft-edge conditioning images, prompt templates and the
//! procedural toy dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

pub type ClassId = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub name: String,
    pub rgb: [u8; 3],
    pub prompt_noun: String,
    pub z_order: i32,
}

/// Semantic-class registry shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub entries: Vec<ClassEntry>,
    #[serde(default)]
    pub background_id: ClassId,
    pub dataset_name: String,
}

impl ClassMap {
    pub fn new(
        entries: Vec<ClassEntry>,
        background_id: ClassId,
        dataset_name: &str,
    ) -> Result<Self> {
        let map = ClassMap {
            entries,
            background_id,
            dataset_name: dataset_name.to_string(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut z = BTreeSet::new();
        for e in &self.entries {
            ensure!(e.class_id != 0, "class `{}` uses reserved id 0", e.name);
            ensure!(
                e.class_id != self.background_id,
                "class `{}` reuses the background id {}",
                e.name,
                self.background_id
            );
            ensure!(ids.insert(e.class_id), "duplicate class id {}", e.class_id);
            ensure!(z.insert(e.z_order), "duplicate z_order {}", e.z_order);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: ClassMap =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("class map serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, class_id: ClassId) -> Result<&ClassEntry> {
        self.entries
            .iter()
            .find(|e| e.class_id == class_id)
            .ok_or_else(|| Error::Lookup(format!("class id {class_id} is not in the class map")))
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.entries.iter().any(|e| e.class_id == class_id)
    }

    pub fn is_valid_label(&self, v: ClassId) -> bool {
        v == self.background_id || self.contains(v)
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        let mut ids: Vec<_> = self.entries.iter().map(|e| e.class_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn n_classes(&self) -> usize {
        self.entries.len()
    }

    /// Dense index used by pixel classifiers: background is 0, classes
    /// follow in ascending id order.
    pub fn dense_index(&self, label: ClassId) -> usize {
        if label == self.background_id {
            return 0;
        }
        1 + self
            .class_ids()
            .iter()
            .position(|&c| c == label)
            .expect("label validated against class map")
    }

    pub fn label_of_dense(&self, index: usize) -> ClassId {
        if index == 0 {
            self.background_id
        } else {
            self.class_ids()[index - 1]
        }
    }

    /// Display color of a label; background renders black.
    pub fn color(&self, label: ClassId) -> [u8; 3] {
        self.get(label).map(|e| e.rgb).unwrap_or([0, 0, 0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

/// One image with its multi-class label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `H × W × 3`.
    pub image: Array3<u8>,
    pub label_map: Array2<ClassId>,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self, class_map: &ClassMap) -> Result<()> {
        let (h, w) = self.label_map.dim();
        ensure!(
            self.image.dim() == (h, w, 3),
            "record {}: image is {:?} but label map is {h}×{w}",
            self.id,
            self.image.dim()
        );
        if let Some(&bad) = self
            .label_map
            .iter()
            .find(|&&v| !class_map.is_valid_label(v))
        {
            return Err(Error::Validation(format!(
                "record {}: label value {bad} is not in the class map",
                self.id
            )));
        }
        Ok(())
    }

    pub fn classes_present(&self, class_map: &ClassMap) -> BTreeSet<ClassId> {
        self.label_map
            .iter()
            .copied()
            .filter(|&v| v != class_map.background_id)
            .collect()
    }
}

/// Per-class binary mask; values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub class_id: ClassId,
    pub mask: Array2<u8>,
}

impl BinaryMask {
    pub fn new(class_id: ClassId, mask: Array2<u8>) -> Result<Self> {
        ensure!(
            mask.iter().all(|&v| v <= 1),
            "mask for class {class_id} has values other than 0/1"
        );
        Ok(BinaryMask { class_id, mask })
    }

    pub fn full(class_id: ClassId, h: usize, w: usize) -> Self {
        BinaryMask {
            class_id,
            mask: Array2::ones((h, w)),
        }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// Grows the mask by a Euclidean disk of `radius` pixels.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let (h, w) = self.mask.dim();
        let r = radius as isize;
        let mut out = self.mask.clone();
        for ((y, x), &v) in self.mask.indexed_iter() {
            if v == 0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if dy * dy + dx * dx <= r * r
                        && yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                    {
                        out[[yy as usize, xx as usize]] = 1;
                    }
                }
            }
        }
        BinaryMask {
            class_id: self.class_id,
            mask: out,
        }
    }

    /// Nearest-neighbour resampling, which keeps the mask binary.
    pub fn resample_nearest(&self, h: usize, w: usize) -> BinaryMask {
        let (sh, sw) = self.mask.dim();
        let mask = Array2::from_shape_fn((h, w), |(y, x)| self.mask[[(y * sh) / h, (x * sw) / w]]);
        BinaryMask {
            class_id: self.class_id,
            mask,
        }
    }
}

/// Soft boundary image of one class mask, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeImage<T: Scalar> {
    pub class_id: ClassId,
    pub edges: Array2<T>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestLine {
    image: PathBuf,
    mask: PathBuf,
    split: Split,
    id: String,
}

/// Loads a line-delimited JSON manifest of `{image, mask, split, id}`.
/// Relative paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path, class_map: &ClassMap) -> Result<Vec<SampleRecord>> {
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let record = SampleRecord {
            image: read_rgb_png(&base.join(&entry.image))?,
            label_map: read_label_png(&base.join(&entry.mask))?,
            split: entry.split,
            id: entry.id,
        };
        record.validate(class_map)?;
        out.push(record);
    }
    Ok(out)
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.jsonl` under
/// `dir`, returning the manifest path.
pub fn write_dataset(
    records: &[SampleRecord],
    dir: &Path,
    class_map: &ClassMap,
) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let manifest = dir.join("manifest.jsonl");
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let image = PathBuf::from("images").join(format!("{}.png", r.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", r.id));
        write_rgb_png(&dir.join(&image), &r.image)?;
        write_label_png(&dir.join(&mask), &r.label_map, class_map)?;
        let line = ManifestLine {
            image,
            mask,
            split: r.split,
            id: r.id.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).unwrap())
            .map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<u8>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_rgb_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, c) = image.dim();
    ensure!(c == 3, "expected 3 channels, got {c}");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let data: Vec<u8> = image.iter().copied().collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an 8-bit indexed PNG whose palette holds the class colors, so the
/// raw pixel value is the class id.
pub fn write_label_png(
    path: &Path,
    label_map: &Array2<ClassId>,
    class_map: &ClassMap,
) -> Result<()> {
    let (h, w) = label_map.dim();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let max_label = label_map.iter().copied().max().unwrap_or(0);
    let max_entry = class_map
        .entries
        .iter()
        .map(|e| e.class_id)
        .chain([class_map.background_id, max_label])
        .max()
        .unwrap_or(0) as usize;
    let mut palette = vec![0u8; 3 * (max_entry + 1)];
    for e in &class_map.entries {
        palette[3 * e.class_id as usize..3 * e.class_id as usize + 3].copy_from_slice(&e.rgb);
    }
    let data: Vec<u8> = label_map.iter().copied().collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a label map from an 8-bit indexed or grayscale PNG, taking raw
/// pixel values as class ids.
pub fn read_label_png(path: &Path) -> Result<Array2<ClassId>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight
        || !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::format(
            path,
            format!("label maps must be 8-bit indexed or grayscale, found {color:?}/{depth:?}"),
        ));
    }
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w];
        for x in 0..w {
            out[[y, x]] = row[x];
        }
    }
    Ok(out)
}

/// One binary mask per class present in `label_map`, ascending by id.
pub fn split_label_map(
    label_map: &Array2<ClassId>,
    class_map: &ClassMap,
) -> Result<Vec<BinaryMask>> {
    let mut present = BTreeSet::new();
    for &v in label_map.iter() {
        ensure!(
            class_map.is_valid_label(v),
            "label value {v} is not in the class map"
        );
        if v != class_map.background_id {
            present.insert(v);
        }
    }
    Ok(present
        .into_iter()
        .map(|c| BinaryMask {
            class_id: c,
            mask: label_map.mapv(|v| u8::from(v == c)),
        })
        .collect())
}

/// Inverse of [`split_label_map`] for disjoint masks.
pub fn merge_masks(
    masks: &[BinaryMask],
    h: usize,
    w: usize,
    background_id: ClassId,
) -> Array2<ClassId> {
    let mut out = Array2::from_elem((h, w), background_id);
    for m in masks {
        ndarray::Zip::from(&mut out).and(&m.mask).for_each(|o, &v| {
            if v == 1 {
                *o = m.class_id;
            }
        });
    }
    out
}

/// Pixels where a 3×3-cross dilation and erosion disagree; the frame
/// border counts as outside the mask.
pub fn hard_boundary(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let at = |y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            mask[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let cross = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)].map(|(dy, dx)| at(y + dy, x + dx));
        let dil = cross.iter().copied().max().unwrap();
        let ero = cross.iter().copied().min().unwrap();
        u8::from(dil != ero)
    })
}

/// Hard boundary blurred by a radially truncated Gaussian (support
/// `4·sigma`), peak-normalised to 1.
pub fn extract_soft_edges<T: Scalar>(mask: &BinaryMask, blur_sigma: f64) -> Result<EdgeImage<T>> {
    ensure!(
        blur_sigma >= 0.0 && blur_sigma.is_finite(),
        "blur_sigma must be ≥ 0"
    );
    let boundary = hard_boundary(&mask.mask);
    let (h, w) = boundary.dim();
    if blur_sigma == 0.0 {
        return Ok(EdgeImage {
            class_id: mask.class_id,
            edges: boundary.mapv(|v| T::lit(v as f64)),
        });
    }
    let support = 4.0 * blur_sigma;
    let r = support.floor() as isize;
    let mut kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 <= support * support {
                kernel.push((dy, dx, (-d2 / (2.0 * blur_sigma * blur_sigma)).exp()));
            }
        }
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for ((y, x), &b) in boundary.indexed_iter() {
        if b == 0 {
            continue;
        }
        for &(dy, dx, k) in &kernel {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc[[yy as usize, xx as usize]] += k;
            }
        }
    }
    let peak = acc.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        acc.mapv_inplace(|v| v / peak);
    }
    Ok(EdgeImage {
        class_id: mask.class_id,
        edges: acc.mapv(T::lit),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Organ,
    Scene,
}

pub fn make_prompt(class_id: ClassId, class_map: &ClassMap, kind: PromptKind) -> Result<String> {
    match kind {
        PromptKind::Organ => {
            let e = class_map.get(class_id)?;
            Ok(format!(
                "an image of {} in {}",
                e.prompt_noun, class_map.dataset_name
            ))
        }
        PromptKind::Scene => Ok(format!("an image in {}", class_map.dataset_name)),
    }
}

/// Prompt for the background-region model.
pub fn background_prompt(class_map: &ClassMap) -> String {
    format!("an image of background in {}", class_map.dataset_name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Per-pixel Gaussian noise std, in 0–255 units.
    pub noise_std: f64,
    /// Amplitude of the class-specific stripe pattern, in 0–255 units.
    pub pattern_amp: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            noise_std: 6.0,
            pattern_amp: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobShape {
    Ellipse,
    /// Boxier `|x|⁴ + |y|⁴ ≤ 1` blobs; used for the simulated-mask source.
    Superellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub texture: TextureParams,
    /// The last `n_test` records are marked [`Split::Test`].
    #[serde(default)]
    pub n_test: usize,
    #[serde(default = "default_shape")]
    pub shape: BlobShape,
}

fn default_shape() -> BlobShape {
    BlobShape::Ellipse
}

impl ToyConfig {
    pub fn new(n_samples: usize, image_size: usize, n_classes: usize) -> Self {
        ToyConfig {
            n_samples,
            image_size,
            n_classes,
            texture: TextureParams::default(),
            n_test: 0,
            shape: BlobShape::Ellipse,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size >= 16,
            "image_size must be ≥ 16, got {}",
            self.image_size
        );
        ensure!(
            (2..=6).contains(&self.n_classes),
            "n_classes must be in [2, 6], got {}",
            self.n_classes
        );
        ensure!(self.n_test <= self.n_samples, "n_test exceeds n_samples");
        Ok(())
    }
}

const TOY_CLASSES: [(&str, [u8; 3]); 6] = [
    ("abdominal wall", [205, 120, 135]),
    ("liver", [135, 35, 40]),
    ("gall bladder", [85, 165, 70]),
    ("fat", [225, 205, 90]),
    ("ligament", [240, 235, 225]),
    ("gastrointestinal tract", [115, 85, 175]),
];
const TOY_BACKGROUND: [u8; 3] = [55, 48, 42];

/// Class map of the toy dataset, named after surgical anatomy.
pub fn toy_class_map(n_classes: usize) -> ClassMap {
    let entries = TOY_CLASSES
        .iter()
        .take(n_classes)
        .enumerate()
        .map(|(i, (name, rgb))| ClassEntry {
            class_id: i as ClassId + 1,
            name: name.to_string(),
            rgb: *rgb,
            prompt_noun: name.to_string(),
            z_order: i as i32 + 1,
        })
        .collect();
    ClassMap {
        entries,
        background_id: 0,
        dataset_name: "cholec".to_string(),
    }
}

/// Mean texture color of a toy class (or the background for id 0).
pub fn toy_base_color(class_id: ClassId) -> [u8; 3] {
    if class_id == 0 {
        TOY_BACKGROUND
    } else {
        TOY_CLASSES[class_id as usize - 1].1
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64, shape: BlobShape) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match shape {
            BlobShape::Ellipse => u * u + v * v <= 1.0,
            BlobShape::Superellipse => u.powi(4) + v.powi(4) <= 1.0,
        }
    }
}

fn random_label_map(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Array2<ClassId> {
    let n = cfg.image_size;
    let mut label = Array2::<ClassId>::zeros((n, n));
    let mut classes: Vec<ClassId> = (1..=cfg.n_classes as ClassId)
        .filter(|_| rng.random_bool(0.75))
        .collect();
    if classes.is_empty() {
        classes.push(rng.random_range(1..=cfg.n_classes as ClassId));
    }
    let size = n as f64;
    for c in classes {
        for _attempt in 0..40 {
            let blob = Blob {
                cy: rng.random_range(0.15 * size..0.85 * size),
                cx: rng.random_range(0.15 * size..0.85 * size),
                ry: rng.random_range(size / 9.0..size / 4.5),
                rx: rng.random_range(size / 9.0..size / 4.5),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let pixels: Vec<(usize, usize)> = (0..n)
                .flat_map(|y| (0..n).map(move |x| (y, x)))
                .filter(|&(y, x)| blob.contains(y as f64 + 0.5, x as f64 + 0.5, cfg.shape))
                .collect();
            // Blobs keep a one-pixel gap from each other.
            let clear = pixels.iter().all(|&(y, x)| {
                let y0 = y.saturating_sub(1);
                let x0 = x.saturating_sub(1);
                (y0..=(y + 1).min(n - 1))
                    .all(|yy| (x0..=(x + 1).min(n - 1)).all(|xx| label[[yy, xx]] == 0))
            });
            if pixels.len() >= 4 && clear {
                for (y, x) in pixels {
                    label[[y, x]] = c;
                }
                break;
            }
        }
    }
    label
}

/// Class-specific stripe orientation/frequency.
fn pattern(class_id: ClassId, y: f64, x: f64) -> f64 {
    let k = class_id as f64;
    let theta = 0.6 * k;
    let freq = 0.35 + 0.12 * k;
    (freq * (theta.cos() * x + theta.sin() * y)).sin()
}

fn render_texture(
    label: &Array2<ClassId>,
    tex: &TextureParams,
    rng: &mut ChaCha8Rng,
) -> Array3<u8> {
    let (h, w) = label.dim();
    let phase: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..6.283)).collect();
    let mut img = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let c = label[[y, x]];
            let base = toy_base_color(c);
            let p = pattern(c, y as f64, x as f64 + phase[c as usize % 8]);
            for ch in 0..3 {
                let noise: f64 = rng.sample(StandardNormal);
                let v = base[ch] as f64 + tex.pattern_amp * p + tex.noise_std * noise;
                img[[y, x, ch]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Procedural stand-in for a surgical dataset: non-overlapping textured
/// blobs over a textured background. Pure in `(config, seed)`.
pub fn generate_toy_dataset(
    config: &ToyConfig,
    seed: u64,
) -> Result<(Vec<SampleRecord>, ClassMap)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_map = toy_class_map(config.n_classes);
    let records = (0..config.n_samples)
        .map(|i| {
            let label_map = random_label_map(config, &mut rng);
            let image = render_texture(&label_map, &config.texture, &mut rng);
            SampleRecord {
                id: format!("toy_{i:05}"),
                image,
                label_map,
                split: if i >= config.n_samples - config.n_test {
                    Split::Test
                } else {
                    Split::Train
                },
            }
        })
        .collect();
    Ok((records, class_map))
}

/// Label maps only, e.g. for a simulated-mask source.
pub fn generate_toy_label_maps(config: &ToyConfig, seed: u64) -> Result<Vec<Array2<ClassId>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..config.n_samples)
        .map(|_| random_label_map(config, &mut rng))
        .collect())
}

/// Per-class pixel counts of a label map.
pub fn class_areas(label_map: &Array2<ClassId>) -> BTreeMap<ClassId, usize> {
    let mut out = BTreeMap::new();
    for &v in label_map.iter() {
        *out.entry(v).or_insert(0) += 1;
    }
    out
}
