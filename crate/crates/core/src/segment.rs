//! Downstream segmentation protocol: a small encoder-decoder pixel
//! classifier, the real/synthetic training schemes, augmentations and
//! comparison tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader, CheckpointKind};
use crate::dataset::{ClassId, ClassMap, SampleRecord};
use crate::error::{ensure, Error, Result};
use crate::metrics::{aggregate_reports, seg_metrics, SegMetricReport};
use crate::nn::{fit, to_cnhw, AdamConfig, Bound, Conv2d, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::image_to_chw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    RealNoaug,
    RealColoraug,
    RealFullaug,
    SynOnly,
    SynPlusReal,
    SynPretrainFinetuneReal,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::RealNoaug,
        SchemeKind::RealColoraug,
        SchemeKind::RealFullaug,
        SchemeKind::SynOnly,
        SchemeKind::SynPlusReal,
        SchemeKind::SynPretrainFinetuneReal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::RealNoaug => "real_noaug",
            SchemeKind::RealColoraug => "real_coloraug",
            SchemeKind::RealFullaug => "real_fullaug",
            SchemeKind::SynOnly => "syn_only",
            SchemeKind::SynPlusReal => "syn_plus_real",
            SchemeKind::SynPretrainFinetuneReal => "syn_pretrain_finetune_real",
        }
    }

    pub fn uses_synthetic(self) -> bool {
        matches!(
            self,
            SchemeKind::SynOnly | SchemeKind::SynPlusReal | SchemeKind::SynPretrainFinetuneReal
        )
    }

    pub fn uses_real(self) -> bool {
        self != SchemeKind::SynOnly
    }

    fn augmentation(self) -> Option<AugmentKind> {
        match self {
            SchemeKind::RealColoraug => Some(AugmentKind::Color),
            SchemeKind::RealFullaug => Some(AugmentKind::ColorSpatial),
            _ => None,
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown training scheme `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelConfig {
    pub base_channels: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig { base_channels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingScheme {
    pub kind: SchemeKind,
    /// Dataset names; resolved by the caller.
    #[serde(default)]
    pub real: Option<String>,
    #[serde(default)]
    pub synthetic: Option<String>,
    pub steps: usize,
    /// Second phase of the fine-tuning scheme.
    #[serde(default)]
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub model: SegModelConfig,
}

impl TrainingScheme {
    pub fn new(kind: SchemeKind, steps: usize, seed: u64) -> Self {
        TrainingScheme {
            kind,
            real: kind.uses_real().then(|| "real".to_string()),
            synthetic: kind.uses_synthetic().then(|| "syn".to_string()),
            steps,
            finetune_steps: if kind == SchemeKind::SynPretrainFinetuneReal {
                steps
            } else {
                0
            },
            batch_size: 8,
            lr: 3e-3,
            seed,
            model: SegModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.steps > 0 && self.batch_size > 0,
            "steps and batch size must be positive"
        );
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(
            !self.kind.uses_synthetic() || self.synthetic.is_some(),
            "scheme {} needs a synthetic dataset",
            self.kind.name()
        );
        ensure!(
            !self.kind.uses_real() || self.real.is_some(),
            "scheme {} needs a real dataset",
            self.kind.name()
        );
        ensure!(
            self.kind != SchemeKind::SynPretrainFinetuneReal || self.finetune_steps > 0,
            "the fine-tuning scheme needs finetune_steps > 0"
        );
        Ok(())
    }
}

/// Anything that labels every pixel of an image.
pub trait SegModel {
    fn predict(&self, images: &[Array3<u8>]) -> Result<Vec<Array2<ClassId>>>;
}

#[derive(Debug, Clone, Copy)]
struct SegLayers {
    in0: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    up: Conv2d,
    head: Conv2d,
}

impl SegLayers {
    fn find<T: Scalar>(p: &ParamStore<T>) -> Option<Self> {
        Some(SegLayers {
            in0: Conv2d::find(p, "in0", 1)?,
            down: Conv2d::find(p, "down", 2)?,
            mid: Conv2d::find(p, "mid", 1)?,
            up: Conv2d::find(p, "up", 1)?,
            head: Conv2d::find(p, "head", 1)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h0 = self.in0.forward(tape, p, x);
        let h0 = tape.silu(h0);
        let h1 = self.down.forward(tape, p, h0);
        let h1 = tape.silu(h1);
        let h1 = self.mid.forward(tape, p, h1);
        let h1 = tape.silu(h1);
        let u = tape.upsample2(h1);
        let u = tape.concat(u, h0);
        let u = self.up.forward(tape, p, u);
        let u = tape.silu(u);
        self.head.forward(tape, p, u)
    }
}

/// Encoder-decoder pixel classifier with one skip connection.
#[derive(Debug, Clone)]
pub struct Segmenter<T: Scalar> {
    params: ParamStore<T>,
    layers: SegLayers,
    class_map: ClassMap,
    config: SegModelConfig,
    seed: u64,
    training: serde_json::Value,
}

fn label_indices(records: &[&SampleRecord], class_map: &ClassMap) -> Vec<usize> {
    let mut out = Vec::new();
    for r in records {
        out.extend(r.label_map.iter().map(|&v| class_map.dense_index(v)));
    }
    out
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(class_map: &ClassMap, config: &SegModelConfig, seed: u64) -> Result<Self> {
        ensure!(config.base_channels > 0, "base_channels must be positive");
        let c = config.base_channels;
        let k = class_map.n_classes() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        Conv2d::new(&mut p, "in0", 3, c, 3, 1, &mut rng);
        Conv2d::new(&mut p, "down", c, 2 * c, 3, 2, &mut rng);
        Conv2d::new(&mut p, "mid", 2 * c, 2 * c, 3, 1, &mut rng);
        Conv2d::new(&mut p, "up", 3 * c, c, 3, 1, &mut rng);
        Conv2d::new(&mut p, "head", c, k, 1, 1, &mut rng);
        let layers = SegLayers::find(&p).expect("layers just created");
        Ok(Segmenter {
            params: p,
            layers,
            class_map: class_map.clone(),
            config: config.clone(),
            seed,
            training: serde_json::Value::Null,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    /// Cross-entropy training on uniformly drawn records, optionally
    /// augmented per draw.
    fn train_on(
        &mut self,
        records: &[&SampleRecord],
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        augment: Option<AugmentKind>,
    ) -> Result<Vec<f64>> {
        ensure!(!records.is_empty(), "no training records");
        let (h, w) = records[0].label_map.dim();
        ensure!(h % 2 == 0 && w % 2 == 0, "image sides must be even");
        for r in records {
            ensure!(
                r.label_map.dim() == (h, w),
                "record {} has a different resolution",
                r.id
            );
            r.validate(&self.class_map)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self.layers;
        let cm = self.class_map.clone();
        let adam = AdamConfig {
            lr,
            ..Default::default()
        };
        let mut draw = 0u64;
        fit(&mut self.params, adam, steps, |store, _| -> Result<_> {
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let r = records[rng.random_range(0..records.len())];
                let r = match augment {
                    Some(kind) => augment_sample(r, kind, derive_seed(seed, "augment", draw)),
                    None => r.clone(),
                };
                draw += 1;
                batch.push(r);
            }
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let mut x = Array4::zeros((batch_size, 3, h, w));
            for (i, r) in refs.iter().enumerate() {
                x.index_axis_mut(Axis(0), i)
                    .assign(&image_to_chw::<T>(&r.image));
            }
            let labels = label_indices(&refs, &cm);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let xv = tape.leaf(to_cnhw(&x), false);
            let logits = layers.forward(&mut tape, &p, xv);
            let loss = tape.cross_entropy(logits, &labels);
            let g = tape.backward(loss);
            Ok((tape.value(loss)[0], p.grads(&g, store)))
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(
            CheckpointKind::Segmenter,
            T::DTYPE,
            serde_json::json!({ "model": self.config, "class_map": self.class_map }),
            self.seed,
        );
        h.training = self.training.clone();
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load::<T>(path)?;
        if h.kind != CheckpointKind::Segmenter {
            return Err(Error::format(
                path,
                format!("expected a segmenter, found {:?}", h.kind),
            ));
        }
        let config: SegModelConfig = serde_json::from_value(h.arch["model"].clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let class_map: ClassMap = serde_json::from_value(h.arch["class_map"].clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let fresh = Self::new(&class_map, &config, h.seed)?;
        let expected: Vec<(String, Vec<usize>)> = fresh
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        checkpoint::check_shapes(path, &params, &expected)?;
        let layers =
            SegLayers::find(&params).ok_or_else(|| Error::format(path, "missing layers"))?;
        Ok(Segmenter {
            params,
            layers,
            class_map,
            config,
            seed: h.seed,
            training: h.training,
        })
    }
}

impl<T: Scalar> SegModel for Segmenter<T> {
    fn predict(&self, images: &[Array3<u8>]) -> Result<Vec<Array2<ClassId>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let (h, w, _) = chunk[0].dim();
            let mut x = Array4::zeros((chunk.len(), 3, h, w));
            for (i, img) in chunk.iter().enumerate() {
                ensure!(
                    img.dim() == (h, w, 3),
                    "images in a batch must share a resolution"
                );
                x.index_axis_mut(Axis(0), i).assign(&image_to_chw::<T>(img));
            }
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let xv = tape.leaf(to_cnhw(&x), false);
            let logits = self.layers.forward(&mut tape, &p, xv);
            let v = tape.value(logits);
            let k = v.shape()[0];
            for i in 0..chunk.len() {
                out.push(Array2::from_shape_fn((h, w), |(y, xx)| {
                    let mut best = 0;
                    for c in 1..k {
                        if v[[c, i, y, xx]] > v[[best, i, y, xx]] {
                            best = c;
                        }
                    }
                    self.class_map.label_of_dense(best)
                }));
            }
        }
        Ok(out)
    }
}

fn class_set(records: &[SampleRecord], class_map: &ClassMap) -> BTreeSet<ClassId> {
    records
        .iter()
        .flat_map(|r| r.classes_present(class_map))
        .collect()
}

/// Trains a segmenter under `scheme`. `real` and `synthetic` must contain
/// the same set of foreground classes when both are used.
pub fn train_segmenter<T: Scalar>(
    scheme: &TrainingScheme,
    real: &[SampleRecord],
    synthetic: &[SampleRecord],
    class_map: &ClassMap,
) -> Result<(Segmenter<T>, Vec<f64>)> {
    scheme.validate()?;
    let kind = scheme.kind;
    ensure!(
        !kind.uses_real() || !real.is_empty(),
        "scheme {} has no real data",
        kind.name()
    );
    ensure!(
        !kind.uses_synthetic() || !synthetic.is_empty(),
        "scheme {} has no synthetic data",
        kind.name()
    );
    if kind.uses_real() && kind.uses_synthetic() || kind == SchemeKind::SynOnly && !real.is_empty()
    {
        let (a, b) = (class_set(real, class_map), class_set(synthetic, class_map));
        ensure!(
            a == b,
            "class sets differ between real {:?} and synthetic {:?} data",
            a,
            b
        );
    }
    let mut model = Segmenter::<T>::new(class_map, &scheme.model, scheme.seed)?;
    let reals: Vec<&SampleRecord> = real.iter().collect();
    let syns: Vec<&SampleRecord> = synthetic.iter().collect();
    let train_seed = derive_seed(scheme.seed, "seg-train", 0);
    let (bs, lr) = (scheme.batch_size, scheme.lr);
    let losses = match kind {
        SchemeKind::RealNoaug | SchemeKind::RealColoraug | SchemeKind::RealFullaug => model
            .train_on(
                &reals,
                scheme.steps,
                bs,
                lr,
                train_seed,
                kind.augmentation(),
            )?,
        SchemeKind::SynOnly => model.train_on(&syns, scheme.steps, bs, lr, train_seed, None)?,
        SchemeKind::SynPlusReal => {
            let both: Vec<&SampleRecord> = syns.iter().chain(&reals).copied().collect();
            model.train_on(&both, scheme.steps, bs, lr, train_seed, None)?
        }
        SchemeKind::SynPretrainFinetuneReal => {
            let mut l = model.train_on(&syns, scheme.steps, bs, lr, train_seed, None)?;
            let ft_seed = derive_seed(scheme.seed, "seg-finetune", 0);
            l.extend(model.train_on(&reals, scheme.finetune_steps, bs, lr, ft_seed, None)?);
            l
        }
    };
    model.training = serde_json::json!({
        "scheme": scheme,
        "n_real": real.len(),
        "n_synthetic": synthetic.len(),
        "final_loss": losses.last(),
    });
    Ok((model, losses))
}

/// Scores `model` on every record and aggregates per class over images.
pub fn evaluate_segmenter(
    model: &impl SegModel,
    test: &[SampleRecord],
    class_map: &ClassMap,
) -> Result<SegMetricReport> {
    ensure!(!test.is_empty(), "empty test set");
    let images: Vec<Array3<u8>> = test.iter().map(|r| r.image.clone()).collect();
    let preds = model.predict(&images)?;
    ensure!(
        preds.len() == test.len(),
        "model returned {} predictions for {} images",
        preds.len(),
        test.len()
    );
    let reports = preds
        .iter()
        .zip(test)
        .map(|(p, r)| seg_metrics(p, &r.label_map, class_map))
        .collect::<Result<Vec<_>>>()?;
    aggregate_reports(&reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Color,
    ColorSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    /// Added in [0, 1] intensity units.
    pub brightness: f64,
    /// Scale about mid-gray.
    pub contrast: f64,
    /// Chroma rotation in turns.
    pub hue: f64,
}

impl ColorParams {
    pub const IDENTITY: ColorParams = ColorParams {
        brightness: 0.0,
        contrast: 1.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub flip_horizontal: bool,
    /// Counter-clockwise quarter turns.
    pub rot90: u8,
    /// Peak displacement in pixels; 0 disables the warp.
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub elastic_seed: u64,
}

impl SpatialParams {
    pub const IDENTITY: SpatialParams = SpatialParams {
        flip_horizontal: false,
        rot90: 0,
        elastic_alpha: 0.0,
        elastic_sigma: 3.0,
        elastic_seed: 0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub color: ColorParams,
    pub spatial: Option<SpatialParams>,
}

pub fn draw_augment_params(kind: AugmentKind, seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = ColorParams {
        brightness: rng.random_range(-0.1..=0.1),
        contrast: rng.random_range(0.8..=1.2),
        hue: rng.random_range(-0.05..=0.05),
    };
    let spatial = (kind == AugmentKind::ColorSpatial).then(|| SpatialParams {
        flip_horizontal: rng.random_bool(0.5),
        rot90: rng.random_range(0..4),
        elastic_alpha: if rng.random_bool(0.5) {
            rng.random_range(0.5..=2.0)
        } else {
            0.0
        },
        elastic_sigma: 3.0,
        elastic_seed: rng.random(),
    });
    AugmentParams { color, spatial }
}

pub fn augment_sample(sample: &SampleRecord, kind: AugmentKind, seed: u64) -> SampleRecord {
    apply_augment(sample, &draw_augment_params(kind, seed))
}

fn apply_color(img: &Array3<u8>, p: &ColorParams) -> Array3<u8> {
    if *p == ColorParams::IDENTITY {
        return img.clone();
    }
    let (c, s) = (
        (2.0 * std::f64::consts::PI * p.hue).cos(),
        (2.0 * std::f64::consts::PI * p.hue).sin(),
    );
    let mut out = img.clone();
    for mut px in out.lanes_mut(Axis(2)) {
        let mut rgb = [
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ];
        if p.hue != 0.0 {
            // Rotate the chroma plane of YIQ.
            let y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            let i = 0.596 * rgb[0] - 0.274 * rgb[1] - 0.322 * rgb[2];
            let q = 0.211 * rgb[0] - 0.523 * rgb[1] + 0.312 * rgb[2];
            let (i, q) = (c * i - s * q, s * i + c * q);
            rgb = [
                y + 0.956 * i + 0.621 * q,
                y - 0.272 * i - 0.647 * q,
                y - 1.106 * i + 1.703 * q,
            ];
        }
        for k in 0..3 {
            let v = (rgb[k] - 0.5) * p.contrast + 0.5 + p.brightness;
            px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

fn gaussian_blur(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let (h, w) = field.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let o = j as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                };
                acc += kv * src[[yy as usize, xx as usize]];
            }
            acc / norm
        })
    };
    pass(&pass(field, true), false)
}

/// Source coordinate of every output pixel.
fn coordinate_map(h: usize, w: usize, p: &SpatialParams) -> Result<Array3<f64>> {
    let turns = p.rot90 % 4;
    ensure!(turns % 2 == 0 || h == w, "quarter turns need square images");
    let mut map = Array3::zeros((h, w, 2));
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            // Undo the rotation, then the flip.
            let (mut sy, mut sx) = (y as f64, x as f64);
            for _ in 0..turns {
                // Inverse of a counter-clockwise quarter turn.
                (sy, sx) = (sx, wf - sy);
            }
            if p.flip_horizontal {
                sx = wf - sx;
            }
            map[[y, x, 0]] = sy;
            map[[y, x, 1]] = sx;
        }
    }
    if p.elastic_alpha > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.elastic_seed);
        let mut noise =
            || Array2::from_shape_simple_fn((h, w), || rng.sample::<f64, _>(StandardNormal));
        let (dy, dx) = (
            gaussian_blur(&noise(), p.elastic_sigma),
            gaussian_blur(&noise(), p.elastic_sigma),
        );
        let peak = dy
            .iter()
            .chain(dx.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1e-12);
        for y in 0..h {
            for x in 0..w {
                map[[y, x, 0]] =
                    (map[[y, x, 0]] + p.elastic_alpha * dy[[y, x]] / peak).clamp(0.0, hf);
                map[[y, x, 1]] =
                    (map[[y, x, 1]] + p.elastic_alpha * dx[[y, x]] / peak).clamp(0.0, wf);
            }
        }
    }
    Ok(map)
}

fn warp_image(img: &Array3<u8>, map: &Array3<f64>) -> Array3<u8> {
    let (h, w, _) = img.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, k)| {
        let (sy, sx) = (map[[y, x, 0]], map[[y, x, 1]]);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |yy: usize, xx: usize| img[[yy, xx, k]] as f64;
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8
    })
}

fn warp_labels(labels: &Array2<ClassId>, map: &Array3<f64>) -> Array2<ClassId> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (map[[y, x, 0]].round() as usize).min(h - 1);
        let sx = (map[[y, x, 1]].round() as usize).min(w - 1);
        labels[[sy, sx]]
    })
}

/// Color jitter on the image, then (if present) one shared geometric
/// transform of image and labels.
pub fn apply_augment(sample: &SampleRecord, params: &AugmentParams) -> SampleRecord {
    let mut out = sample.clone();
    out.image = apply_color(&sample.image, &params.color);
    if let Some(sp) = &params.spatial {
        if *sp != SpatialParams::IDENTITY {
            let (h, w) = sample.label_map.dim();
            // Non-square images skip quarter turns.
            let sp = if h != w {
                SpatialParams {
                    rot90: sp.rot90 & !1,
                    ..*sp
                }
            } else {
                *sp
            };
            let map = coordinate_map(h, w, &sp).expect("geometry validated");
            out.image = warp_image(&out.image, &map);
            out.label_map = warp_labels(&sample.label_map, &map);
        }
    }
    out
}

/// Plain-text and CSV tables with one row per scheme.
pub fn comparison_table(
    rows: &[(String, SegMetricReport)],
    class_map: &ClassMap,
) -> (String, String) {
    let ids = class_map.class_ids();
    let fmt_hd = |h: Option<f64>| h.map_or("-".to_string(), |v| format!("{v:.3}"));
    let mut header = vec![
        "scheme".to_string(),
        "dice".into(),
        "iou".into(),
        "hd".into(),
    ];
    for &c in &ids {
        let name = class_map
            .get(c)
            .map(|e| e.name.replace(' ', "_"))
            .unwrap_or_default();
        header.push(format!("dice_{name}"));
    }
    let mut table: Vec<Vec<String>> = vec![header];
    for (name, r) in rows {
        let mut row = vec![
            name.clone(),
            format!("{:.4}", r.macro_scores.dice),
            format!("{:.4}", r.macro_scores.iou),
            fmt_hd(r.macro_scores.hausdorff),
        ];
        for c in &ids {
            row.push(
                r.per_class
                    .get(c)
                    .map_or("-".to_string(), |s| format!("{:.4}", s.dice)),
            );
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        writeln!(text, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(
                text,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            )
            .unwrap();
        }
    }
    let csv = table
        .iter()
        .map(|r| r.join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    (text, csv)
}
