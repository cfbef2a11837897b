//! Fusing per-organ renders and a background into one labelled scene.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::control::ControlHandle;
use crate::dataset::{write_label_png, write_rgb_png, BinaryMask, ClassId, ClassMap};
use crate::diffusion::{organ_defaults, Denoiser, SamplerConfig, SchedulerKind};
use crate::error::{ensure, Error, Result};
use crate::inpaint::{region_mask, sample_inpaint_batch, ModelRegistry};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderProvenance {
    pub class_id: ClassId,
    /// Checksum of the weights that produced the render.
    pub checkpoint_id: String,
    pub seed: u64,
    pub sampler: SamplerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
}

/// One generated organ and the region it is cut out by.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganRender {
    pub class_id: ClassId,
    pub image: Array3<u8>,
    pub mask: BinaryMask,
    pub provenance: RenderProvenance,
}

impl OrganRender {
    pub fn new(image: Array3<u8>, mask: BinaryMask, provenance: RenderProvenance) -> Result<Self> {
        let (h, w, c) = image.dim();
        ensure!(c == 3, "render must have 3 channels");
        ensure!(
            mask.dim() == (h, w),
            "render {h}×{w} and mask {:?} differ in size",
            mask.dim()
        );
        ensure!(
            provenance.class_id == mask.class_id,
            "provenance names class {} for a class-{} mask",
            provenance.class_id,
            mask.class_id
        );
        Ok(OrganRender {
            class_id: mask.class_id,
            image,
            mask,
            provenance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    SourceImage,
    BackgroundRender,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeScene {
    pub image: Array3<u8>,
    pub label_map: Array2<ClassId>,
    /// Sorted by class id.
    pub provenance: Vec<RenderProvenance>,
    pub background_source: BackgroundSource,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: String,
    label_map: String,
    background_source: BackgroundSource,
    provenance: &'a [RenderProvenance],
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

impl CompositeScene {
    /// Writes `<stem>.png`, `<stem>_label.png` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, class_map: &ClassMap) -> Result<Vec<PathBuf>> {
        save_scene_files(
            dir,
            stem,
            &self.image,
            &self.label_map,
            self,
            class_map,
            None,
        )
    }
}

pub(crate) fn save_scene_files(
    dir: &Path,
    stem: &str,
    image: &Array3<u8>,
    label_map: &Array2<ClassId>,
    scene: &CompositeScene,
    class_map: &ClassMap,
    extra: Option<serde_json::Value>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img = dir.join(format!("{stem}.png"));
    let lbl = dir.join(format!("{stem}_label.png"));
    let side = dir.join(format!("{stem}.json"));
    write_rgb_png(&img, image)?;
    write_label_png(&lbl, label_map, class_map)?;
    let car = Sidecar {
        image: format!("{stem}.png"),
        label_map: format!("{stem}_label.png"),
        background_source: scene.background_source,
        provenance: &scene.provenance,
        extra,
    };
    let text = serde_json::to_string_pretty(&car).expect("sidecar serializes");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(vec![img, lbl, side])
}

/// Each pixel takes the image and label of the highest-z_order render whose
/// mask covers it, otherwise the background and `background_id`.
pub fn compose(
    renders: &[OrganRender],
    background: &Array3<u8>,
    background_source: BackgroundSource,
    class_map: &ClassMap,
) -> Result<CompositeScene> {
    let (h, w, c) = background.dim();
    ensure!(c == 3, "background must have 3 channels");
    let mut seen = BTreeSet::new();
    let mut order = Vec::with_capacity(renders.len());
    for r in renders {
        ensure!(
            seen.insert(r.class_id),
            "class {} rendered more than once",
            r.class_id
        );
        ensure!(
            r.image.dim() == (h, w, 3) && r.mask.dim() == (h, w),
            "render for class {} is not {h}×{w}",
            r.class_id
        );
        ensure!(
            r.mask.class_id == r.class_id,
            "render and mask classes differ"
        );
        ensure!(
            r.class_id != class_map.background_id,
            "class {} is the background id",
            r.class_id
        );
        order.push((class_map.get(r.class_id)?.z_order, r));
    }
    order.sort_by(|a, b| b.0.cmp(&a.0));

    let mut image = background.clone();
    let mut label_map = Array2::from_elem((h, w), class_map.background_id);
    for y in 0..h {
        for x in 0..w {
            if let Some((_, r)) = order.iter().find(|(_, r)| r.mask.mask[[y, x]] == 1) {
                label_map[[y, x]] = r.class_id;
                for k in 0..3 {
                    image[[y, x, k]] = r.image[[y, x, k]];
                }
            }
        }
    }
    let mut provenance: Vec<RenderProvenance> =
        renders.iter().map(|r| r.provenance.clone()).collect();
    provenance.sort_by_key(|p| p.class_id);
    Ok(CompositeScene {
        image,
        label_map,
        provenance,
        background_source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMaskReport {
    /// Fraction of pixels covered by at least one mask.
    pub coverage_fraction: f64,
    /// Pixels covered by two or more masks.
    pub overlap_pixel_count: usize,
    pub per_class_area: BTreeMap<ClassId, usize>,
}

pub fn validate_scene_masks(
    masks: &[BinaryMask],
    frame: (usize, usize),
) -> Result<SceneMaskReport> {
    let (h, w) = frame;
    let mut count = Array2::<u32>::zeros((h, w));
    let mut per_class_area = BTreeMap::new();
    for m in masks {
        ensure!(
            m.dim() == frame,
            "mask {:?} does not match frame {h}×{w}",
            m.dim()
        );
        *per_class_area.entry(m.class_id).or_insert(0) += m.area();
        ndarray::Zip::from(&mut count)
            .and(&m.mask)
            .for_each(|c, &v| *c += v as u32);
    }
    let covered = count.iter().filter(|&&c| c > 0).count();
    Ok(SceneMaskReport {
        coverage_fraction: if h * w == 0 {
            0.0
        } else {
            covered as f64 / (h * w) as f64
        },
        overlap_pixel_count: count.iter().filter(|&&c| c > 1).count(),
        per_class_area,
    })
}

/// Options for [`synthesize_scenes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// Sampler per class; classes not listed use the per-organ default.
    #[serde(default)]
    pub samplers: BTreeMap<ClassId, SamplerConfig>,
    pub n_steps: usize,
    pub scheduler_kind: SchedulerKind,
    pub seed: u64,
    /// Images sampled per model call.
    pub chunk: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            samplers: BTreeMap::new(),
            n_steps: 30,
            scheduler_kind: SchedulerKind::Ddim,
            seed: 0,
            chunk: 32,
        }
    }
}

impl SynthesisOptions {
    pub fn sampler(&self, class_id: ClassId, class_map: &ClassMap) -> SamplerConfig {
        if let Some(s) = self.samplers.get(&class_id) {
            return *s;
        }
        let guidance = class_map
            .get(class_id)
            .map(|e| organ_defaults(&e.name).guidance_scale)
            .unwrap_or(1.0);
        SamplerConfig {
            n_steps: self.n_steps,
            scheduler_kind: self.scheduler_kind,
            ..Default::default()
        }
        .with_guidance(guidance)
    }
}

fn checkpoint_id<T: Scalar>(model: &Denoiser<T>) -> String {
    model.params().checksum()[..16].to_string()
}

/// The organ renders and background of one scene, ready for [`compose`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRenders {
    pub renders: Vec<OrganRender>,
    pub background: Array3<u8>,
    pub background_source: BackgroundSource,
}

impl SceneRenders {
    pub fn compose(&self, class_map: &ClassMap) -> Result<CompositeScene> {
        compose(
            &self.renders,
            &self.background,
            self.background_source,
            class_map,
        )
    }
}

/// Renders every organ of each label map with its class model. With
/// `sources` the organs are inpainted into the source photograph, which also
/// serves as background; without, the background is a full-frame render of
/// the background model. `controls` attaches an edge adapter per class.
pub fn render_organs<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_map: &ClassMap,
    label_maps: &[Array2<ClassId>],
    sources: Option<&[Array3<u8>]>,
    controls: &BTreeMap<ClassId, ControlHandle<T>>,
    options: &SynthesisOptions,
) -> Result<Vec<SceneRenders>> {
    ensure!(options.chunk > 0, "chunk must be positive");
    if let Some(src) = sources {
        ensure!(
            src.len() == label_maps.len(),
            "one source per label map required"
        );
    }
    let n = label_maps.len();
    let source_of = |i: usize| match sources {
        Some(s) => s[i].clone(),
        None => {
            let (h, w) = label_maps[i].dim();
            Array3::from_elem((h, w, 3), 128u8)
        }
    };
    let run =
        |class_id: ClassId, idx: &[usize], label: &str| -> Result<Vec<(usize, OrganRender)>> {
            let model = registry.get(class_id)?;
            let ckpt = checkpoint_id(model);
            let control = controls.get(&class_id);
            let adapter_id = control.map(|h| h.params().checksum()[..16].to_string());
            let sampler = options.sampler(class_id, class_map);
            let mut out = Vec::with_capacity(idx.len());
            for part in idx.chunks(options.chunk) {
                let srcs: Vec<Array3<u8>> = part.iter().map(|&i| source_of(i)).collect();
                let masks: Vec<BinaryMask> = part
                    .iter()
                    .map(|&i| {
                        let (h, w) = label_maps[i].dim();
                        if class_id == class_map.background_id {
                            BinaryMask::full(class_id, h, w)
                        } else {
                            BinaryMask {
                                class_id,
                                mask: region_mask(&label_maps[i], class_id),
                            }
                        }
                    })
                    .collect();
                let seeds: Vec<u64> = part
                    .iter()
                    .map(|&i| derive_seed(options.seed, label, i as u64))
                    .collect();
                let images = sample_inpaint_batch(
                    registry, class_id, &srcs, &masks, &sampler, &seeds, control,
                )?;
                for (((&i, image), mask), &seed) in part.iter().zip(images).zip(masks).zip(&seeds) {
                    let provenance = RenderProvenance {
                        class_id,
                        checkpoint_id: ckpt.clone(),
                        seed,
                        sampler,
                        adapter_id: adapter_id.clone(),
                    };
                    out.push((i, OrganRender::new(image, mask, provenance)?));
                }
            }
            Ok(out)
        };

    let mut renders: Vec<Vec<OrganRender>> = (0..n).map(|_| Vec::new()).collect();
    for class_id in class_map.class_ids() {
        let idx: Vec<usize> = (0..n)
            .filter(|&i| label_maps[i].iter().any(|&v| v == class_id))
            .collect();
        if idx.is_empty() {
            continue;
        }
        for (i, r) in run(class_id, &idx, &format!("organ-{class_id}"))? {
            renders[i].push(r);
        }
    }
    let (backgrounds, background_source) = match sources {
        Some(src) => (src.to_vec(), BackgroundSource::SourceImage),
        None => {
            let all: Vec<usize> = (0..n).collect();
            let mut bg = vec![Array3::zeros((0, 0, 3)); n];
            for (i, r) in run(class_map.background_id, &all, "background")? {
                bg[i] = r.image;
            }
            (bg, BackgroundSource::BackgroundRender)
        }
    };
    Ok(renders
        .into_iter()
        .zip(backgrounds)
        .map(|(renders, background)| SceneRenders {
            renders,
            background,
            background_source,
        })
        .collect())
}

/// [`render_organs`] followed by [`compose`] per scene.
pub fn synthesize_scenes<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_map: &ClassMap,
    label_maps: &[Array2<ClassId>],
    sources: Option<&[Array3<u8>]>,
    controls: &BTreeMap<ClassId, ControlHandle<T>>,
    options: &SynthesisOptions,
) -> Result<Vec<CompositeScene>> {
    render_organs(registry, class_map, label_maps, sources, controls, options)?
        .iter()
        .map(|r| r.compose(class_map))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_label_map, toy_class_map};
    use proptest::prelude::*;

    fn prov(c: ClassId) -> RenderProvenance {
        RenderProvenance {
            class_id: c,
            checkpoint_id: format!("ck{c}"),
            seed: c as u64,
            sampler: SamplerConfig::default(),
            adapter_id: None,
        }
    }

    fn render(c: ClassId, fill: u8, mask: Array2<u8>) -> OrganRender {
        let (h, w) = mask.dim();
        OrganRender::new(
            Array3::from_elem((h, w, 3), fill),
            BinaryMask::new(c, mask).unwrap(),
            prov(c),
        )
        .unwrap()
    }

    #[test]
    fn full_frame_render_replaces_everything() {
        let cm = toy_class_map(3);
        let r = render(2, 77, Array2::ones((4, 5)));
        let s = compose(
            &[r.clone()],
            &Array3::zeros((4, 5, 3)),
            BackgroundSource::SourceImage,
            &cm,
        )
        .unwrap();
        assert_eq!(s.image, r.image);
        assert!(s.label_map.iter().all(|&v| v == 2));
    }

    #[test]
    fn overlap_goes_to_the_higher_z_order() {
        let cm = toy_class_map(3);
        let (hi, lo) = if cm.get(1).unwrap().z_order > cm.get(2).unwrap().z_order {
            (1, 2)
        } else {
            (2, 1)
        };
        let a = render(
            hi,
            10,
            Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y < 3)),
        );
        let b = render(
            lo,
            20,
            Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y > 0)),
        );
        let s = compose(
            &[b, a],
            &Array3::from_elem((4, 4, 3), 5),
            BackgroundSource::SourceImage,
            &cm,
        )
        .unwrap();
        for x in 0..4 {
            assert_eq!(s.label_map[[0, x]], hi);
            assert_eq!(s.label_map[[1, x]], hi);
            assert_eq!(s.label_map[[3, x]], lo);
            assert_eq!(s.image[[2, x, 0]], 10);
            assert_eq!(s.image[[3, x, 1]], 20);
        }
    }

    #[test]
    fn errors_on_duplicates_and_size_mismatch() {
        let cm = toy_class_map(3);
        let bg = Array3::zeros((4, 4, 3));
        let a = render(1, 1, Array2::ones((4, 4)));
        assert!(compose(
            &[a.clone(), a.clone()],
            &bg,
            BackgroundSource::SourceImage,
            &cm
        )
        .is_err());
        let big = render(2, 1, Array2::ones((5, 4)));
        assert!(compose(&[a, big], &bg, BackgroundSource::SourceImage, &cm).is_err());
    }

    #[test]
    fn mask_report_cases() {
        let half = |c, top: bool| {
            BinaryMask::new(
                c,
                Array2::from_shape_fn((4, 4), |(y, _)| u8::from((y < 2) == top)),
            )
            .unwrap()
        };
        let r = validate_scene_masks(&[half(1, true), half(2, false)], (4, 4)).unwrap();
        assert_eq!((r.coverage_fraction, r.overlap_pixel_count), (1.0, 0));
        let r = validate_scene_masks(&[], (4, 4)).unwrap();
        assert_eq!(r.coverage_fraction, 0.0);
        let r = validate_scene_masks(&[half(1, true), half(3, true)], (4, 4)).unwrap();
        assert_eq!(r.overlap_pixel_count, 8);
        assert_eq!(r.per_class_area[&3], 8);
    }

    #[test]
    fn sidecar_lists_provenance() {
        let cm = toy_class_map(3);
        let s = compose(
            &[render(1, 9, Array2::ones((3, 3)))],
            &Array3::zeros((3, 3, 3)),
            BackgroundSource::BackgroundRender,
            &cm,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = s.save(dir.path(), "scene_0", &cm).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&files[2]).unwrap()).unwrap();
        assert_eq!(v["background_source"], "background_render");
        assert_eq!(v["provenance"][0]["checkpoint_id"], "ck1");
    }

    fn scene_strategy() -> impl Strategy<Value = (Vec<(ClassId, u64, Vec<u8>)>, u64)> {
        let render = (1u8..=3, any::<u64>(), prop::collection::vec(0u8..2, 36));
        (prop::collection::vec(render, 0..4), any::<u64>())
    }

    proptest! {
        #[test]
        fn composition_is_order_free_and_round_trips((spec, bg_seed) in scene_strategy(), rot in 0usize..4) {
            let cm = toy_class_map(3);
            let mut renders = Vec::new();
            for (c, fill, m) in spec {
                if renders.iter().any(|r: &OrganRender| r.class_id == c) {
                    continue;
                }
                let img = Array3::from_shape_fn((6, 6, 3), |(y, x, k)| (fill as usize + y * 7 + x * 3 + k) as u8);
                let mask = Array2::from_shape_vec((6, 6), m).unwrap();
                renders.push(OrganRender::new(img, BinaryMask::new(c, mask).unwrap(), prov(c)).unwrap());
            }
            let bg = Array3::from_shape_fn((6, 6, 3), |(y, x, k)| (bg_seed as usize + y + x + k) as u8);
            let s = compose(&renders, &bg, BackgroundSource::SourceImage, &cm).unwrap();
            let mut rotated = renders.clone();
            if !rotated.is_empty() {
                let k = rot % rotated.len();
                rotated.rotate_left(k);
            }
            prop_assert_eq!(&compose(&rotated, &bg, BackgroundSource::SourceImage, &cm).unwrap(), &s);

            // Visible region of each mask: covered and no higher z covers it.
            for r in &renders {
                let z = cm.get(r.class_id).unwrap().z_order;
                let visible = Array2::from_shape_fn((6, 6), |(y, x)| {
                    u8::from(r.mask.mask[[y, x]] == 1
                        && !renders.iter().any(|o| cm.get(o.class_id).unwrap().z_order > z && o.mask.mask[[y, x]] == 1))
                });
                let split = split_label_map(&s.label_map, &cm).unwrap();
                let got = split.iter().find(|m| m.class_id == r.class_id).map(|m| m.mask.clone())
                    .unwrap_or_else(|| Array2::zeros((6, 6)));
                prop_assert_eq!(got, visible.clone());
                for ((y, x), &v) in visible.indexed_iter() {
                    if v == 1 {
                        for k in 0..3 {
                            prop_assert_eq!(s.image[[y, x, k]], r.image[[y, x, k]]);
                        }
                    }
                }
            }
        }
    }

    fn tiny_registry(
        classes: &[ClassId],
        data: &[crate::dataset::SampleRecord],
        cm: &ClassMap,
    ) -> ModelRegistry<f64> {
        use crate::diffusion::{ModelSize, TrainConfig};
        use crate::inpaint::{train_ssi, SsiOptions};
        let opts = SsiOptions {
            size: ModelSize {
                base_channels: 4,
                channel_mults: vec![1, 2],
                embed_dim: 8,
            },
            ..Default::default()
        };
        let cfg = TrainConfig {
            steps: 2,
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        let mut reg = ModelRegistry::new();
        for &c in classes {
            reg.register(c, train_ssi(c, data, cm, &opts, &cfg).unwrap().0)
                .unwrap();
        }
        reg
    }

    #[test]
    fn synthesized_scenes_keep_labels_and_background() {
        use crate::dataset::{generate_toy_dataset, ToyConfig};
        let (data, cm) = generate_toy_dataset(&ToyConfig::new(5, 16, 2), 3).unwrap();
        let reg = tiny_registry(&[1, 2], &data, &cm);
        let maps: Vec<_> = data.iter().map(|r| r.label_map.clone()).collect();
        let srcs: Vec<_> = data.iter().map(|r| r.image.clone()).collect();
        let opts = SynthesisOptions {
            n_steps: 3,
            chunk: 2,
            ..Default::default()
        };
        let scenes =
            synthesize_scenes(&reg, &cm, &maps, Some(&srcs), &BTreeMap::new(), &opts).unwrap();
        assert_eq!(scenes.len(), 5);
        for ((sc, m), src) in scenes.iter().zip(&maps).zip(&srcs) {
            assert_eq!(&sc.label_map, m);
            assert_eq!(sc.background_source, BackgroundSource::SourceImage);
            for ((y, x), &v) in m.indexed_iter() {
                if v == cm.background_id {
                    for k in 0..3 {
                        assert_eq!(sc.image[[y, x, k]], src[[y, x, k]]);
                    }
                }
            }
            let present: Vec<ClassId> = sc.provenance.iter().map(|p| p.class_id).collect();
            let expect: Vec<ClassId> = crate::dataset::class_areas(m)
                .into_keys()
                .filter(|&c| c != cm.background_id)
                .collect();
            assert_eq!(present, expect);
        }
        let again =
            synthesize_scenes(&reg, &cm, &maps, Some(&srcs), &BTreeMap::new(), &opts).unwrap();
        assert_eq!(scenes, again);
    }

    #[test]
    fn simulated_masks_need_a_background_model() {
        use crate::dataset::{generate_toy_dataset, ToyConfig};
        let (data, cm) = generate_toy_dataset(&ToyConfig::new(4, 16, 2), 4).unwrap();
        let maps: Vec<_> = data.iter().map(|r| r.label_map.clone()).collect();
        let opts = SynthesisOptions {
            n_steps: 2,
            ..Default::default()
        };
        let reg = tiny_registry(&[1, 2], &data, &cm);
        assert!(synthesize_scenes(&reg, &cm, &maps, None, &BTreeMap::new(), &opts).is_err());
        let reg = tiny_registry(&[0, 1, 2], &data, &cm);
        let scenes = synthesize_scenes(&reg, &cm, &maps, None, &BTreeMap::new(), &opts).unwrap();
        for (sc, m) in scenes.iter().zip(&maps) {
            assert_eq!(&sc.label_map, m);
            assert_eq!(sc.background_source, BackgroundSource::BackgroundRender);
        }
    }
}
