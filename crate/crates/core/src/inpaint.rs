//! Mask-guided inpainting: the masked forward process, per-class model
//! training, masked sampling and the per-class model registry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Array3, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::control::ControlHandle;
use crate::dataset::{
    background_prompt, make_prompt, BinaryMask, ClassId, ClassMap, PromptKind, SampleRecord,
};
use crate::diffusion::{
    ddim_sample, forward_diffuse, gaussian_noise, organ_defaults, prepare_batch, Condition,
    Denoiser, ModelSize, NoisePredictor, NoiseSchedule, PredictionType, PreparedBatch,
    SamplerConfig, ScheduleParams, TrainBatch, TrainConfig, TrainReport,
};
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::{image_to_chw, stack_images, stack_masks, unstack_images};

/// Number of conditioning channels of an inpainting model: the mask and the
/// masked source image.
pub const INPAINT_COND_CHANNELS: usize = 4;

/// `x_t⊙m + x0⊙(1−m)`. The mask has one channel (broadcast) or as many as
/// `x_t`, and must be exactly 0/1.
pub fn masked_blend<T: Scalar>(
    x_t: &Array4<T>,
    x0: &Array4<T>,
    mask: &Array4<T>,
) -> Result<Array4<T>> {
    ensure!(
        x_t.shape() == x0.shape(),
        "x_t {:?} and x0 {:?} differ in shape",
        x_t.shape(),
        x0.shape()
    );
    let (n, c, h, w) = x_t.dim();
    let (mn, mc, mh, mw) = mask.dim();
    ensure!(
        mn == n && mh == h && mw == w && (mc == 1 || mc == c),
        "mask {:?} cannot broadcast to {:?}",
        mask.shape(),
        x_t.shape()
    );
    ensure!(
        mask.iter().all(|&v| v == T::zero() || v == T::one()),
        "mask must be binary"
    );
    let m = mask.broadcast((n, c, h, w)).unwrap();
    Ok(Zip::from(x_t)
        .and(x0)
        .and(&m)
        .map_collect(|&x, &x0, &m| if m == T::one() { x } else { x0 }))
}

/// Conditioning channels `[m, x0⊙(1−m)]`.
pub fn inpaint_condition<T: Scalar>(x0: &Array4<T>, mask: &Array4<T>) -> Array4<T> {
    let keep = Zip::from(x0)
        .and_broadcast(mask)
        .map_collect(|&x, &m| x * (T::one() - m));
    concatenate(Axis(1), &[mask.view(), keep.view()]).unwrap()
}

/// Noises a batch, then replaces the unmasked region of the noisy input by the
/// clean image and attaches the inpainting conditioning.
pub fn prepare_inpaint_batch<T: Scalar>(
    x0: &Array4<T>,
    mask: &Array4<T>,
    prompt: usize,
    kind: PredictionType,
    schedule: &NoiseSchedule<T>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch<T>> {
    let n = x0.dim().0;
    let batch = TrainBatch {
        x0: x0.clone(),
        cond: Condition::prompt(prompt, n).with_extra(inpaint_condition(x0, mask)),
    };
    let mut p = prepare_batch(&batch, kind, schedule, config.p_uncond, rng)?;
    p.x_t = masked_blend(&p.x_t, x0, mask)?;
    if config.masked_loss {
        p.weight = Some(mask.broadcast(x0.raw_dim()).unwrap().to_owned());
    }
    Ok(p)
}

/// Region a model is trained and sampled on: an organ class, or the
/// background (every pixel labelled `background_id`).
pub fn region_mask(label_map: &Array2<ClassId>, class_id: ClassId) -> Array2<u8> {
    label_map.mapv(|v| (v == class_id) as u8)
}

/// Prompt of the model for `class_id`; the background id gets the
/// background prompt.
pub fn region_prompt(class_id: ClassId, class_map: &ClassMap) -> Result<String> {
    if class_id == class_map.background_id {
        Ok(background_prompt(class_map))
    } else {
        make_prompt(class_id, class_map, PromptKind::Organ)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsiOptions {
    pub size: ModelSize,
    /// Defaults to the per-organ table.
    pub prediction_type: Option<PredictionType>,
    pub schedule: ScheduleParams,
}

impl Default for SsiOptions {
    fn default() -> Self {
        SsiOptions {
            size: ModelSize::default(),
            prediction_type: None,
            schedule: ScheduleParams::default(),
        }
    }
}

/// Trains the inpainting model of one class on the true masks of that class.
/// Samples without the class are skipped.
pub fn train_ssi<T: Scalar>(
    class_id: ClassId,
    dataset: &[SampleRecord],
    class_map: &ClassMap,
    options: &SsiOptions,
    config: &TrainConfig,
) -> Result<(Denoiser<T>, TrainReport)> {
    let name = if class_id == class_map.background_id {
        "background".to_string()
    } else {
        class_map.get(class_id)?.name.clone()
    };
    let prompt = region_prompt(class_id, class_map)?;
    let eligible: Vec<&SampleRecord> = dataset
        .iter()
        .filter(|r| r.label_map.iter().any(|&v| v == class_id))
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    let (h, w) = eligible[0].label_map.dim();
    ensure!(h == w, "square images required, got {h}×{w}");
    for r in &eligible {
        ensure!(
            r.label_map.dim() == (h, w),
            "record {} has a different resolution",
            r.id
        );
    }
    let kind = options
        .prediction_type
        .unwrap_or_else(|| organ_defaults(&name).prediction_type);
    let arch = options.size.arch(3, INPAINT_COND_CHANNELS, h, 1);
    let mut model = Denoiser::new(
        arch,
        kind,
        vec![prompt],
        Some(class_id),
        options.schedule,
        config.seed,
    )?;

    let images: Vec<Array3<T>> = eligible.iter().map(|r| image_to_chw(&r.image)).collect();
    let masks: Vec<Array2<T>> = eligible
        .iter()
        .map(|r| region_mask(&r.label_map, class_id).mapv(|v| T::lit(v as f64)))
        .collect();
    let schedule = model.schedule().clone();
    let bs = config.batch_size;
    let report = model.train(config, |rng| {
        let mut x0 = Array4::zeros((bs, 3, h, w));
        let mut m = Array4::zeros((bs, 1, h, w));
        for i in 0..bs {
            let k = rng.random_range(0..images.len());
            x0.index_axis_mut(Axis(0), i).assign(&images[k]);
            m.slice_mut(s![i, 0, .., ..]).assign(&masks[k]);
        }
        prepare_inpaint_batch(&x0, &m, 0, kind, &schedule, config, rng)
    })?;
    model.set_training_meta(serde_json::json!({
        "config": config,
        "class_name": name,
        "n_samples": eligible.len(),
    }));
    Ok((model, report))
}

/// Per-class inpainting models plus the scene-level model used for
/// refinement.
#[derive(Debug, Clone)]
pub struct ModelRegistry<T: Scalar> {
    classes: BTreeMap<ClassId, Arc<Denoiser<T>>>,
    scene: Option<Arc<Denoiser<T>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryIndex {
    classes: BTreeMap<ClassId, String>,
    scene: Option<String>,
}

impl<T: Scalar> Default for ModelRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ModelRegistry<T> {
    pub fn new() -> Self {
        ModelRegistry {
            classes: BTreeMap::new(),
            scene: None,
        }
    }

    pub fn register(&mut self, class_id: ClassId, model: Denoiser<T>) -> Result<()> {
        ensure!(
            model.class_id() == Some(class_id),
            "model for class {:?} cannot be registered under {class_id}",
            model.class_id()
        );
        ensure!(
            model.arch().cond_channels == INPAINT_COND_CHANNELS,
            "class models must be inpainting models"
        );
        ensure!(
            !self.classes.contains_key(&class_id),
            "class {class_id} already registered"
        );
        self.classes.insert(class_id, Arc::new(model));
        Ok(())
    }

    pub fn register_scene(&mut self, model: Denoiser<T>) -> Result<()> {
        ensure!(
            model.class_id().is_none(),
            "the scene model must not carry a class id"
        );
        ensure!(self.scene.is_none(), "scene model already registered");
        self.scene = Some(Arc::new(model));
        Ok(())
    }

    pub fn get(&self, class_id: ClassId) -> Result<&Arc<Denoiser<T>>> {
        self.classes
            .get(&class_id)
            .ok_or_else(|| Error::Lookup(format!("no model registered for class {class_id}")))
    }

    pub fn scene(&self) -> Result<&Arc<Denoiser<T>>> {
        self.scene
            .as_ref()
            .ok_or_else(|| Error::Lookup("no scene model registered".into()))
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    /// Writes one checkpoint per model and `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = RegistryIndex {
            classes: BTreeMap::new(),
            scene: None,
        };
        for (&id, m) in &self.classes {
            let file = format!("class_{id}.ckpt");
            m.save(&dir.join(&file))?;
            index.classes.insert(id, file);
        }
        if let Some(m) = &self.scene {
            m.save(&dir.join("scene.ckpt"))?;
            index.scene = Some("scene.ckpt".into());
        }
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: RegistryIndex =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut reg = ModelRegistry::new();
        for (id, file) in index.classes {
            let p = dir.join(&file);
            let header = checkpoint::read_header(&p)?;
            if header.class_id != Some(id) {
                return Err(Error::format(
                    &p,
                    format!(
                        "header class {:?} does not match index key {id}",
                        header.class_id
                    ),
                ));
            }
            reg.register(id, Denoiser::load(&p)?)?;
        }
        if let Some(file) = index.scene {
            reg.register_scene(Denoiser::load(&dir.join(file))?)?;
        }
        Ok(reg)
    }

    /// Checkpoint paths as written by [`save`](Self::save).
    pub fn files(dir: &Path) -> Result<Vec<PathBuf>> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: RegistryIndex =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut out: Vec<PathBuf> = index.classes.values().map(|f| dir.join(f)).collect();
        out.extend(index.scene.map(|f| dir.join(f)));
        out.push(path);
        Ok(out)
    }
}

/// Source image and region of one inpainting request, at model resolution.
#[derive(Debug, Clone)]
pub struct InpaintContext<T> {
    pub x0_ref: Array3<T>,
    pub mask: BinaryMask,
    pub prompt: String,
    pub class_id: ClassId,
}

/// Masked reverse process for a batch. Starts at `ε⊙m + x0⊙(1−m)`; after
/// every update the unmasked region is reset to `x0` noised to the current
/// timestep with noise seeded by `(seed, t)`. `observer` sees every
/// intermediate state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn inpaint_tensor<T: Scalar>(
    model: &impl NoisePredictor<T>,
    prompt: usize,
    x0: &Array4<T>,
    mask: &Array4<T>,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig,
    seeds: &[u64],
    mut observer: Option<&mut dyn FnMut(Option<usize>, &Array4<T>)>,
) -> Result<Array4<T>> {
    let (n, c, h, w) = x0.dim();
    ensure!(seeds.len() == n, "one seed per sample required");
    let mut eps = Array4::zeros((n, c, h, w));
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        eps.index_axis_mut(Axis(0), i)
            .assign(&gaussian_noise::<T>((1, c, h, w), &mut rng).index_axis(Axis(0), 0));
    }
    let x_init = masked_blend(&eps, x0, mask)?;
    let cond = Condition::prompt(prompt, n).with_extra(inpaint_condition(x0, mask));
    let mut hook = |t: Option<usize>, x: &mut Array4<T>| -> Result<()> {
        let known = match t {
            None => x0.clone(),
            Some(t) => {
                let mut z = Array4::zeros((n, c, h, w));
                for (i, &seed) in seeds.iter().enumerate() {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, "inpaint-step", t as u64));
                    z.index_axis_mut(Axis(0), i).assign(
                        &gaussian_noise::<T>((1, c, h, w), &mut rng).index_axis(Axis(0), 0),
                    );
                }
                forward_diffuse(x0, t, &z, schedule)?
            }
        };
        *x = masked_blend(x, &known, mask)?;
        if let Some(o) = observer.as_deref_mut() {
            o(t, x);
        }
        Ok(())
    };
    ddim_sample(model, x_init, &cond, schedule, config, Some(&mut hook))
}

/// Inpaints one image region with the model registered for `class_id`,
/// optionally steered by an edge adapter. Pixels outside the mask are
/// returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn sample_inpaint<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_id: ClassId,
    source: &Array3<u8>,
    mask: &BinaryMask,
    config: &SamplerConfig,
    seed: u64,
    control: Option<&ControlHandle<T>>,
) -> Result<Array3<u8>> {
    let mut out = sample_inpaint_batch(
        registry,
        class_id,
        std::slice::from_ref(source),
        std::slice::from_ref(mask),
        config,
        &[seed],
        control,
    )?;
    Ok(out.remove(0))
}

/// Batched [`sample_inpaint`]; sample `i` uses `seeds[i]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_inpaint_batch<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_id: ClassId,
    sources: &[Array3<u8>],
    masks: &[BinaryMask],
    config: &SamplerConfig,
    seeds: &[u64],
    control: Option<&ControlHandle<T>>,
) -> Result<Vec<Array3<u8>>> {
    let model = registry.get(class_id)?;
    let masks = check_inputs(model, sources, masks, seeds)?;
    match control {
        None => inpaint_images(model.as_ref(), model, sources, &masks, config, seeds),
        Some(handle) => {
            let cn = handle.bind(model, &masks)?;
            inpaint_images(&cn, model, sources, &masks, config, seeds)
        }
    }
}

/// Validates a sampling request and brings the masks to model resolution.
pub(crate) fn check_inputs<T: Scalar>(
    model: &Denoiser<T>,
    sources: &[Array3<u8>],
    masks: &[BinaryMask],
    seeds: &[u64],
) -> Result<Vec<BinaryMask>> {
    ensure!(!sources.is_empty(), "nothing to inpaint");
    ensure!(
        sources.len() == masks.len() && masks.len() == seeds.len(),
        "sources, masks and seeds must have equal length"
    );
    let s = model.arch().image_size;
    let mut resampled = Vec::with_capacity(masks.len());
    for (src, m) in sources.iter().zip(masks) {
        ensure!(
            src.dim() == (s, s, 3),
            "source image {:?} does not match model resolution {s}",
            src.dim()
        );
        resampled.push(if m.dim() == (s, s) {
            m.clone()
        } else {
            m.resample_nearest(s, s)
        });
    }
    Ok(resampled)
}

pub(crate) fn inpaint_images<T: Scalar>(
    predictor: &impl NoisePredictor<T>,
    model: &Denoiser<T>,
    sources: &[Array3<u8>],
    masks: &[BinaryMask],
    config: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Array3<u8>>> {
    let x0 = stack_images::<T>(&sources.iter().collect::<Vec<_>>());
    let m = stack_masks::<T>(&masks.iter().map(|b| &b.mask).collect::<Vec<_>>());
    let out = inpaint_tensor(predictor, 0, &x0, &m, model.schedule(), config, seeds, None)?;
    Ok(unstack_images(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToyConfig};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn tiny_options() -> SsiOptions {
        SsiOptions {
            size: ModelSize {
                base_channels: 4,
                channel_mults: vec![1, 2],
                embed_dim: 8,
            },
            ..Default::default()
        }
    }

    fn tiny_registry() -> (ModelRegistry<f64>, Vec<SampleRecord>) {
        let (data, cmap) = generate_toy_dataset(&ToyConfig::new(6, 16, 3), 1).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        let mut reg = ModelRegistry::new();
        for id in [1, 2] {
            let (m, _) = train_ssi(id, &data, &cmap, &tiny_options(), &cfg).unwrap();
            reg.register(id, m).unwrap();
        }
        (reg, data)
    }

    #[test]
    fn blend_identities_and_checkerboard() {
        let x = Array4::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| {
            (a * 64 + b * 16 + c * 4 + d) as f64
        });
        let x0 = x.mapv(|v| -v - 1.0);
        assert_eq!(
            masked_blend(&x, &x0, &Array4::ones((2, 1, 4, 4))).unwrap(),
            x
        );
        assert_eq!(
            masked_blend(&x, &x0, &Array4::zeros((2, 1, 4, 4))).unwrap(),
            x0
        );
        let m = Array4::from_shape_fn((2, 1, 4, 4), |(_, _, y, xx)| ((y + xx) % 2) as f64);
        let b = masked_blend(&x, &x0, &m).unwrap();
        for ((n, c, y, xx), &v) in b.indexed_iter() {
            let expect = if (y + xx) % 2 == 1 {
                x[[n, c, y, xx]]
            } else {
                x0[[n, c, y, xx]]
            };
            assert_eq!(v, expect);
        }
        assert!(masked_blend(&x, &x0, &m.mapv(|v| v * 0.5)).is_err());
        assert!(masked_blend(&x, &x0, &Array4::ones((2, 2, 4, 4))).is_err());
    }

    #[test]
    fn missing_class_is_an_error() {
        let (data, cmap) = generate_toy_dataset(&ToyConfig::new(4, 16, 3), 2).unwrap();
        let data: Vec<_> = data
            .into_iter()
            .map(|mut r| {
                r.label_map.mapv_inplace(|v| if v == 3 { 0 } else { v });
                r
            })
            .collect();
        let err = train_ssi::<f64>(3, &data, &cmap, &tiny_options(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::EmptyClass(3))));
    }

    #[test]
    fn training_is_deterministic() {
        let (data, cmap) = generate_toy_dataset(&ToyConfig::new(6, 16, 3), 1).unwrap();
        let cfg = TrainConfig {
            steps: 4,
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        let (a, ra) = train_ssi::<f64>(1, &data, &cmap, &tiny_options(), &cfg).unwrap();
        let (b, rb) = train_ssi::<f64>(1, &data, &cmap, &tiny_options(), &cfg).unwrap();
        assert_eq!(ra.final_loss(), rb.final_loss());
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_eq!(a.prediction_type(), PredictionType::V);
    }

    #[test]
    fn registry_round_trip_and_lookup() {
        let (reg, _) = tiny_registry();
        let dir = tempfile::tempdir().unwrap();
        reg.save(dir.path()).unwrap();
        let back = ModelRegistry::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.class_ids(), vec![1, 2]);
        for id in [1, 2] {
            let h = checkpoint::read_header(&dir.path().join(format!("class_{id}.ckpt"))).unwrap();
            assert_eq!(h.class_id, Some(id));
            assert_eq!(
                back.get(id).unwrap().params(),
                reg.get(id).unwrap().params()
            );
        }
        assert!(matches!(back.get(3), Err(Error::Lookup(_))));
        assert!(back.scene().is_err());
        let mut dup = reg.clone();
        let again = (*reg.get(1).unwrap().as_ref()).clone();
        assert!(dup.register(1, again.clone()).is_err());
        assert!(dup.register(4, again).is_err());
    }

    #[test]
    fn empty_mask_returns_source_and_sampling_is_deterministic() {
        let (reg, data) = tiny_registry();
        let cfg = SamplerConfig {
            n_steps: 4,
            ..Default::default()
        };
        let empty = BinaryMask::new(1, Array2::zeros((16, 16))).unwrap();
        let out = sample_inpaint(&reg, 1, &data[0].image, &empty, &cfg, 3, None).unwrap();
        assert_eq!(out, data[0].image);
        let full = BinaryMask::full(1, 16, 16);
        let a = sample_inpaint(&reg, 2, &data[0].image, &full, &cfg, 3, None).unwrap();
        let b = sample_inpaint(&reg, 2, &data[0].image, &full, &cfg, 3, None).unwrap();
        assert_eq!(a, b);
        assert!(sample_inpaint(&reg, 9, &data[0].image, &full, &cfg, 3, None).is_err());
    }

    #[test]
    fn every_intermediate_state_matches_the_noised_source_outside_the_mask() {
        let (reg, data) = tiny_registry();
        let model = reg.get(1).unwrap();
        let x0 = stack_images::<f64>(&[&data[1].image]);
        let m = stack_masks::<f64>(&[&region_mask(&data[1].label_map, 1)]);
        let cfg = SamplerConfig {
            n_steps: 5,
            guidance_scale: 2.0,
            ..Default::default()
        };
        let mut checked = 0;
        let mut obs = |t: Option<usize>, x: &Array4<f64>| {
            let expect = match t {
                None => x0.clone(),
                Some(t) => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(8, "inpaint-step", t as u64));
                    let z = gaussian_noise::<f64>(x0.dim(), &mut rng);
                    forward_diffuse(&x0, t, &z, model.schedule()).unwrap()
                }
            };
            for ((i, &v), &e) in x.indexed_iter().zip(&expect) {
                if m[[0, 0, i.2, i.3]] == 0.0 {
                    assert_eq!(v, e);
                }
            }
            checked += 1;
        };
        inpaint_tensor(
            model.as_ref(),
            0,
            &x0,
            &m,
            model.schedule(),
            &cfg,
            &[8],
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(checked, 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn blend_is_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian_noise::<f64>((1, 3, 5, 5), &mut rng);
            let x0 = gaussian_noise::<f64>((1, 3, 5, 5), &mut rng);
            let m = Array4::from_shape_simple_fn((1, 1, 5, 5), || rng.random_range(0..2) as f64);
            let once = masked_blend(&x, &x0, &m).unwrap();
            prop_assert_eq!(masked_blend(&once, &x0, &m).unwrap(), once);
        }

        #[test]
        fn outside_mask_is_preserved(seed in 0u64..1000) {
            let (reg, data) = REG.with(|r| r.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = BinaryMask::new(1, Array2::from_shape_simple_fn((16, 16), || rng.random_range(0..2u8))).unwrap();
            let src = &data[(seed % 6) as usize].image;
            let cfg = SamplerConfig { n_steps: 3, ..Default::default() };
            let out = sample_inpaint(&reg, 1, src, &mask, &cfg, seed, None).unwrap();
            for ((y, x, c), &v) in out.indexed_iter() {
                if mask.mask[[y, x]] == 0 {
                    prop_assert_eq!(v, src[[y, x, c]]);
                }
            }
        }
    }

    thread_local! {
        static REG: (ModelRegistry<f64>, Vec<SampleRecord>) = tiny_registry();
    }
}
