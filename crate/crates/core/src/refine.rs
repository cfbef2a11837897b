//! Whole-frame partial-noising refinement of composed scenes with the
//! scene-level model.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{save_scene_files, CompositeScene};
use crate::dataset::{make_prompt, ClassId, ClassMap, PromptKind, SampleRecord};
use crate::diffusion::{
    denoise_from, forward_diffuse, gaussian_noise, prepare_batch, Condition, Denoiser, ModelSize,
    PredictionType, SamplerConfig, ScheduleParams, SchedulerKind, TrainBatch, TrainConfig,
    TrainReport,
};
use crate::error::{ensure, Result};
use crate::inpaint::ModelRegistry;
use crate::scalar::Scalar;
use crate::tensor::{image_to_chw, stack_images, unstack_images};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub strength: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub guidance_scale: f64,
    pub scheduler_kind: SchedulerKind,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            strength: 0.3,
            n_steps: 10,
            seed: 0,
            guidance_scale: 1.0,
            scheduler_kind: SchedulerKind::Ddim,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.strength),
            "strength {} outside [0, 1]",
            self.strength
        );
        ensure!(self.n_steps >= 1, "n_steps must be at least 1");
        Ok(())
    }

    /// `round(strength · T)`.
    pub fn t_start(&self, t_max: usize) -> usize {
        (self.strength * t_max as f64).round() as usize
    }
}

/// A refined scene; the label map is carried over unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedScene {
    pub image: Array3<u8>,
    pub label_map: Array2<ClassId>,
    pub config: RefineConfig,
}

/// Noised starting state and the timestep it belongs to, or `None` at
/// strength 0. At full strength the state is the noise itself.
pub fn start_state<T: Scalar>(
    model: &Denoiser<T>,
    x0: &Array4<T>,
    config: &RefineConfig,
) -> Result<Option<(Array4<T>, usize)>> {
    config.validate()?;
    let len = model.schedule().len();
    let t_start = config.t_start(len);
    if t_start == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z = gaussian_noise::<T>(x0.dim(), &mut rng);
    let t = t_start - 1;
    if t_start == len {
        return Ok(Some((z, t)));
    }
    Ok(Some((forward_diffuse(x0, t, &z, model.schedule())?, t)))
}

/// Refines with the registry's scene model; `prompt` defaults to the
/// model's first prompt.
pub fn refine<T: Scalar>(
    scene: &CompositeScene,
    registry: &ModelRegistry<T>,
    config: &RefineConfig,
    prompt: Option<&str>,
) -> Result<RefinedScene> {
    refine_with(scene, registry.scene()?, config, prompt)
}

pub fn refine_with<T: Scalar>(
    scene: &CompositeScene,
    model: &Denoiser<T>,
    config: &RefineConfig,
    prompt: Option<&str>,
) -> Result<RefinedScene> {
    let image = refine_image(&scene.image, model, config, prompt)?;
    Ok(RefinedScene {
        image,
        label_map: scene.label_map.clone(),
        config: *config,
    })
}

pub fn refine_image<T: Scalar>(
    image: &Array3<u8>,
    model: &Denoiser<T>,
    config: &RefineConfig,
    prompt: Option<&str>,
) -> Result<Array3<u8>> {
    let s = model.arch().image_size;
    ensure!(
        image.dim() == (s, s, 3),
        "image {:?} does not match the scene model ({s}×{s})",
        image.dim()
    );
    ensure!(
        model.arch().cond_channels == 0,
        "the scene model takes no spatial conditioning"
    );
    let idx = match prompt {
        Some(p) => model.prompt_index(p)?,
        None => 0,
    };
    let x0 = stack_images::<T>(&[image]);
    let Some((x, t)) = start_state(model, &x0, config)? else {
        return Ok(image.clone());
    };
    let sampler = SamplerConfig {
        n_steps: config.n_steps.min(t + 1),
        guidance_scale: config.guidance_scale,
        scheduler_kind: config.scheduler_kind,
        ..Default::default()
    };
    let out = denoise_from(
        model,
        x,
        t,
        &Condition::prompt(idx, 1),
        model.schedule(),
        &sampler,
        None,
    )?;
    Ok(unstack_images(&out).remove(0))
}

impl RefinedScene {
    /// Writes `<stem>_refined.png`, its label map and sidecar.
    pub fn save(
        &self,
        dir: &Path,
        stem: &str,
        scene: &CompositeScene,
        class_map: &ClassMap,
    ) -> Result<Vec<PathBuf>> {
        let extra = serde_json::json!({ "refine": self.config });
        save_scene_files(
            dir,
            &format!("{stem}_refined"),
            &self.image,
            &self.label_map,
            scene,
            class_map,
            Some(extra),
        )
    }
}

/// Trains the unconditioned scene model on whole frames with the scene
/// prompt.
pub fn train_scene_model<T: Scalar>(
    dataset: &[SampleRecord],
    class_map: &ClassMap,
    size: &ModelSize,
    schedule: ScheduleParams,
    config: &TrainConfig,
) -> Result<(Denoiser<T>, TrainReport)> {
    ensure!(!dataset.is_empty(), "scene model needs training images");
    let (h, w, _) = dataset[0].image.dim();
    ensure!(h == w, "square images required, got {h}×{w}");
    for r in dataset {
        ensure!(
            r.image.dim() == (h, w, 3),
            "record {} has a different resolution",
            r.id
        );
    }
    let prompt = make_prompt(0, class_map, PromptKind::Scene)?;
    let arch = size.arch(3, 0, h, 1);
    let kind = PredictionType::Epsilon;
    let mut model = Denoiser::new(arch, kind, vec![prompt], None, schedule, config.seed)?;
    let images: Vec<Array3<T>> = dataset.iter().map(|r| image_to_chw(&r.image)).collect();
    let sched = model.schedule().clone();
    let bs = config.batch_size;
    let report = model.train(config, |rng| {
        let mut x0 = Array4::zeros((bs, 3, h, w));
        for i in 0..bs {
            let k = rng.random_range(0..images.len());
            x0.index_axis_mut(Axis(0), i).assign(&images[k]);
        }
        let batch = TrainBatch {
            x0,
            cond: Condition::prompt(0, bs),
        };
        prepare_batch(&batch, kind, &sched, config.p_uncond, rng)
    })?;
    model.set_training_meta(serde_json::json!({ "config": config, "n_samples": dataset.len() }));
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::BackgroundSource;
    use crate::dataset::{generate_toy_dataset, ToyConfig};

    fn model() -> (Denoiser<f64>, Vec<SampleRecord>) {
        let (data, cm) = generate_toy_dataset(&ToyConfig::new(6, 16, 3), 3).unwrap();
        let size = ModelSize {
            base_channels: 4,
            channel_mults: vec![1, 2],
            embed_dim: 8,
        };
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        (
            train_scene_model(&data, &cm, &size, ScheduleParams::default(), &cfg)
                .unwrap()
                .0,
            data,
        )
    }

    fn scene(r: &SampleRecord) -> CompositeScene {
        CompositeScene {
            image: r.image.clone(),
            label_map: r.label_map.clone(),
            provenance: vec![],
            background_source: BackgroundSource::SourceImage,
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let (m, data) = model();
        let cfg = RefineConfig {
            strength: 0.0,
            ..Default::default()
        };
        let out = refine_with(&scene(&data[0]), &m, &cfg, None).unwrap();
        assert_eq!(out.image, data[0].image);
        assert_eq!(out.label_map, data[0].label_map);
    }

    #[test]
    fn full_strength_start_ignores_the_input() {
        let (m, data) = model();
        let cfg = RefineConfig {
            strength: 1.0,
            seed: 4,
            ..Default::default()
        };
        let a = start_state(&m, &stack_images::<f64>(&[&data[0].image]), &cfg)
            .unwrap()
            .unwrap();
        let b = start_state(&m, &stack_images::<f64>(&[&data[1].image]), &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1, 999);
        let half = RefineConfig {
            strength: 0.5,
            ..cfg
        };
        let (_, t) = start_state(&m, &stack_images::<f64>(&[&data[0].image]), &half)
            .unwrap()
            .unwrap();
        assert_eq!(t, 499);
    }

    #[test]
    fn refinement_is_deterministic_and_keeps_labels() {
        let (m, data) = model();
        let cfg = RefineConfig {
            strength: 0.4,
            n_steps: 3,
            seed: 7,
            ..Default::default()
        };
        let s = scene(&data[2]);
        let a = refine_with(&s, &m, &cfg, None).unwrap();
        assert_eq!(
            a,
            refine_with(&s, &m, &cfg, Some("an image in cholec")).unwrap()
        );
        assert_eq!(a.label_map, s.label_map);
        assert!(refine_with(
            &s,
            &m,
            &RefineConfig {
                strength: 1.5,
                ..cfg
            },
            None
        )
        .is_err());
        assert!(refine(&s, &ModelRegistry::<f64>::new(), &cfg, None).is_err());
    }
}
