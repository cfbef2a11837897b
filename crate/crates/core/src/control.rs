//! Edge-conditioned control adapter: a trainable copy of a denoiser's
//! embedding and encoder, fed `input + C(edges)` and injected back into the
//! frozen base through zero-initialised 1×1 convolutions at every encoder
//! level and the bottleneck.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader, CheckpointKind};
use crate::dataset::{extract_soft_edges, BinaryMask, ClassId, EdgeImage, SampleRecord};
use crate::diffusion::unet::{EmbedLayout, EncoderLayout};
use crate::diffusion::{
    ArchDescriptor, Condition, Denoiser, NoisePredictor, PredictionType, PreparedBatch,
    SamplerConfig, TrainConfig, TrainReport,
};
use crate::error::{ensure, Error, Result};
use crate::inpaint::{
    check_inputs, inpaint_images, prepare_inpaint_batch, region_mask, ModelRegistry,
};
use crate::nn::{fit, to_cnhw, to_nchw, AdamConfig, Bound, Conv2d, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::image_to_chw;

pub const DEFAULT_CONDITIONING_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterOptions {
    /// Multiplies the adapter branch after the output projections.
    pub conditioning_scale: f64,
    /// Blur of the mask-derived edge images.
    pub blur_sigma: f64,
    /// Branch scale used while training.
    pub train_scale: f64,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        AdapterOptions {
            conditioning_scale: DEFAULT_CONDITIONING_SCALE,
            blur_sigma: 1.0,
            train_scale: DEFAULT_CONDITIONING_SCALE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlHandle<T: Scalar> {
    base_arch: ArchDescriptor,
    params: ParamStore<T>,
    embed: EmbedLayout,
    encoder: EncoderLayout,
    proj_in: Conv2d,
    proj_out: Vec<Conv2d>,
    pub conditioning_scale: f64,
    pub blur_sigma: f64,
    seed: u64,
    training: serde_json::Value,
}

impl<T: Scalar> ControlHandle<T> {
    /// Copies the base embedding and encoder and adds all-zero projections.
    pub fn new(base: &Denoiser<T>, options: &AdapterOptions, seed: u64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&options.conditioning_scale),
            "conditioning scale {} outside [0, 1]",
            options.conditioning_scale
        );
        ensure!(options.blur_sigma >= 0.0, "blur sigma must be non-negative");
        let arch = base.arch().clone();
        let mut params = ParamStore::new();
        for (name, t) in base.params().iter() {
            if name.starts_with("embed.") || name.starts_with("enc.") {
                params.insert(name, t.clone());
            }
        }
        let proj_in = Conv2d::zeros(&mut params, "ctrl.in", 1, arch.input_channels());
        let proj_out = arch
            .site_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::zeros(&mut params, &format!("ctrl.out{i}"), c, c))
            .collect();
        let embed = EmbedLayout::find(&params).expect("copied embedding");
        let encoder = EncoderLayout::find(&params, &arch).expect("copied encoder");
        Ok(ControlHandle {
            base_arch: arch,
            params,
            embed,
            encoder,
            proj_in,
            proj_out,
            conditioning_scale: options.conditioning_scale,
            blur_sigma: options.blur_sigma,
            seed,
            training: serde_json::Value::Null,
        })
    }

    pub fn base_arch(&self) -> &ArchDescriptor {
        &self.base_arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// True while every projection parameter is exactly zero.
    pub fn projections_are_zero(&self) -> bool {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("ctrl."))
            .all(|(_, t)| t.iter().all(|&v| v == T::zero()))
    }

    fn check_base(&self, base: &Denoiser<T>) -> Result<()> {
        if base.arch() != &self.base_arch {
            return Err(Error::Compatibility {
                expected: self.base_arch.to_string(),
                found: base.arch().to_string(),
            });
        }
        Ok(())
    }

    /// Adds `scale · C(B(input + C(edges; Θs1); θc); Θs2)` to every site.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn inject(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        edges: Var,
        ts: &[usize],
        rows: &[usize],
        scale: f64,
        sites: &mut [Var],
    ) {
        let c = self.proj_in.forward(tape, p, edges);
        let h = tape.add(input, c);
        let emb = self
            .embed
            .forward(tape, p, self.base_arch.embed_dim, ts, rows);
        let copy = self.encoder.forward(tape, p, h, emb);
        for ((site, feat), proj) in sites.iter_mut().zip(copy).zip(&self.proj_out) {
            let r = proj.forward(tape, p, feat);
            let r = tape.scale(r, T::lit(scale));
            *site = tape.add(*site, r);
        }
    }

    /// Edge maps of `masks` as `[N, 1, H, W]`.
    pub fn edge_tensor(&self, masks: &[BinaryMask]) -> Result<Array4<T>> {
        let edges: Vec<EdgeImage<T>> = masks
            .iter()
            .map(|m| extract_soft_edges(m, self.blur_sigma))
            .collect::<Result<_>>()?;
        Ok(stack_edges(
            &edges.iter().map(|e| &e.edges).collect::<Vec<_>>(),
        ))
    }

    /// Wraps `base` so that every prediction routes the encoder through the
    /// adapter with the edges of `masks`.
    pub fn bind<'a>(&'a self, base: &'a Denoiser<T>, masks: &[BinaryMask]) -> Result<SsiCn<'a, T>> {
        self.check_base(base)?;
        ensure!(!masks.is_empty(), "no masks to bind");
        self.bind_edges(base, self.edge_tensor(masks)?)
    }

    /// Like [`bind`](Self::bind) with explicit `[N, 1, H, W]` edge maps.
    pub fn bind_edges<'a>(
        &'a self,
        base: &'a Denoiser<T>,
        edges: Array4<T>,
    ) -> Result<SsiCn<'a, T>> {
        self.check_base(base)?;
        let s = self.base_arch.image_size;
        ensure!(
            edges.dim().1 == 1 && edges.dim().2 == s && edges.dim().3 == s,
            "edge maps must be 1×{s}×{s}, got {:?}",
            edges.shape()
        );
        Ok(SsiCn {
            base,
            handle: self,
            edges,
            scale: self.conditioning_scale,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(
            CheckpointKind::ControlAdapter,
            T::DTYPE,
            serde_json::to_value(&self.base_arch).expect("arch serializes"),
            self.seed,
        );
        h.training = self.training.clone();
        h.extra
            .insert("conditioning_scale".into(), self.conditioning_scale.into());
        h.extra.insert("blur_sigma".into(), self.blur_sigma.into());
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load::<T>(path)?;
        if h.kind != CheckpointKind::ControlAdapter {
            return Err(Error::format(
                path,
                format!("expected a control adapter, found {:?}", h.kind),
            ));
        }
        let arch: ArchDescriptor = serde_json::from_value(h.arch.clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let bad = || Error::format(path, "parameter names do not match the base architecture");
        let embed = EmbedLayout::find(&params).ok_or_else(bad)?;
        let encoder = EncoderLayout::find(&params, &arch).ok_or_else(bad)?;
        let proj_in = Conv2d::find(&params, "ctrl.in", 1).ok_or_else(bad)?;
        let proj_out = (0..arch.site_channels().len())
            .map(|i| Conv2d::find(&params, &format!("ctrl.out{i}"), 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let get = |k: &str| h.extra.get(k).and_then(|v| v.as_f64());
        Ok(ControlHandle {
            conditioning_scale: get("conditioning_scale").unwrap_or(DEFAULT_CONDITIONING_SCALE),
            blur_sigma: get("blur_sigma").unwrap_or(1.0),
            base_arch: arch,
            params,
            embed,
            encoder,
            proj_in,
            proj_out,
            seed: h.seed,
            training: h.training,
        })
    }
}

fn stack_edges<T: Scalar>(edges: &[&Array2<T>]) -> Array4<T> {
    let (h, w) = edges[0].dim();
    let mut out = Array4::zeros((edges.len(), 1, h, w));
    for (i, e) in edges.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(*e);
    }
    out
}

/// A base inpainting model with an adapter attached.
pub struct SsiCn<'a, T: Scalar> {
    base: &'a Denoiser<T>,
    handle: &'a ControlHandle<T>,
    edges: Array4<T>,
    scale: f64,
}

impl<T: Scalar> SsiCn<'_, T> {
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

impl<T: Scalar> NoisePredictor<T> for SsiCn<'_, T> {
    fn prediction_type(&self) -> PredictionType {
        self.base.prediction_type()
    }

    fn predict(&self, x_t: &Array4<T>, ts: &[usize], cond: &Condition<T>) -> Result<Array4<T>> {
        ensure!(
            self.edges.dim().0 == x_t.dim().0,
            "{} edge images for a batch of {}",
            self.edges.dim().0,
            x_t.dim().0
        );
        let rows = self.base.prompt_rows(cond)?;
        let mut inject = |tape: &mut Tape<T>, input: Var, sites: &mut [Var]| -> Result<()> {
            let p = self.handle.params.bind(tape, false);
            let e = tape.leaf(to_cnhw(&self.edges), false);
            self.handle
                .inject(tape, &p, input, e, ts, &rows, self.scale, sites);
            Ok(())
        };
        self.base.predict_with(x_t, ts, cond, Some(&mut inject))
    }
}

/// Encoder sites `y_c` of the combined model for a raw input `S_f`
/// (`[N, in_channels, H, W]`) and edge images `c_f` (`[N, 1, H, W]`).
pub fn adapter_forward<T: Scalar>(
    handle: &ControlHandle<T>,
    base: &Denoiser<T>,
    s_f: &Array4<T>,
    c_f: &Array4<T>,
    ts: &[usize],
    cond: &Condition<T>,
) -> Result<Vec<Array4<T>>> {
    handle.check_base(base)?;
    let arch = handle.base_arch();
    let (n, c, h, w) = s_f.dim();
    ensure!(
        c == arch.input_channels() && h == arch.image_size && w == arch.image_size,
        "feature map {:?} does not match the base input",
        s_f.shape()
    );
    ensure!(
        c_f.dim() == (n, 1, h, w),
        "edge tensor {:?} does not match [{n}, 1, {h}, {w}]",
        c_f.shape()
    );
    base.check_ts(ts, n)?;
    let rows = base.prompt_rows(cond)?;
    let mut tape = Tape::new();
    let bp = base.params().bind(&mut tape, false);
    let ap = handle.params.bind(&mut tape, false);
    let input = tape.leaf(to_cnhw(s_f), false);
    let edges = tape.leaf(to_cnhw(c_f), false);
    let mut sites = base.encoder_sites(&mut tape, &bp, input, ts, &rows);
    handle.inject(
        &mut tape,
        &ap,
        input,
        edges,
        ts,
        &rows,
        handle.conditioning_scale,
        &mut sites,
    );
    Ok(sites.iter().map(|&v| to_nchw(tape.value(v))).collect())
}

/// One adapter training example: image, inpainting region and the edge map
/// that should steer generation inside it.
#[derive(Debug, Clone)]
pub struct AdapterSample<T: Scalar> {
    pub image: Array3<u8>,
    pub mask: BinaryMask,
    pub edges: EdgeImage<T>,
}

/// Examples whose inpainting region is the class mask itself.
pub fn adapter_samples<T: Scalar>(
    records: &[SampleRecord],
    class_id: ClassId,
    blur_sigma: f64,
) -> Result<Vec<AdapterSample<T>>> {
    records
        .iter()
        .filter(|r| r.label_map.iter().any(|&v| v == class_id))
        .map(|r| {
            let mask = BinaryMask::new(class_id, region_mask(&r.label_map, class_id))?;
            Ok(AdapterSample {
                image: r.image.clone(),
                edges: extract_soft_edges(&mask, blur_sigma)?,
                mask,
            })
        })
        .collect()
}

/// Examples whose inpainting region is the class mask grown by `margin`
/// pixels, so the organ's outline inside the region comes from the edges
/// alone.
pub fn dilated_adapter_samples<T: Scalar>(
    records: &[SampleRecord],
    class_id: ClassId,
    blur_sigma: f64,
    margin: usize,
) -> Result<Vec<AdapterSample<T>>> {
    records
        .iter()
        .filter(|r| r.label_map.iter().any(|&v| v == class_id))
        .map(|r| {
            let organ = BinaryMask::new(class_id, region_mask(&r.label_map, class_id))?;
            Ok(AdapterSample {
                image: r.image.clone(),
                edges: extract_soft_edges(&organ, blur_sigma)?,
                mask: organ.dilate(margin),
            })
        })
        .collect()
}

fn adapter_loss_and_grads<T: Scalar>(
    base: &Denoiser<T>,
    handle: &ControlHandle<T>,
    params: &ParamStore<T>,
    batch: &PreparedBatch<T>,
    edges: &Array4<T>,
    scale: f64,
) -> Result<(T, Vec<ArrayD<T>>)> {
    let input = base.input_tensor(&batch.x_t, &batch.cond)?;
    base.check_ts(&batch.ts, batch.x_t.dim().0)?;
    let rows = base.prompt_rows(&batch.cond)?;
    let mut tape = Tape::new();
    let bp = base.params().bind(&mut tape, false);
    let ap = params.bind(&mut tape, true);
    let input = tape.leaf(input, false);
    let e = tape.leaf(to_cnhw(edges), false);
    let mut inject = |tape: &mut Tape<T>, input: Var, sites: &mut [Var]| -> Result<()> {
        handle.inject(tape, &ap, input, e, &batch.ts, &rows, scale, sites);
        Ok(())
    };
    let out = base.forward_tape(&mut tape, &bp, input, &batch.ts, &rows, Some(&mut inject))?;
    let weight = batch.weight.as_ref().map(to_cnhw);
    let loss = tape.mse(out, &to_cnhw(&batch.target), weight.as_ref());
    let g = tape.backward(loss);
    Ok((tape.value(loss)[0], ap.grads(&g, params)))
}

/// Trains a fresh adapter for the model registered under `class_id`, with
/// the base frozen and the base's own diffusion loss.
pub fn train_adapter<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_id: ClassId,
    samples: &[AdapterSample<T>],
    options: &AdapterOptions,
    config: &TrainConfig,
) -> Result<(ControlHandle<T>, TrainReport)> {
    let base: &Arc<Denoiser<T>> = registry.get(class_id)?;
    ensure!(
        !samples.is_empty(),
        "adapter training needs at least one sample"
    );
    ensure!(
        config.steps > 0 && config.batch_size > 0,
        "steps and batch size must be positive"
    );
    let s = base.arch().image_size;
    for smp in samples {
        ensure!(
            smp.image.dim() == (s, s, 3)
                && smp.mask.dim() == (s, s)
                && smp.edges.edges.dim() == (s, s),
            "adapter samples must be {s}×{s}"
        );
    }
    let mut handle = ControlHandle::new(base, options, config.seed)?;
    let images: Vec<Array3<T>> = samples.iter().map(|x| image_to_chw(&x.image)).collect();
    let kind = base.prediction_type();
    let schedule = base.schedule().clone();
    let bs = config.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    let mut params = std::mem::take(handle.params_mut());
    let losses = fit(&mut params, adam, config.steps, |store, _| {
        let mut x0 = Array4::zeros((bs, 3, s, s));
        let mut m = Array4::zeros((bs, 1, s, s));
        let mut e = Array4::zeros((bs, 1, s, s));
        for i in 0..bs {
            let k = rng.random_range(0..samples.len());
            x0.index_axis_mut(Axis(0), i).assign(&images[k]);
            m.slice_mut(s![i, 0, .., ..])
                .assign(&samples[k].mask.mask.mapv(|v| T::lit(v as f64)));
            e.slice_mut(s![i, 0, .., ..])
                .assign(&samples[k].edges.edges);
        }
        let batch = prepare_inpaint_batch(&x0, &m, 0, kind, &schedule, config, &mut rng)?;
        adapter_loss_and_grads(base, &handle, store, &batch, &e, options.train_scale)
    })?;
    *handle.params_mut() = params;
    handle.training =
        serde_json::json!({ "config": config, "options": options, "class_id": class_id });
    Ok((handle, TrainReport { losses }))
}

/// An inpainting model with an adapter attached, ready for sampling.
pub struct SsiCnContext<T: Scalar> {
    pub class_id: ClassId,
    model: Arc<Denoiser<T>>,
    handle: ControlHandle<T>,
}

/// Binds `handle` to the model registered under `class_id`. The registry is
/// not modified.
pub fn attach<T: Scalar>(
    registry: &ModelRegistry<T>,
    class_id: ClassId,
    handle: ControlHandle<T>,
) -> Result<SsiCnContext<T>> {
    let model = registry.get(class_id)?.clone();
    handle.check_base(&model)?;
    Ok(SsiCnContext {
        class_id,
        model,
        handle,
    })
}

impl<T: Scalar> SsiCnContext<T> {
    pub fn handle(&self) -> &ControlHandle<T> {
        &self.handle
    }

    pub fn model(&self) -> &Arc<Denoiser<T>> {
        &self.model
    }

    /// Inpaints `mask` steered by the edges of the same mask.
    pub fn sample(
        &self,
        source: &Array3<u8>,
        mask: &BinaryMask,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<Array3<u8>> {
        let edges = extract_soft_edges(mask, self.handle.blur_sigma)?;
        self.sample_with_edges(source, mask, &edges, config, seed)
    }

    /// Inpaints `mask` steered by arbitrary edges.
    pub fn sample_with_edges(
        &self,
        source: &Array3<u8>,
        mask: &BinaryMask,
        edges: &EdgeImage<T>,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<Array3<u8>> {
        let masks = check_inputs(
            &self.model,
            std::slice::from_ref(source),
            std::slice::from_ref(mask),
            &[seed],
        )?;
        let s = self.model.arch().image_size;
        ensure!(edges.edges.dim() == (s, s), "edge map must be {s}×{s}");
        let cn = self
            .handle
            .bind_edges(&self.model, stack_edges(&[&edges.edges]))?;
        let mut out = inpaint_images(
            &cn,
            &self.model,
            std::slice::from_ref(source),
            &masks,
            config,
            &[seed],
        )?;
        Ok(out.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToyConfig};
    use crate::diffusion::{gaussian_noise, ModelSize};
    use crate::inpaint::{train_ssi, SsiOptions};

    fn registry() -> (ModelRegistry<f64>, Vec<SampleRecord>) {
        let (data, cmap) = generate_toy_dataset(&ToyConfig::new(6, 16, 3), 4).unwrap();
        let opts = SsiOptions {
            size: ModelSize {
                base_channels: 4,
                channel_mults: vec![1, 2],
                embed_dim: 8,
            },
            ..Default::default()
        };
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        };
        let mut reg = ModelRegistry::new();
        for id in [1, 2] {
            let (m, _) = train_ssi(id, &data, &cmap, &opts, &cfg).unwrap();
            reg.register(id, m).unwrap();
        }
        (reg, data)
    }

    fn base_sites(
        base: &Denoiser<f64>,
        x: &Array4<f64>,
        ts: &[usize],
        cond: &Condition<f64>,
    ) -> Vec<Array4<f64>> {
        let rows = base.prompt_rows(cond).unwrap();
        let mut tape = Tape::new();
        let p = base.params().bind(&mut tape, false);
        let input = tape.leaf(to_cnhw(x), false);
        let sites = base.encoder_sites(&mut tape, &p, input, ts, &rows);
        sites.iter().map(|&v| to_nchw(tape.value(v))).collect()
    }

    fn conv1x1(x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> Array4<f64> {
        let (n, ci, h, wd) = x.dim();
        let co = w.shape()[0];
        let mut out = Array4::zeros((n, co, h, wd));
        for i in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[[o]];
                        for c in 0..ci {
                            acc += w[[o, c, 0, 0]] * x[[i, c, y, xx]];
                        }
                        out[[i, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    fn inputs(
        base: &Denoiser<f64>,
        seed: u64,
    ) -> (Array4<f64>, Array4<f64>, Vec<usize>, Condition<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base.arch().input_channels();
        let s_f = gaussian_noise((2, c, 16, 16), &mut rng);
        let c_f = gaussian_noise((2, 1, 16, 16), &mut rng);
        (
            s_f,
            c_f,
            vec![5, 700],
            Condition {
                prompts: vec![Some(0), None],
                extra: None,
            },
        )
    }

    fn randomize(handle: &mut ControlHandle<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = handle.params.names().to_vec();
        for name in names.iter().filter(|n| n.starts_with("ctrl.")) {
            let id = handle.params.find(name).unwrap();
            handle
                .params
                .get_mut(id)
                .mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn zero_initialised_adapter_leaves_every_site_unchanged() {
        let (reg, _) = registry();
        let base = reg.get(1).unwrap();
        let handle = ControlHandle::new(base, &AdapterOptions::default(), 0).unwrap();
        assert!(handle.projections_are_zero());
        let (s_f, c_f, ts, cond) = inputs(base, 1);
        let y = adapter_forward(&handle, base, &s_f, &c_f, &ts, &cond).unwrap();
        let b = base_sites(base, &s_f, &ts, &cond);
        assert_eq!(y.len(), base.arch().site_channels().len());
        assert_eq!(y, b);
    }

    #[test]
    fn sites_follow_the_residual_formula() {
        let (reg, _) = registry();
        let base = reg.get(1).unwrap();
        let mut handle = ControlHandle::new(base, &AdapterOptions::default(), 0).unwrap();
        randomize(&mut handle, 9);
        let (s_f, c_f, ts, cond) = inputs(base, 2);
        let get = |n: &str| handle.params.get(handle.params.find(n).unwrap()).clone();
        let h = &s_f + &conv1x1(&c_f, &get("ctrl.in.weight"), &get("ctrl.in.bias"));
        // The copy starts equal to the base encoder.
        let copy = base_sites(base, &h, &ts, &cond);
        let b = base_sites(base, &s_f, &ts, &cond);
        for scale in [0.0, 0.5, 1.0] {
            handle.conditioning_scale = scale;
            let y = adapter_forward(&handle, base, &s_f, &c_f, &ts, &cond).unwrap();
            for (i, ((yi, bi), ci)) in y.iter().zip(&b).zip(&copy).enumerate() {
                let z = conv1x1(
                    ci,
                    &get(&format!("ctrl.out{i}.weight")),
                    &get(&format!("ctrl.out{i}.bias")),
                );
                let expect = bi + &(z * scale);
                let err = (yi - &expect).mapv(f64::abs).fold(0.0f64, |a, &v| a.max(v));
                assert!(err < 1e-10, "site {i} scale {scale}: {err}");
            }
        }
    }

    #[test]
    fn scale_zero_predicts_like_the_base() {
        let (reg, data) = registry();
        let base = reg.get(2).unwrap();
        let mut handle = ControlHandle::new(base, &AdapterOptions::default(), 0).unwrap();
        randomize(&mut handle, 3);
        let mask = BinaryMask::new(2, region_mask(&data[0].label_map, 2)).unwrap();
        let (s_f, _, ts, cond) = inputs(base, 4);
        let x_t = s_f.slice(s![.., 0..3, .., ..]).to_owned();
        let cond = cond.with_extra(s_f.slice(s![.., 3.., .., ..]).to_owned());
        let cn = handle.bind(base, &[mask.clone(), mask]).unwrap();
        let with = cn.predict(&x_t, &ts, &cond).unwrap();
        let off = handle
            .bind(base, &vec![BinaryMask::full(2, 16, 16); 2])
            .unwrap()
            .with_scale(0.0);
        assert_eq!(
            off.predict(&x_t, &ts, &cond).unwrap(),
            base.predict(&x_t, &ts, &cond).unwrap()
        );
        assert_ne!(with, base.predict(&x_t, &ts, &cond).unwrap());
    }

    #[test]
    fn zero_adapter_sampling_is_bit_identical() {
        let (reg, data) = registry();
        let handle =
            ControlHandle::new(reg.get(1).unwrap(), &AdapterOptions::default(), 0).unwrap();
        let mask = BinaryMask::new(1, region_mask(&data[1].label_map, 1)).unwrap();
        let cfg = SamplerConfig {
            n_steps: 4,
            ..Default::default()
        };
        let plain =
            crate::inpaint::sample_inpaint(&reg, 1, &data[1].image, &mask, &cfg, 11, None).unwrap();
        let ctx = attach(&reg, 1, handle).unwrap();
        assert_eq!(ctx.sample(&data[1].image, &mask, &cfg, 11).unwrap(), plain);
    }

    #[test]
    fn training_starts_at_the_base_loss_and_freezes_the_base() {
        let (reg, data) = registry();
        let before = reg.get(1).unwrap().params().checksum();
        let samples = adapter_samples::<f64>(&data, 1, 1.0).unwrap();
        let cfg = TrainConfig {
            steps: 4,
            lr: 1e-3,
            batch_size: 2,
            seed: 5,
            ..Default::default()
        };
        let (handle, report) =
            train_adapter(&reg, 1, &samples, &AdapterOptions::default(), &cfg).unwrap();
        assert_eq!(reg.get(1).unwrap().params().checksum(), before);
        assert!(!handle.projections_are_zero());

        // Step 0 with zero projections reproduces the base loss on the same batch.
        let base = reg.get(1).unwrap();
        let zero = ControlHandle::new(base, &AdapterOptions::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x0 = Array4::zeros((2, 3, 16, 16));
        let mut m = Array4::zeros((2, 1, 16, 16));
        let mut e = Array4::zeros((2, 1, 16, 16));
        for i in 0..2 {
            let k = rng.random_range(0..samples.len());
            x0.index_axis_mut(Axis(0), i)
                .assign(&image_to_chw(&samples[k].image));
            m.slice_mut(s![i, 0, .., ..])
                .assign(&samples[k].mask.mask.mapv(|v| v as f64));
            e.slice_mut(s![i, 0, .., ..])
                .assign(&samples[k].edges.edges);
        }
        let batch = prepare_inpaint_batch(
            &x0,
            &m,
            0,
            base.prediction_type(),
            base.schedule(),
            &cfg,
            &mut rng,
        )
        .unwrap();
        let (l_adapter, _) =
            adapter_loss_and_grads(base, &zero, zero.params(), &batch, &e, 1.0).unwrap();
        let (l_base, _) = base.loss_and_grads(&batch).unwrap();
        assert_eq!(l_adapter, l_base);
        assert_eq!(report.losses[0], l_base);
    }

    #[test]
    fn adapter_round_trips_and_rejects_other_bases() {
        let (reg, _) = registry();
        let mut handle =
            ControlHandle::new(reg.get(1).unwrap(), &AdapterOptions::default(), 3).unwrap();
        randomize(&mut handle, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        handle.save(&path).unwrap();
        let back = ControlHandle::<f64>::load(&path).unwrap();
        assert_eq!(back.params().checksum(), handle.params().checksum());
        assert_eq!(back.conditioning_scale, 0.5);

        let other = Denoiser::<f64>::new(
            ModelSize {
                base_channels: 8,
                channel_mults: vec![1, 2],
                embed_dim: 8,
            }
            .arch(3, 4, 16, 1),
            PredictionType::Epsilon,
            vec!["x".into()],
            Some(1),
            Default::default(),
            0,
        )
        .unwrap();
        assert!(matches!(
            handle.bind(&other, &[]),
            Err(Error::Compatibility { .. })
        ));
        let mut reg2 = ModelRegistry::new();
        reg2.register(1, other).unwrap();
        assert!(matches!(
            attach(&reg2, 1, handle),
            Err(Error::Compatibility { .. })
        ));
    }
}
