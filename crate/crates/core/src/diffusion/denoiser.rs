use std::path::Path;

use ndarray::{concatenate, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::process::{forward_diffuse_batch, gaussian_noise, training_target, PredictionType};
use super::schedule::{NoiseSchedule, ScheduleParams};
use super::unet::{expected_shapes, ArchDescriptor, UNetLayout};
use crate::checkpoint::{self, CheckpointHeader, CheckpointKind};
use crate::dataset::ClassId;
use crate::error::{ensure, Error, Result};
use crate::nn::{fit, to_cnhw, to_nchw, AdamConfig, Bound, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// Probability of replacing the prompt by the null prompt during training.
pub const DEFAULT_P_UNCOND: f64 = 0.1;

/// Per-sample conditioning. `prompts[i] == None` is the null prompt; `extra`
/// holds channels concatenated to the noisy input (mask and masked image for
/// inpainting models) and is kept when the prompt is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub prompts: Vec<Option<usize>>,
    pub extra: Option<Array4<T>>,
}

impl<T: Scalar> Condition<T> {
    pub fn prompt(index: usize, n: usize) -> Self {
        Condition {
            prompts: vec![Some(index); n],
            extra: None,
        }
    }

    pub fn null(n: usize) -> Self {
        Condition {
            prompts: vec![None; n],
            extra: None,
        }
    }

    pub fn with_extra(mut self, extra: Array4<T>) -> Self {
        self.extra = Some(extra);
        self
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Same spatial conditioning, null prompt everywhere.
    pub fn unconditional(&self) -> Self {
        Condition {
            prompts: vec![None; self.prompts.len()],
            extra: self.extra.clone(),
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.prompts.iter().all(Option::is_none)
    }
}

/// Anything that maps `(x_t, t, condition)` to a raw prediction of the same
/// shape as `x_t`.
pub trait NoisePredictor<T: Scalar> {
    fn prediction_type(&self) -> PredictionType;

    fn predict(&self, x_t: &Array4<T>, ts: &[usize], cond: &Condition<T>) -> Result<Array4<T>>;
}

/// Clean images with their conditioning.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub x0: Array4<T>,
    pub cond: Condition<T>,
}

/// A batch after noising: model input, timesteps, possibly dropped
/// conditioning and the regression target.
#[derive(Debug, Clone)]
pub struct PreparedBatch<T> {
    pub x_t: Array4<T>,
    pub ts: Vec<usize>,
    pub cond: Condition<T>,
    pub target: Array4<T>,
    /// Per-element loss weights; `None` is a plain mean.
    pub weight: Option<Array4<T>>,
}

/// Draws `t`, then `z`, then the dropout decisions, in that order.
pub fn prepare_batch<T: Scalar>(
    batch: &TrainBatch<T>,
    kind: PredictionType,
    schedule: &NoiseSchedule<T>,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch<T>> {
    let n = batch.x0.len_of(Axis(0));
    ensure!(n > 0, "empty training batch");
    ensure!(
        batch.cond.len() == n,
        "condition has {} entries for {n} samples",
        batch.cond.len()
    );
    ensure!(
        (0.0..=1.0).contains(&p_uncond),
        "p_uncond {p_uncond} outside [0, 1]"
    );
    let ts: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..schedule.len()))
        .collect();
    let z = gaussian_noise::<T>(batch.x0.dim(), rng);
    let mut cond = batch.cond.clone();
    for p in cond.prompts.iter_mut() {
        if rng.random::<f64>() < p_uncond {
            *p = None;
        }
    }
    Ok(PreparedBatch {
        x_t: forward_diffuse_batch(&batch.x0, &ts, &z, schedule)?,
        target: training_target(kind, &batch.x0, &z, &ts, schedule)?,
        ts,
        cond,
        weight: None,
    })
}

fn mse<T: Scalar>(pred: &Array4<T>, batch: &PreparedBatch<T>) -> Result<T> {
    ensure!(
        pred.shape() == batch.target.shape(),
        "prediction shape {:?} != target shape {:?}",
        pred.shape(),
        batch.target.shape()
    );
    let mut sum = T::zero();
    let denom = match &batch.weight {
        Some(w) => {
            for ((&p, &t), &w) in pred.iter().zip(&batch.target).zip(w) {
                sum += w * (p - t) * (p - t);
            }
            w.sum().max(T::one())
        }
        None => {
            for (&p, &t) in pred.iter().zip(&batch.target) {
                sum += (p - t) * (p - t);
            }
            T::lit(pred.len() as f64)
        }
    };
    Ok(sum / denom)
}

/// Denoising loss with the default dropout probability.
pub fn training_loss<T: Scalar>(
    model: &impl NoisePredictor<T>,
    batch: &TrainBatch<T>,
    schedule: &NoiseSchedule<T>,
    seed: u64,
) -> Result<T> {
    training_loss_with(model, batch, schedule, DEFAULT_P_UNCOND, seed)
}

pub fn training_loss_with<T: Scalar>(
    model: &impl NoisePredictor<T>,
    batch: &TrainBatch<T>,
    schedule: &NoiseSchedule<T>,
    p_uncond: f64,
    seed: u64,
) -> Result<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared = prepare_batch(batch, model.prediction_type(), schedule, p_uncond, &mut rng)?;
    let pred = model.predict(&prepared.x_t, &prepared.ts, &prepared.cond)?;
    mse(&pred, &prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub p_uncond: f64,
    /// Restrict the inpainting loss to masked pixels. Off by default.
    #[serde(default)]
    pub masked_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            lr: 1e-5,
            batch_size: 8,
            seed: 0,
            p_uncond: DEFAULT_P_UNCOND,
            masked_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean loss over the last `k` steps.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Callback that may add residuals to the encoder's injection sites. Gets
/// the tape, the model input and the site features.
pub(crate) type SiteInjector<'a, T> = dyn FnMut(&mut Tape<T>, Var, &mut [Var]) -> Result<()> + 'a;

/// Conditional U-Net noise predictor.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar> {
    arch: ArchDescriptor,
    prediction_type: PredictionType,
    prompts: Vec<String>,
    class_id: Option<ClassId>,
    schedule_params: ScheduleParams,
    schedule: NoiseSchedule<T>,
    params: ParamStore<T>,
    layout: UNetLayout,
    training: serde_json::Value,
    seed: u64,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(
        arch: ArchDescriptor,
        prediction_type: PredictionType,
        prompts: Vec<String>,
        class_id: Option<ClassId>,
        schedule_params: ScheduleParams,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        ensure!(
            prompts.len() == arch.n_prompts,
            "{} prompts given, architecture expects {}",
            prompts.len(),
            arch.n_prompts
        );
        let schedule = schedule_params.build()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = UNetLayout::init(&mut params, &arch, &mut rng);
        Ok(Denoiser {
            arch,
            prediction_type,
            prompts,
            class_id,
            schedule_params,
            schedule,
            params,
            layout,
            training: serde_json::Value::Null,
            seed,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn prompt_index(&self, prompt: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::Lookup(format!("prompt {prompt:?} unknown to this model")))
    }

    pub fn class_id(&self) -> Option<ClassId> {
        self.class_id
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    pub fn schedule_params(&self) -> &ScheduleParams {
        &self.schedule_params
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training_meta(&self) -> &serde_json::Value {
        &self.training
    }

    pub fn set_training_meta(&mut self, meta: serde_json::Value) {
        self.training = meta;
    }

    /// Model input in tape layout: `x_t` followed by the extra channels.
    pub(crate) fn input_tensor(&self, x_t: &Array4<T>, cond: &Condition<T>) -> Result<ArrayD<T>> {
        let (n, c, h, w) = x_t.dim();
        let s = self.arch.image_size;
        ensure!(
            c == self.arch.data_channels && h == s && w == s,
            "input {:?} does not match model shape [_, {}, {s}, {s}]",
            x_t.shape(),
            self.arch.data_channels
        );
        ensure!(
            n > 0 && cond.len() == n,
            "condition has {} entries for {n} samples",
            cond.len()
        );
        match (&cond.extra, self.arch.cond_channels) {
            (None, 0) => Ok(to_cnhw(x_t)),
            (Some(e), k) if k > 0 => {
                ensure!(
                    e.dim() == (n, k, h, w),
                    "conditioning channels {:?} do not match [{n}, {k}, {h}, {w}]",
                    e.shape()
                );
                let full = concatenate(Axis(1), &[x_t.view(), e.view()]).unwrap();
                Ok(to_cnhw(&full))
            }
            (_, k) => Err(Error::Validation(format!(
                "model expects {k} conditioning channels, condition {} them",
                if cond.extra.is_some() {
                    "supplies"
                } else {
                    "lacks"
                }
            ))),
        }
    }

    pub(crate) fn prompt_rows(&self, cond: &Condition<T>) -> Result<Vec<usize>> {
        cond.prompts
            .iter()
            .map(|p| match p {
                None => Ok(0),
                Some(i) if *i < self.arch.n_prompts => Ok(i + 1),
                Some(i) => Err(Error::Lookup(format!("prompt index {i} out of range"))),
            })
            .collect()
    }

    pub(crate) fn check_ts(&self, ts: &[usize], n: usize) -> Result<()> {
        ensure!(ts.len() == n, "{} timesteps for {n} samples", ts.len());
        ensure!(
            ts.iter().all(|&t| t < self.schedule.len()),
            "timestep out of range [0, {})",
            self.schedule.len()
        );
        Ok(())
    }

    pub(crate) fn encoder_sites(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        ts: &[usize],
        rows: &[usize],
    ) -> Vec<Var> {
        let emb = self
            .layout
            .embed
            .forward(tape, p, self.arch.embed_dim, ts, rows);
        self.layout.encoder.forward(tape, p, input, emb)
    }

    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        input: Var,
        ts: &[usize],
        rows: &[usize],
        inject: Option<&mut SiteInjector<'_, T>>,
    ) -> Result<Var> {
        let emb = self
            .layout
            .embed
            .forward(tape, p, self.arch.embed_dim, ts, rows);
        let mut sites = self.layout.encoder.forward(tape, p, input, emb);
        if let Some(f) = inject {
            f(tape, input, &mut sites)?;
        }
        Ok(self.layout.decoder.forward(tape, p, input, &sites, emb))
    }

    pub(crate) fn predict_with(
        &self,
        x_t: &Array4<T>,
        ts: &[usize],
        cond: &Condition<T>,
        inject: Option<&mut SiteInjector<'_, T>>,
    ) -> Result<Array4<T>> {
        let input = self.input_tensor(x_t, cond)?;
        self.check_ts(ts, x_t.len_of(Axis(0)))?;
        let rows = self.prompt_rows(cond)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let input = tape.leaf(input, false);
        let out = self.forward_tape(&mut tape, &p, input, ts, &rows, inject)?;
        Ok(to_nchw(tape.value(out)))
    }

    /// Loss and parameter gradients for one prepared batch.
    pub fn loss_and_grads(&self, batch: &PreparedBatch<T>) -> Result<(T, Vec<ArrayD<T>>)> {
        Self::loss_and_grads_for(self, &self.params, batch)
    }

    fn loss_and_grads_for(
        model: &Self,
        params: &ParamStore<T>,
        batch: &PreparedBatch<T>,
    ) -> Result<(T, Vec<ArrayD<T>>)> {
        let input = model.input_tensor(&batch.x_t, &batch.cond)?;
        model.check_ts(&batch.ts, batch.x_t.len_of(Axis(0)))?;
        let rows = model.prompt_rows(&batch.cond)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let input = tape.leaf(input, false);
        let out = model.forward_tape(&mut tape, &p, input, &batch.ts, &rows, None)?;
        let weight = batch.weight.as_ref().map(to_cnhw);
        let loss = tape.mse(out, &to_cnhw(&batch.target), weight.as_ref());
        let g = tape.backward(loss);
        Ok((tape.value(loss)[0], p.grads(&g, params)))
    }

    /// Optimises all parameters with Adam. `next_batch` supplies each step's
    /// prepared batch from the shared training generator.
    pub fn train(
        &mut self,
        config: &TrainConfig,
        mut next_batch: impl FnMut(&mut ChaCha8Rng) -> Result<PreparedBatch<T>>,
    ) -> Result<TrainReport> {
        ensure!(
            config.steps > 0 && config.batch_size > 0,
            "steps and batch size must be positive"
        );
        ensure!(config.lr > 0.0, "learning rate must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adam = AdamConfig {
            lr: config.lr,
            ..Default::default()
        };
        let mut params = std::mem::take(&mut self.params);
        let result = fit(&mut params, adam, config.steps, |store, _| {
            let batch = next_batch(&mut rng)?;
            Self::loss_and_grads_for(self, store, &batch)
        });
        self.params = params;
        let losses = result?;
        self.training = serde_json::to_value(config).expect("config serializes");
        Ok(TrainReport { losses })
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(
            CheckpointKind::Denoiser,
            T::DTYPE,
            serde_json::to_value(&self.arch).expect("arch serializes"),
            self.seed,
        );
        h.prediction_type = Some(self.prediction_type);
        h.schedule = Some(self.schedule_params);
        h.class_id = self.class_id;
        h.prompts = self.prompts.clone();
        h.training = self.training.clone();
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load::<T>(path)?;
        if h.kind != CheckpointKind::Denoiser {
            return Err(Error::format(
                path,
                format!("expected a denoiser checkpoint, found {:?}", h.kind),
            ));
        }
        let arch: ArchDescriptor = serde_json::from_value(h.arch.clone())
            .map_err(|e| Error::format(path, e.to_string()))?;
        arch.validate()?;
        checkpoint::check_shapes(path, &params, &expected_shapes::<T>(&arch))?;
        let layout = UNetLayout::find(&params, &arch)
            .ok_or_else(|| Error::format(path, "parameter names do not match the architecture"))?;
        let schedule_params = h
            .schedule
            .ok_or_else(|| Error::format(path, "denoiser checkpoint lacks a schedule"))?;
        let prediction_type = h
            .prediction_type
            .ok_or_else(|| Error::format(path, "denoiser checkpoint lacks a prediction type"))?;
        Ok(Denoiser {
            schedule: schedule_params.build()?,
            arch,
            prediction_type,
            prompts: h.prompts,
            class_id: h.class_id,
            schedule_params,
            params,
            layout,
            training: h.training,
            seed: h.seed,
        })
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn prediction_type(&self) -> PredictionType {
        self.prediction_type
    }

    fn predict(&self, x_t: &Array4<T>, ts: &[usize], cond: &Condition<T>) -> Result<Array4<T>> {
        self.predict_with(x_t, ts, cond, None)
    }
}
