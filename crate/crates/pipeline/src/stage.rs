//! The pipeline stages and the runner that records them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use synth_core::compose::{
    render_organs, BackgroundSource, CompositeScene, OrganRender, RenderProvenance,
    SynthesisOptions,
};
use synth_core::control::{dilated_adapter_samples, train_adapter, AdapterOptions, ControlHandle};
use synth_core::dataset::{
    class_areas, generate_toy_dataset, generate_toy_label_maps, load_dataset, read_label_png,
    read_rgb_png, write_dataset, write_label_png, write_rgb_png, BinaryMask, ClassId, ClassMap,
    SampleRecord, Split, ToyConfig,
};
use synth_core::diffusion::{SamplerConfig, ScheduleParams, TrainConfig};
use synth_core::inpaint::{region_mask, train_ssi, ModelRegistry, SsiOptions};
use synth_core::metrics::{
    aggregate_reports, frechet_distance, gaussian_mmd, kid, toy_feature_extractor,
    FeatureExtractor, PerceptualDistance, SegMetricReport,
};
use synth_core::refine::{refine_with, train_scene_model, RefineConfig};
use synth_core::seed::derive_seed;
use synth_core::segment::{
    comparison_table, evaluate_segmenter, train_segmenter, SegModelConfig, Segmenter,
    TrainingScheme,
};

use crate::config::{DataSource, ExperimentConfig, MaskSource};
use crate::error::{PipelineError, Result};
use crate::figure::emit_figure_grid;
use crate::manifest::{collect_artifacts, run_dir, ExperimentManifest, StageRecord, StageRef};

type F = f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    TrainSsiAll,
    TrainAdapter,
    GenerateOrgans,
    Compose,
    Refine,
    EvaluateQuality,
    SegTrain,
    SegEval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::TrainSsiAll,
        Stage::TrainAdapter,
        Stage::GenerateOrgans,
        Stage::Compose,
        Stage::Refine,
        Stage::EvaluateQuality,
        Stage::SegTrain,
        Stage::SegEval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainSsiAll => "train_ssi_all",
            Stage::TrainAdapter => "train_adapter",
            Stage::GenerateOrgans => "generate_organs",
            Stage::Compose => "compose",
            Stage::Refine => "refine",
            Stage::EvaluateQuality => "evaluate_quality",
            Stage::SegTrain => "seg_train",
            Stage::SegEval => "seg_eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PipelineError::Config {
                path: "stage".into(),
                message: format!("unknown stage `{s}`"),
            })
    }
}

/// Directory holding the experiments, from `SYNTH_ARTIFACT_ROOT` or
/// `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(crate::ARTIFACT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

/// One experiment: a configuration, a seed and a directory under the
/// artifact root.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Default)]
struct StageOutput {
    summary: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    logs: Vec<(String, String)>,
}

/// Seed of item `index` of `stage`.
pub fn stage_seed(experiment_seed: u64, stage: Stage, label: &str, index: u64) -> u64 {
    if label.is_empty() {
        derive_seed(experiment_seed, stage.name(), index)
    } else {
        derive_seed(experiment_seed, &format!("{}/{label}", stage.name()), index)
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| PipelineError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        io(p, fs::create_dir_all(p))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    io(path, fs::write(path, text))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| synth_core::Error::format(path, e.to_string()).into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneInfo {
    id: String,
    /// Record the organs were inpainted into, on the real-mask path.
    source_id: Option<String>,
    background_source: BackgroundSource,
    provenance: Vec<RenderProvenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegRun {
    name: String,
    scheme: TrainingScheme,
    seed_index: usize,
    checkpoint: String,
}

/// Everything an ingest run wrote.
pub struct Ingested {
    pub records: Vec<SampleRecord>,
    pub class_map: ClassMap,
    pub simulated: Vec<Array2<ClassId>>,
}

impl Ingested {
    pub fn split(&self, split: Split) -> Vec<SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect()
    }
}

impl Experiment {
    /// `seed` and `experiment_id` override the configuration.
    pub fn new(
        root: impl Into<PathBuf>,
        mut config: ExperimentConfig,
        seed: Option<u64>,
        experiment_id: Option<&str>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            config.experiment.seed = s;
        }
        if let Some(id) = experiment_id {
            config.experiment.id = id.to_string();
        }
        config.validate()?;
        Ok(Experiment {
            root: root.into(),
            config,
        })
    }

    /// Reopens an experiment with the configuration of its latest run.
    pub fn open(root: impl Into<PathBuf>, experiment_id: &str) -> Result<Self> {
        let root = root.into();
        let dir = root.join(experiment_id);
        let m = ExperimentManifest::load(&dir)?;
        let config =
            ExperimentConfig::load(&dir.join("configs").join(format!("{}.toml", m.config_hash)))?;
        Experiment::new(root, config, None, Some(experiment_id))
    }

    pub fn id(&self) -> &str {
        &self.config.experiment.id
    }

    pub fn seed(&self) -> u64 {
        self.config.experiment.seed
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(self.id())
    }

    pub fn manifest(&self) -> Result<ExperimentManifest> {
        ExperimentManifest::load_or_new(&self.dir(), self.id())
    }

    /// Stages whose latest run `stage` reads; the first missing one is
    /// reported as a dependency error.
    fn inputs(&self, stage: Stage, m: &ExperimentManifest) -> Result<Vec<StageRef>> {
        let c = &self.config;
        let mut need = Vec::new();
        let mut optional = Vec::new();
        let external_models = c.generate.registry_dir.is_some();
        match stage {
            Stage::Ingest => {}
            Stage::TrainSsiAll => need.push(Stage::Ingest),
            Stage::TrainAdapter => need.extend([Stage::Ingest, Stage::TrainSsiAll]),
            Stage::GenerateOrgans => {
                need.push(Stage::Ingest);
                if c.generate.mask_source == MaskSource::Real || !external_models {
                    need.push(Stage::TrainSsiAll);
                }
                if c.generate.use_adapter {
                    need.push(Stage::TrainAdapter);
                }
            }
            Stage::Compose => need.extend([Stage::Ingest, Stage::GenerateOrgans]),
            Stage::Refine => {
                need.extend([Stage::Ingest, Stage::Compose]);
                if external_models {
                    optional.push(Stage::TrainSsiAll);
                } else {
                    need.push(Stage::TrainSsiAll);
                }
            }
            Stage::EvaluateQuality => {
                need.extend([Stage::Ingest, Stage::Compose]);
                if c.evaluate_quality.use_refined {
                    optional.push(Stage::Refine);
                }
            }
            Stage::SegTrain => {
                need.push(Stage::Ingest);
                if c.seg.schemes.iter().any(|k| k.uses_synthetic()) {
                    need.push(if c.seg.use_refined {
                        Stage::Refine
                    } else {
                        Stage::Compose
                    });
                }
            }
            Stage::SegEval => need.extend([Stage::Ingest, Stage::SegTrain]),
            Stage::Report => {
                need.push(Stage::Ingest);
                optional.extend(
                    Stage::ALL
                        .into_iter()
                        .filter(|&s| s != Stage::Report && s != Stage::Ingest),
                );
            }
        }
        let mut refs = Vec::new();
        for s in need {
            let r = m
                .latest(s)
                .ok_or(PipelineError::Dependency { stage, missing: s })?;
            refs.push(r.reference());
        }
        refs.extend(
            optional
                .into_iter()
                .filter_map(|s| m.latest(s).map(|r| r.reference())),
        );
        refs.sort();
        Ok(refs)
    }

    /// Runs `stage` against the latest runs of its prerequisites and appends
    /// its record to the manifest.
    pub fn run(&self, stage: Stage) -> Result<StageRecord> {
        let exp = self.dir();
        let mut m = self.manifest()?;
        let inputs = self.inputs(stage, &m)?;
        let run = m.next_run(stage);
        let out = exp.join(run_dir(stage, run));
        if out.exists() {
            io(&out, fs::remove_dir_all(&out))?;
        }
        io(&out, fs::create_dir_all(&out))?;
        let snapshot = exp
            .join("configs")
            .join(format!("{}.toml", self.config.hash()));
        if !snapshot.exists() {
            io(
                &exp.join("configs"),
                fs::create_dir_all(exp.join("configs")),
            )?;
            io(&snapshot, fs::write(&snapshot, self.config.to_toml()))?;
        }

        let ctx = Ctx {
            exp: self,
            manifest: &m,
            inputs: &inputs,
            out: &out,
            stage,
        };
        let start = Instant::now();
        let result = match stage {
            Stage::Ingest => ctx.ingest(),
            Stage::TrainSsiAll => ctx.train_ssi_all(),
            Stage::TrainAdapter => ctx.train_adapter(),
            Stage::GenerateOrgans => ctx.generate_organs(),
            Stage::Compose => ctx.compose(),
            Stage::Refine => ctx.refine(),
            Stage::EvaluateQuality => ctx.evaluate_quality(),
            Stage::SegTrain => ctx.seg_train(),
            Stage::SegEval => ctx.seg_eval(),
            Stage::Report => ctx.report(),
        };
        let output = match result {
            Ok(o) => o,
            Err(e) => {
                let _ = fs::remove_dir_all(&out);
                return Err(e);
            }
        };
        let wall_time_s = start.elapsed().as_secs_f64();
        let outputs = collect_artifacts(&exp, &out)?;
        let mut logs = Vec::new();
        for (name, text) in &output.logs {
            let p = out.join(name);
            io(&p, fs::write(&p, text))?;
            logs.push(crate::manifest::relative(&exp, &p)?);
        }
        let record = StageRecord {
            stage,
            run,
            seed: self.seed(),
            config_hash: self.config.hash(),
            inputs,
            outputs,
            logs,
            seeds: output.seeds,
            wall_time_s,
            summary: output.summary,
        };
        m.append(record.clone())?;
        m.save(&exp)?;
        Ok(record)
    }

    /// Every stage in pipeline order. `train_adapter` runs only when
    /// generation uses adapters, `refine` only when enabled.
    pub fn run_all(&self) -> Result<Vec<StageRecord>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let skip = match stage {
                Stage::TrainAdapter => !self.config.generate.use_adapter,
                Stage::Refine => !self.config.refine.enabled,
                _ => false,
            };
            if skip {
                continue;
            }
            out.push(self.run(stage)?);
        }
        Ok(out)
    }

    pub fn load_ingest(&self, r: &StageRecord) -> Result<Ingested> {
        let dir = self.dir().join(r.dir());
        let class_map = ClassMap::load(&dir.join("class_map.json"))?;
        let records = load_dataset(&dir.join("dataset/manifest.jsonl"), &class_map)?;
        let mut simulated = Vec::new();
        let sim = dir.join("simulated");
        if sim.is_dir() {
            for p in sorted_pngs(&sim)? {
                simulated.push(read_label_png(&p)?);
            }
        }
        Ok(Ingested {
            records,
            class_map,
            simulated,
        })
    }

    /// The composite (or refined) scenes of a compose (or refine) run.
    pub fn load_scenes(&self, r: &StageRecord, class_map: &ClassMap) -> Result<Vec<SampleRecord>> {
        Ok(load_dataset(
            &self.dir().join(r.dir()).join("dataset/manifest.jsonl"),
            class_map,
        )?)
    }
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = io(dir, fs::read_dir(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    out.sort();
    Ok(out)
}

struct Ctx<'a> {
    exp: &'a Experiment,
    manifest: &'a ExperimentManifest,
    inputs: &'a [StageRef],
    out: &'a Path,
    stage: Stage,
}

impl Ctx<'_> {
    fn cfg(&self) -> &ExperimentConfig {
        &self.exp.config
    }

    fn input(&self, stage: Stage) -> Option<&StageRecord> {
        self.inputs
            .iter()
            .find(|r| r.stage == stage)
            .and_then(|r| self.manifest.get(*r))
    }

    fn required(&self, stage: Stage) -> Result<&StageRecord> {
        self.input(stage).ok_or(PipelineError::Dependency {
            stage: self.stage,
            missing: stage,
        })
    }

    fn input_dir(&self, stage: Stage) -> Result<PathBuf> {
        Ok(self.exp.dir().join(self.required(stage)?.dir()))
    }

    fn seed(&self, label: &str, index: u64) -> u64 {
        stage_seed(self.exp.seed(), self.stage, label, index)
    }

    fn ingested(&self) -> Result<Ingested> {
        self.exp.load_ingest(self.required(Stage::Ingest)?)
    }

    fn registry(&self) -> Result<ModelRegistry<F>> {
        match self.input(Stage::TrainSsiAll) {
            Some(r) => Ok(ModelRegistry::load(
                &self.exp.dir().join(r.dir()).join("models"),
            )?),
            None => {
                let dir =
                    self.cfg()
                        .generate
                        .registry_dir
                        .as_ref()
                        .ok_or(PipelineError::Dependency {
                            stage: self.stage,
                            missing: Stage::TrainSsiAll,
                        })?;
                Ok(ModelRegistry::load(dir)?)
            }
        }
    }

    fn ingest(&self) -> Result<StageOutput> {
        let c = &self.cfg().ingest;
        let mut seeds = BTreeMap::new();
        let (records, class_map) = match c.source {
            DataSource::Toy => {
                let s = self.seed("dataset", 0);
                seeds.insert("dataset".into(), s);
                generate_toy_dataset(&c.toy, s)?
            }
            DataSource::Directory => {
                let cm = ClassMap::load(c.class_map.as_ref().expect("validated"))?;
                let recs = load_dataset(c.dataset_manifest.as_ref().expect("validated"), &cm)?;
                (recs, cm)
            }
        };
        let mut simulated = Vec::new();
        if c.simulated_masks > 0 {
            let s = self.seed("simulated", 0);
            seeds.insert("simulated".into(), s);
            let toy = ToyConfig {
                n_samples: c.simulated_masks,
                n_test: 0,
                ..c.toy
            };
            simulated.extend(generate_toy_label_maps(&toy, s)?);
        }
        if let Some(dir) = &c.simulated_dir {
            for p in sorted_pngs(dir)? {
                let m = read_label_png(&p)?;
                if let Some(v) = m.iter().find(|&&v| !class_map.is_valid_label(v)) {
                    return Err(synth_core::Error::Validation(format!(
                        "{}: label {v} is not in the class map",
                        p.display()
                    ))
                    .into());
                }
                simulated.push(m);
            }
        }
        write_dataset(&records, &self.out.join("dataset"), &class_map)?;
        class_map.save(&self.out.join("class_map.json"))?;
        for (i, m) in simulated.iter().enumerate() {
            write_label_png(
                &self.out.join(format!("simulated/sim_{i:04}.png")),
                m,
                &class_map,
            )?;
        }
        let count = |s: Split| records.iter().filter(|r| r.split == s).count();
        Ok(StageOutput {
            summary: json!({
                "n_train": count(Split::Train),
                "n_val": count(Split::Val),
                "n_test": count(Split::Test),
                "n_simulated": simulated.len(),
                "classes": class_map.class_ids(),
            }),
            seeds,
            logs: vec![],
        })
    }

    fn train_config(&self, steps: usize, lr: f64, batch_size: usize, seed: u64) -> TrainConfig {
        let c = &self.cfg().train_ssi;
        TrainConfig {
            steps,
            lr,
            batch_size,
            seed,
            p_uncond: c.p_uncond,
            masked_loss: c.masked_loss,
        }
    }

    fn train_ssi_all(&self) -> Result<StageOutput> {
        let c = &self.cfg().train_ssi;
        let data = self.ingested()?;
        let cm = &data.class_map;
        let train = data.split(Split::Train);
        let opts = SsiOptions {
            size: c.size.clone(),
            prediction_type: c.prediction_type,
            schedule: ScheduleParams::default(),
        };
        let mut registry = ModelRegistry::<F>::new();
        let mut seeds = BTreeMap::new();
        let mut losses = BTreeMap::new();
        let mut skipped = Vec::new();
        let mut ids = cm.class_ids();
        if c.background_model {
            ids.insert(0, cm.background_id);
        }
        for id in ids {
            let s = self.seed("class", id as u64);
            let tc = self.train_config(c.steps, c.lr, c.batch_size, s);
            match train_ssi::<F>(id, &train, cm, &opts, &tc) {
                Ok((m, rep)) => {
                    registry.register(id, m)?;
                    seeds.insert(format!("class-{id}"), s);
                    losses.insert(format!("class-{id}"), rep.losses);
                }
                Err(synth_core::Error::EmptyClass(_)) => skipped.push(id),
                Err(e) => return Err(e.into()),
            }
        }
        if c.scene_model {
            let s = self.seed("scene", 0);
            let tc = self.train_config(c.scene_steps.unwrap_or(c.steps), c.lr, c.batch_size, s);
            let (m, rep) =
                train_scene_model::<F>(&train, cm, &c.size, ScheduleParams::default(), &tc)?;
            registry.register_scene(m)?;
            seeds.insert("scene".into(), s);
            losses.insert("scene".into(), rep.losses);
        }
        registry.save(&self.out.join("models"))?;
        write_json(&self.out.join("losses.json"), &losses)?;
        let tails: BTreeMap<&String, f64> = losses
            .iter()
            .map(|(k, l)| {
                (
                    k,
                    l.iter().rev().take(100).sum::<f64>() / l.len().clamp(1, 100) as f64,
                )
            })
            .collect();
        Ok(StageOutput {
            summary: json!({ "loss_tail_mean": tails, "skipped_classes": skipped }),
            seeds,
            logs: vec![],
        })
    }

    fn train_adapter(&self) -> Result<StageOutput> {
        let c = &self.cfg().train_adapter;
        let data = self.ingested()?;
        let train = data.split(Split::Train);
        let registry = self.registry()?;
        let classes: Vec<ClassId> = if c.classes.is_empty() {
            registry
                .class_ids()
                .into_iter()
                .filter(|&id| id != data.class_map.background_id)
                .collect()
        } else {
            c.classes.clone()
        };
        let opts = AdapterOptions {
            conditioning_scale: c.conditioning_scale,
            blur_sigma: c.blur_sigma,
            train_scale: c.train_scale,
        };
        let mut seeds = BTreeMap::new();
        let mut losses = BTreeMap::new();
        for id in classes {
            let samples = dilated_adapter_samples::<F>(&train, id, c.blur_sigma, c.region_margin)?;
            if samples.is_empty() {
                continue;
            }
            let s = self.seed("class", id as u64);
            let tc = self.train_config(c.steps, c.lr, c.batch_size, s);
            let (handle, rep) = train_adapter(&registry, id, &samples, &opts, &tc)?;
            handle.save(&self.out.join(format!("adapters/class_{id}.ckpt")))?;
            seeds.insert(format!("class-{id}"), s);
            losses.insert(format!("class-{id}"), rep.losses);
        }
        write_json(&self.out.join("losses.json"), &losses)?;
        Ok(StageOutput {
            summary: json!({ "classes": losses.keys().collect::<Vec<_>>() }),
            seeds,
            logs: vec![],
        })
    }

    fn generate_organs(&self) -> Result<StageOutput> {
        let g = &self.cfg().generate;
        let data = self.ingested()?;
        let cm = &data.class_map;
        let registry = self.registry()?;
        let (mut maps, mut sources, mut ids): (Vec<_>, Option<Vec<_>>, Vec<Option<String>>) =
            match g.mask_source {
                MaskSource::Real => {
                    let train = data.split(Split::Train);
                    (
                        train.iter().map(|r| r.label_map.clone()).collect(),
                        Some(train.iter().map(|r| r.image.clone()).collect()),
                        train.iter().map(|r| Some(r.id.clone())).collect(),
                    )
                }
                MaskSource::Simulated => (
                    data.simulated.clone(),
                    None,
                    vec![None; data.simulated.len()],
                ),
            };
        if let Some(n) = g.limit {
            maps.truncate(n);
            ids.truncate(n);
            if let Some(s) = sources.as_mut() {
                s.truncate(n);
            }
        }
        if maps.is_empty() {
            return Err(synth_core::Error::Validation(format!(
                "no {:?} masks to generate from",
                g.mask_source
            ))
            .into());
        }
        let mut controls: BTreeMap<ClassId, ControlHandle<F>> = BTreeMap::new();
        if g.use_adapter {
            let dir = self.input_dir(Stage::TrainAdapter)?.join("adapters");
            if dir.is_dir() {
                for id in registry.class_ids() {
                    let p = dir.join(format!("class_{id}.ckpt"));
                    if p.exists() {
                        controls.insert(id, ControlHandle::load(&p)?);
                    }
                }
            }
        }
        let mut samplers = BTreeMap::new();
        for e in &cm.entries {
            if let Some(&s) = g.guidance.get(&e.name) {
                samplers.insert(
                    e.class_id,
                    SamplerConfig {
                        n_steps: g.n_steps,
                        scheduler_kind: g.scheduler_kind,
                        ..Default::default()
                    }
                    .with_guidance(s),
                );
            }
        }
        let seed = self.seed("", 0);
        let options = SynthesisOptions {
            samplers,
            n_steps: g.n_steps,
            scheduler_kind: g.scheduler_kind,
            seed,
            chunk: g.chunk,
        };
        let scenes = render_organs(
            &registry,
            cm,
            &maps,
            sources.as_deref(),
            &controls,
            &options,
        )?;
        for (i, (sr, map)) in scenes.iter().zip(&maps).enumerate() {
            let dir = self.out.join(format!("scenes/scene_{i:04}"));
            write_label_png(&dir.join("label.png"), map, cm)?;
            write_rgb_png(&dir.join("background.png"), &sr.background)?;
            for r in &sr.renders {
                write_rgb_png(&dir.join(format!("organ_{}.png", r.class_id)), &r.image)?;
            }
            let info = SceneInfo {
                id: format!("syn_{i:04}"),
                source_id: ids[i].clone(),
                background_source: sr.background_source,
                provenance: sr.renders.iter().map(|r| r.provenance.clone()).collect(),
            };
            write_json(&dir.join("renders.json"), &info)?;
        }
        Ok(StageOutput {
            summary: json!({
                "n_scenes": scenes.len(),
                "mask_source": g.mask_source,
                "adapters": controls.keys().collect::<Vec<_>>(),
            }),
            seeds: BTreeMap::from([("synthesis".to_string(), seed)]),
            logs: vec![],
        })
    }

    fn compose(&self) -> Result<StageOutput> {
        let gen = self.input_dir(Stage::GenerateOrgans)?;
        let cm = self.class_map()?;
        let mut dirs: Vec<PathBuf> = io(&gen, fs::read_dir(gen.join("scenes")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut records = Vec::with_capacity(dirs.len());
        let mut infos = Vec::with_capacity(dirs.len());
        let mut coverage = 0.0;
        for dir in &dirs {
            let info: SceneInfo = read_json(&dir.join("renders.json"))?;
            let label = read_label_png(&dir.join("label.png"))?;
            let background = read_rgb_png(&dir.join("background.png"))?;
            let mut renders = Vec::new();
            for p in &info.provenance {
                let image = read_rgb_png(&dir.join(format!("organ_{}.png", p.class_id)))?;
                let mask = BinaryMask::new(p.class_id, region_mask(&label, p.class_id))?;
                renders.push(OrganRender::new(image, mask, p.clone())?);
            }
            let scene =
                synth_core::compose::compose(&renders, &background, info.background_source, &cm)?;
            let masks: Vec<BinaryMask> = renders.iter().map(|r| r.mask.clone()).collect();
            coverage +=
                synth_core::compose::validate_scene_masks(&masks, label.dim())?.coverage_fraction;
            records.push(SampleRecord {
                id: info.id.clone(),
                image: scene.image,
                label_map: scene.label_map,
                split: Split::Train,
            });
            infos.push(SceneInfo {
                provenance: scene.provenance,
                ..info
            });
        }
        write_dataset(&records, &self.out.join("dataset"), &cm)?;
        write_json(&self.out.join("provenance.json"), &infos)?;
        let n = records.len().max(1) as f64;
        Ok(StageOutput {
            summary: json!({ "n_scenes": records.len(), "mean_mask_coverage": coverage / n }),
            ..Default::default()
        })
    }

    fn scenes(
        &self,
        compose: &StageRecord,
        cm: &ClassMap,
    ) -> Result<Vec<(CompositeScene, SceneInfo)>> {
        let dir = self.exp.dir().join(compose.dir());
        let infos: Vec<SceneInfo> = read_json(&dir.join("provenance.json"))?;
        let records = self.exp.load_scenes(compose, cm)?;
        let by_id: BTreeMap<&str, &SceneInfo> = infos.iter().map(|i| (i.id.as_str(), i)).collect();
        records
            .into_iter()
            .map(|r| {
                let info = (*by_id.get(r.id.as_str()).ok_or_else(|| {
                    synth_core::Error::Validation(format!("scene {} has no provenance", r.id))
                })?)
                .clone();
                Ok((
                    CompositeScene {
                        image: r.image,
                        label_map: r.label_map,
                        provenance: info.provenance.clone(),
                        background_source: info.background_source,
                    },
                    info,
                ))
            })
            .collect()
    }

    fn class_map(&self) -> Result<ClassMap> {
        Ok(ClassMap::load(
            &self.input_dir(Stage::Ingest)?.join("class_map.json"),
        )?)
    }

    fn refine(&self) -> Result<StageOutput> {
        let c = &self.cfg().refine;
        let cm = self.class_map()?;
        let registry = self.registry()?;
        let model = registry.scene()?;
        let scenes = self.scenes(self.required(Stage::Compose)?, &cm)?;
        let mut records = Vec::with_capacity(scenes.len());
        for (i, (scene, info)) in scenes.iter().enumerate() {
            let rc = RefineConfig {
                strength: c.strength,
                n_steps: c.n_steps,
                seed: self.seed("scene", i as u64),
                guidance_scale: c.guidance_scale,
                scheduler_kind: c.scheduler_kind,
            };
            let refined = refine_with(scene, model, &rc, None)?;
            records.push(SampleRecord {
                id: info.id.clone(),
                image: refined.image,
                label_map: refined.label_map,
                split: Split::Train,
            });
        }
        write_dataset(&records, &self.out.join("dataset"), &cm)?;
        let mad: f64 = scenes
            .iter()
            .zip(&records)
            .map(|((s, _), r)| {
                s.image
                    .iter()
                    .zip(r.image.iter())
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .sum::<f64>()
                    / s.image.len() as f64
            })
            .sum::<f64>()
            / records.len().max(1) as f64;
        Ok(StageOutput {
            summary: json!({ "n_scenes": records.len(), "strength": c.strength, "mean_abs_change": mad }),
            ..Default::default()
        })
    }

    fn evaluate_quality(&self) -> Result<StageOutput> {
        let q = &self.cfg().evaluate_quality;
        let data = self.ingested()?;
        let cm = &data.class_map;
        let train: Vec<Array3<u8>> = data
            .split(Split::Train)
            .into_iter()
            .map(|r| r.image)
            .collect();
        let test: Vec<Array3<u8>> = data
            .split(Split::Test)
            .into_iter()
            .map(|r| r.image)
            .collect();
        let use_test = test.len() >= 2;
        let reference = if use_test { &test } else { &train };
        let ext_seed = self.seed("extractor", 0);
        let extractor = toy_feature_extractor::<F>(&train, ext_seed, &q.extractor)?;
        extractor.save(&self.out.join("extractor.ckpt"))?;
        let f_ref = extractor.features(reference)?;
        let sources: BTreeMap<String, Array3<u8>> = data
            .records
            .iter()
            .map(|r| (r.id.clone(), r.image.clone()))
            .collect();

        let composite = self.scenes(self.required(Stage::Compose)?, cm)?;
        let mut sets: Vec<(String, Vec<Array3<u8>>, Vec<Option<String>>)> = Vec::new();
        if use_test {
            sets.push(("real_train".into(), train.clone(), vec![None; train.len()]));
        }
        sets.push((
            "composite".into(),
            composite.iter().map(|(s, _)| s.image.clone()).collect(),
            composite.iter().map(|(_, i)| i.source_id.clone()).collect(),
        ));
        if let Some(r) = self.input(Stage::Refine) {
            let refined = self.exp.load_scenes(r, cm)?;
            let src_of: BTreeMap<&str, Option<String>> = composite
                .iter()
                .map(|(_, i)| (i.id.as_str(), i.source_id.clone()))
                .collect();
            let srcs = refined
                .iter()
                .map(|x| src_of.get(x.id.as_str()).cloned().flatten())
                .collect();
            sets.push((
                "refined".into(),
                refined.into_iter().map(|x| x.image).collect(),
                srcs,
            ));
        }
        let mut seeds = BTreeMap::from([("extractor".to_string(), ext_seed)]);
        let mut rows = BTreeMap::new();
        for (k, (name, images, src_ids)) in sets.iter().enumerate() {
            let f = extractor.features(images)?;
            let subset = q.kid_subset_size.min(f.nrows()).min(f_ref.nrows());
            let kid_seed = self.seed("kid", k as u64);
            seeds.insert(format!("kid-{name}"), kid_seed);
            let kid_r = kid(f.view(), f_ref.view(), subset, q.kid_subsets, kid_seed)?;
            let mmd = gaussian_mmd(f.view(), f_ref.view(), None)?;
            let mut dists = Vec::new();
            for (img, sid) in images.iter().zip(src_ids) {
                if let Some(src) = sid.as_ref().and_then(|s| sources.get(s)) {
                    dists.push(extractor.distance(img, src)?);
                }
            }
            rows.insert(
                name.clone(),
                json!({
                    "n": images.len(),
                    "frechet": frechet_distance(f.view(), f_ref.view())?,
                    "kid": kid_r,
                    "gaussian_mmd": mmd,
                    "perceptual_to_source": if dists.is_empty() { None } else { Some(dists.iter().sum::<f64>() / dists.len() as f64) },
                }),
            );
        }
        let report = json!({
            "extractor": FeatureExtractor::descriptor(&extractor),
            "perceptual": PerceptualDistance::descriptor(&extractor),
            "reference": if use_test { "real_test" } else { "real_train" },
            "n_reference": reference.len(),
            "kid_subset_size": q.kid_subset_size,
            "kid_subsets": q.kid_subsets,
            "sets": rows,
        });
        write_json(&self.out.join("quality.json"), &report)?;
        Ok(StageOutput {
            summary: report,
            seeds,
            logs: vec![],
        })
    }

    fn seg_train(&self) -> Result<StageOutput> {
        let c = &self.cfg().seg;
        let data = self.ingested()?;
        let cm = &data.class_map;
        let real = data.split(Split::Train);
        let synthetic = match self.input(if c.use_refined {
            Stage::Refine
        } else {
            Stage::Compose
        }) {
            Some(r) if c.schemes.iter().any(|k| k.uses_synthetic()) => {
                self.exp.load_scenes(r, cm)?
            }
            _ => Vec::new(),
        };
        let mut runs = Vec::new();
        let mut seeds = BTreeMap::new();
        let mut losses = BTreeMap::new();
        for &kind in &c.schemes {
            for k in 0..c.n_seeds {
                let seed = self.seed(kind.name(), k as u64);
                let mut scheme = TrainingScheme::new(kind, c.steps, seed);
                if scheme.finetune_steps > 0 {
                    scheme.finetune_steps = c.finetune_steps.unwrap_or(c.steps);
                }
                scheme.batch_size = c.batch_size;
                scheme.lr = c.lr;
                scheme.model = SegModelConfig {
                    base_channels: c.base_channels,
                };
                let (model, l) = train_segmenter::<F>(&scheme, &real, &synthetic, cm)?;
                let name = format!("{}_seed{k}", kind.name());
                let file = format!("models/{name}.ckpt");
                let p = self.out.join(&file);
                io(p.parent().unwrap(), fs::create_dir_all(p.parent().unwrap()))?;
                model.save(&p)?;
                seeds.insert(name.clone(), seed);
                losses.insert(name.clone(), l);
                runs.push(SegRun {
                    name,
                    scheme,
                    seed_index: k,
                    checkpoint: file,
                });
            }
        }
        write_json(&self.out.join("runs.json"), &runs)?;
        write_json(&self.out.join("losses.json"), &losses)?;
        Ok(StageOutput {
            summary: json!({ "n_models": runs.len(), "n_real": real.len(), "n_synthetic": synthetic.len() }),
            seeds,
            logs: vec![],
        })
    }

    fn seg_eval(&self) -> Result<StageOutput> {
        let data = self.ingested()?;
        let cm = &data.class_map;
        let test = data.split(Split::Test);
        if test.is_empty() {
            return Err(
                synth_core::Error::Validation("the dataset has no test split".into()).into(),
            );
        }
        let dir = self.input_dir(Stage::SegTrain)?;
        let runs: Vec<SegRun> = read_json(&dir.join("runs.json"))?;
        let mut by_scheme: BTreeMap<String, Vec<SegMetricReport>> = BTreeMap::new();
        let mut order = Vec::new();
        for run in &runs {
            let model = Segmenter::<F>::load(&dir.join(&run.checkpoint))?;
            let report = evaluate_segmenter(&model, &test, cm)?;
            write_json(
                &self.out.join(format!("metrics/{}.json", run.name)),
                &report,
            )?;
            let key = run.scheme.kind.name().to_string();
            if !by_scheme.contains_key(&key) {
                order.push(key.clone());
            }
            by_scheme.entry(key).or_default().push(report);
        }
        let mut rows = Vec::new();
        let mut summary = serde_json::Map::new();
        for key in order {
            let reports = &by_scheme[&key];
            let mean = aggregate_reports(reports)?;
            summary.insert(
                key.clone(),
                json!({
                    "mean": mean,
                    "macro_dice_per_seed": reports.iter().map(|r| r.macro_scores.dice).collect::<Vec<_>>(),
                }),
            );
            rows.push((key, mean));
        }
        let (text, csv) = comparison_table(&rows, cm);
        io(self.out, fs::write(self.out.join("comparison.txt"), text))?;
        io(self.out, fs::write(self.out.join("comparison.csv"), csv))?;
        let summary = serde_json::Value::Object(summary);
        write_json(&self.out.join("summary.json"), &summary)?;
        Ok(StageOutput {
            summary,
            ..Default::default()
        })
    }

    fn report(&self) -> Result<StageOutput> {
        use std::fmt::Write;
        let data = self.ingested()?;
        let cm = &data.class_map;
        let exp_dir = self.exp.dir();
        let link = |r: &StageRecord, file: &str| format!("../../{}/{file}", r.dir());
        let mut md = String::new();
        writeln!(md, "# Experiment `{}`\n", self.exp.id()).unwrap();
        writeln!(md, "- seed: {}", self.exp.seed()).unwrap();
        writeln!(md, "- config: `{}`\n", self.cfg().hash()).unwrap();
        writeln!(md, "## Stages\n\n| stage | run | outputs |\n|---|---|---|").unwrap();
        for s in self.inputs {
            let r = self.manifest.get(*s).expect("inputs are recorded");
            writeln!(md, "| {} | {} | {} |", r.stage, r.run, r.outputs.len()).unwrap();
        }
        writeln!(md).unwrap();

        if let Some(r) = self.input(Stage::SegEval) {
            let text = io(
                &exp_dir,
                fs::read_to_string(exp_dir.join(r.dir()).join("comparison.txt")),
            )?;
            writeln!(
                md,
                "## Segmentation\n\nMean over seeds on the test split ([csv]({})).\n",
                link(r, "comparison.csv")
            )
            .unwrap();
            writeln!(md, "```\n{}```\n", text).unwrap();
        }
        if let Some(r) = self.input(Stage::EvaluateQuality) {
            let q: serde_json::Value = read_json(&exp_dir.join(r.dir()).join("quality.json"))?;
            writeln!(
                md,
                "## Image quality\n\nAgainst {} ([json]({})).\n",
                q["reference"].as_str().unwrap_or("?"),
                link(r, "quality.json")
            )
            .unwrap();
            writeln!(md, "| set | n | frechet | kid | gaussian mmd | perceptual to source |\n|---|---|---|---|---|---|").unwrap();
            if let Some(sets) = q["sets"].as_object() {
                for (name, v) in sets {
                    let num = |x: &serde_json::Value| {
                        x.as_f64().map_or("-".to_string(), |f| format!("{f:.4}"))
                    };
                    writeln!(
                        md,
                        "| {name} | {} | {} | {} ± {} | {} | {} |",
                        v["n"],
                        num(&v["frechet"]),
                        num(&v["kid"]["mean"]),
                        num(&v["kid"]["std"]),
                        num(&v["gaussian_mmd"]["value"]),
                        num(&v["perceptual_to_source"]),
                    )
                    .unwrap();
                }
            }
            writeln!(md).unwrap();
        }
        if let Some(r) = self.input(Stage::Compose) {
            let scenes = self.scenes(r, cm)?;
            let n = self.cfg().report.grid_rows.min(scenes.len());
            if n > 0 {
                let picked: Vec<CompositeScene> =
                    scenes[..n].iter().map(|(s, _)| s.clone()).collect();
                let refined = match self.input(Stage::Refine) {
                    Some(rr) => {
                        let all = self.exp.load_scenes(rr, cm)?;
                        let by_id: BTreeMap<&str, &Array3<u8>> =
                            all.iter().map(|x| (x.id.as_str(), &x.image)).collect();
                        let imgs: Option<Vec<Array3<u8>>> = scenes[..n]
                            .iter()
                            .map(|(_, i)| by_id.get(i.id.as_str()).map(|x| (*x).clone()))
                            .collect();
                        imgs
                    }
                    None => None,
                };
                let by_id: BTreeMap<&str, &Array3<u8>> = data
                    .records
                    .iter()
                    .map(|x| (x.id.as_str(), &x.image))
                    .collect();
                let reals: Option<Vec<Array3<u8>>> = scenes[..n]
                    .iter()
                    .map(|(_, i)| {
                        i.source_id
                            .as_deref()
                            .and_then(|s| by_id.get(s))
                            .map(|x| (*x).clone())
                    })
                    .collect();
                emit_figure_grid(
                    &picked,
                    refined.as_deref(),
                    reals.as_deref(),
                    cm,
                    &self.out.join("figure_grid.png"),
                )?;
                let cols: Vec<&str> = [
                    reals.as_ref().map(|_| "real"),
                    Some("mask"),
                    Some("composite"),
                    refined.as_ref().map(|_| "refined"),
                ]
                .into_iter()
                .flatten()
                .collect();
                writeln!(
                    md,
                    "## Samples\n\nColumns: {}.\n\n![samples](figure_grid.png)\n",
                    cols.join(", ")
                )
                .unwrap();
            }
        }
        let areas: BTreeMap<ClassId, usize> =
            data.records.iter().fold(BTreeMap::new(), |mut acc, r| {
                for (c, a) in class_areas(&r.label_map) {
                    *acc.entry(c).or_insert(0) += a;
                }
                acc
            });
        writeln!(
            md,
            "## Dataset\n\n[class map]({})\n",
            link(self.required(Stage::Ingest)?, "class_map.json")
        )
        .unwrap();
        writeln!(md, "| class | name | pixels |\n|---|---|---|").unwrap();
        for (c, a) in areas {
            let name = cm
                .get(c)
                .map(|e| e.name.clone())
                .unwrap_or_else(|_| "background".into());
            writeln!(md, "| {c} | {name} | {a} |").unwrap();
        }
        io(self.out, fs::write(self.out.join("report.md"), &md))?;

        let mut timings = String::from("| stage | run | wall time (s) |\n|---|---|---|\n");
        for r in &self.manifest.records {
            writeln!(
                timings,
                "| {} | {} | {:.1} |",
                r.stage, r.run, r.wall_time_s
            )
            .unwrap();
        }
        Ok(StageOutput {
            summary: json!({ "sections": md.lines().filter(|l| l.starts_with("## ")).count() }),
            seeds: BTreeMap::new(),
            logs: vec![("timings.md".into(), timings)],
        })
    }
}
