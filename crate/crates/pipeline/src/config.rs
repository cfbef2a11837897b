//! Experiment configuration: one TOML file with a section per stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synth_core::dataset::ToyConfig;
use synth_core::diffusion::{ModelSize, PredictionType, SchedulerKind, DEFAULT_P_UNCOND};
use synth_core::metrics::ToyExtractorConfig;
use synth_core::segment::SchemeKind;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub ingest: IngestConfig,
    pub train_ssi: SsiStageConfig,
    pub train_adapter: AdapterStageConfig,
    pub generate: GenerateConfig,
    pub refine: RefineStageConfig,
    pub evaluate_quality: QualityConfig,
    pub seg: SegConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentSection::default(),
            ingest: IngestConfig::default(),
            train_ssi: SsiStageConfig::default(),
            train_adapter: AdapterStageConfig::default(),
            generate: GenerateConfig::default(),
            refine: RefineStageConfig::default(),
            evaluate_quality: QualityConfig::default(),
            seg: SegConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub id: String,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            id: "toy".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub source: DataSource,
    pub toy: ToyConfig,
    /// `manifest.jsonl` of a dataset on disk, for `source = "directory"`.
    pub dataset_manifest: Option<PathBuf>,
    pub class_map: Option<PathBuf>,
    /// Number of toy label maps generated as simulated masks.
    pub simulated_masks: usize,
    /// Directory of label-map PNGs used as simulated masks.
    pub simulated_dir: Option<PathBuf>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let mut toy = ToyConfig::new(700, 32, 3);
        toy.n_test = 200;
        IngestConfig {
            source: DataSource::Toy,
            toy,
            dataset_manifest: None,
            class_map: None,
            simulated_masks: 0,
            simulated_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsiStageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub p_uncond: f64,
    pub masked_loss: bool,
    pub size: ModelSize,
    /// Overrides the per-organ prediction type.
    pub prediction_type: Option<PredictionType>,
    pub background_model: bool,
    pub scene_model: bool,
    pub scene_steps: Option<usize>,
}

impl Default for SsiStageConfig {
    fn default() -> Self {
        SsiStageConfig {
            steps: 1500,
            lr: 1e-5,
            batch_size: 8,
            p_uncond: DEFAULT_P_UNCOND,
            masked_loss: false,
            size: ModelSize::default(),
            prediction_type: None,
            background_model: true,
            scene_model: true,
            scene_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterStageConfig {
    /// Empty means every class.
    pub classes: Vec<u8>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub conditioning_scale: f64,
    pub blur_sigma: f64,
    pub train_scale: f64,
    /// Pixels by which the training region extends past the organ mask.
    pub region_margin: usize,
}

impl Default for AdapterStageConfig {
    fn default() -> Self {
        AdapterStageConfig {
            classes: Vec::new(),
            steps: 1500,
            lr: 1e-5,
            batch_size: 8,
            conditioning_scale: 0.5,
            blur_sigma: 1.0,
            train_scale: 0.5,
            region_margin: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Real,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub mask_source: MaskSource,
    pub n_steps: usize,
    pub scheduler_kind: SchedulerKind,
    /// Guidance scale per class name; other classes use the organ table.
    pub guidance: BTreeMap<String, f64>,
    pub use_adapter: bool,
    pub chunk: usize,
    /// Pretrained class models, used instead of `train_ssi_all` for
    /// simulated masks.
    pub registry_dir: Option<PathBuf>,
    /// Cap on the number of scenes.
    pub limit: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mask_source: MaskSource::Real,
            n_steps: 30,
            scheduler_kind: SchedulerKind::Ddim,
            guidance: BTreeMap::new(),
            use_adapter: false,
            chunk: 32,
            registry_dir: None,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineStageConfig {
    /// Whether `run_all` includes the refine stage.
    pub enabled: bool,
    pub strength: f64,
    pub n_steps: usize,
    pub guidance_scale: f64,
    pub scheduler_kind: SchedulerKind,
}

impl Default for RefineStageConfig {
    fn default() -> Self {
        RefineStageConfig {
            enabled: true,
            strength: 0.3,
            n_steps: 10,
            guidance_scale: 1.0,
            scheduler_kind: SchedulerKind::Ddim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    pub extractor: ToyExtractorConfig,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    /// Also score the refined scenes when a refine run exists.
    pub use_refined: bool,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            extractor: ToyExtractorConfig::default(),
            kid_subset_size: 50,
            kid_subsets: 20,
            use_refined: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub schemes: Vec<SchemeKind>,
    pub steps: usize,
    pub finetune_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub n_seeds: usize,
    pub base_channels: usize,
    /// Train on the refined scenes instead of the composites.
    pub use_refined: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            schemes: SchemeKind::ALL.to_vec(),
            steps: 1500,
            finetune_steps: None,
            batch_size: 8,
            lr: 3e-3,
            n_seeds: 3,
            base_channels: 8,
            use_refined: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub grid_rows: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { grid_rows: 6 }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| invalid("", e.to_string()))?;
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(
                if path == "." { "" } else { &path },
                e.into_inner().message().to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization, independent of formatting and
    /// key order in the source file.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        crate::hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(path, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |path: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(path, "must be at least 1"))
            }
        };
        if self.experiment.id.is_empty()
            || !self
                .experiment
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(invalid(
                "experiment.id",
                "must be non-empty and use [A-Za-z0-9._-]",
            ));
        }
        if self.ingest.source == DataSource::Directory && self.ingest.dataset_manifest.is_none() {
            return Err(invalid(
                "ingest.dataset_manifest",
                "required when source = \"directory\"",
            ));
        }
        if self.ingest.source == DataSource::Directory && self.ingest.class_map.is_none() {
            return Err(invalid(
                "ingest.class_map",
                "required when source = \"directory\"",
            ));
        }
        nonzero("train_ssi.steps", self.train_ssi.steps)?;
        positive("train_ssi.lr", self.train_ssi.lr)?;
        nonzero("train_ssi.batch_size", self.train_ssi.batch_size)?;
        if !(0.0..=1.0).contains(&self.train_ssi.p_uncond) {
            return Err(invalid("train_ssi.p_uncond", "must lie in [0, 1]"));
        }
        nonzero(
            "train_ssi.size.base_channels",
            self.train_ssi.size.base_channels,
        )?;
        nonzero("train_adapter.steps", self.train_adapter.steps)?;
        positive("train_adapter.lr", self.train_adapter.lr)?;
        nonzero("train_adapter.batch_size", self.train_adapter.batch_size)?;
        if self.train_adapter.conditioning_scale < 0.0 {
            return Err(invalid(
                "train_adapter.conditioning_scale",
                "must be non-negative",
            ));
        }
        nonzero("generate.n_steps", self.generate.n_steps)?;
        nonzero("generate.chunk", self.generate.chunk)?;
        for (name, &s) in &self.generate.guidance {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid(
                    &format!("generate.guidance.{name}"),
                    "must be finite and non-negative",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.refine.strength) {
            return Err(invalid("refine.strength", "must lie in [0, 1]"));
        }
        nonzero("refine.n_steps", self.refine.n_steps)?;
        nonzero(
            "evaluate_quality.kid_subset_size",
            self.evaluate_quality.kid_subset_size,
        )?;
        nonzero(
            "evaluate_quality.kid_subsets",
            self.evaluate_quality.kid_subsets,
        )?;
        if self.seg.schemes.is_empty() {
            return Err(invalid("seg.schemes", "list at least one scheme"));
        }
        nonzero("seg.steps", self.seg.steps)?;
        nonzero("seg.batch_size", self.seg.batch_size)?;
        nonzero("seg.n_seeds", self.seg.n_seeds)?;
        positive("seg.lr", self.seg.lr)?;
        nonzero("report.grid_rows", self.report.grid_rows)?;
        Ok(())
    }
}
