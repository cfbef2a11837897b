use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use synth_core::compose::BackgroundSource;
use synth_core::diffusion::ModelSize;
use synth_core::segment::SchemeKind;
use synth_pipeline::config::MaskSource;
use synth_pipeline::{
    stage_seed, Experiment, ExperimentConfig, ExperimentManifest, PipelineError, Stage,
};

fn tiny_config(id: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.experiment.id = id.into();
    c.ingest.toy.n_samples = 125;
    c.ingest.toy.n_test = 15;
    c.ingest.toy.image_size = 16;
    c.ingest.toy.n_classes = 2;
    let size = ModelSize {
        base_channels: 4,
        channel_mults: vec![1, 2],
        embed_dim: 8,
    };
    c.train_ssi.size = size;
    c.train_ssi.steps = 4;
    c.train_ssi.lr = 1e-3;
    c.train_adapter.steps = 2;
    c.generate.n_steps = 3;
    c.generate.limit = Some(6);
    c.refine.n_steps = 2;
    c.evaluate_quality.extractor.steps = 3;
    c.evaluate_quality.kid_subset_size = 4;
    c.evaluate_quality.kid_subsets = 3;
    c.seg.schemes = vec![SchemeKind::RealNoaug, SchemeKind::SynOnly];
    c.seg.steps = 4;
    c.seg.n_seeds = 1;
    c.report.grid_rows = 3;
    c
}

fn hashes(m: &ExperimentManifest) -> Vec<(String, String)> {
    m.records
        .iter()
        .flat_map(|r| r.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())))
        .collect()
}

fn links(markdown: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = markdown;
    while let Some(i) = rest.find("](") {
        rest = &rest[i + 2..];
        let end = rest.find(')').expect("closed link");
        out.push(rest[..end].to_string());
        rest = &rest[end..];
    }
    out
}

fn normalize(base: &str, rel: &str) -> String {
    let mut parts: Vec<&str> = base.split('/').collect();
    for p in rel.split('/') {
        match p {
            ".." => {
                parts.pop();
            }
            "." => {}
            p => parts.push(p),
        }
    }
    parts.join("/")
}

#[test]
fn full_pipeline_is_reproducible_and_linked() {
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut manifests = Vec::new();
    for root in &roots {
        let mut c = tiny_config("e2e");
        c.generate.use_adapter = true;
        let exp = Experiment::new(root.path(), c, Some(7), None).unwrap();
        let records = exp.run_all().unwrap();
        assert_eq!(records.len(), Stage::ALL.len());
        let m = exp.manifest().unwrap();
        m.verify(&exp.dir()).unwrap();
        let order: Vec<Stage> = m.records.iter().map(|r| r.stage).collect();
        assert_eq!(order, Stage::ALL.to_vec());
        manifests.push((exp, m));
    }
    assert_eq!(hashes(&manifests[0].1), hashes(&manifests[1].1));

    let (exp, m) = &manifests[0];
    let report = m.latest(Stage::Report).unwrap();
    let text = std::fs::read_to_string(exp.dir().join(report.dir()).join("report.md")).unwrap();
    let known = m.artifact_paths();
    let found = links(&text);
    assert!(found.len() >= 4, "{found:?}");
    for l in found {
        let target = normalize(&report.dir(), &l);
        assert!(
            known.contains(target.as_str()),
            "report links {target}, which the manifest does not record"
        );
    }
    assert!(text.contains("syn_only"));
    let grid =
        synth_core::dataset::read_rgb_png(&exp.dir().join(report.dir()).join("figure_grid.png"))
            .unwrap();
    assert_eq!(grid.dim(), (3 * 16, 4 * 16, 3));
    assert!(report.logs.iter().any(|l| l.ends_with("timings.md")));
}

#[test]
fn stages_check_prerequisites() {
    let root = tempfile::tempdir().unwrap();
    let exp = Experiment::new(root.path(), tiny_config("deps"), Some(1), None).unwrap();
    match exp.run(Stage::Compose) {
        Err(e @ PipelineError::Dependency { .. }) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains("ingest"));
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
    exp.run(Stage::Ingest).unwrap();
    match exp.run(Stage::Compose) {
        Err(PipelineError::Dependency { missing, .. }) => {
            assert_eq!(missing, Stage::GenerateOrgans)
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
    match exp.run(Stage::GenerateOrgans) {
        Err(PipelineError::Dependency { missing, .. }) => assert_eq!(missing, Stage::TrainSsiAll),
        other => panic!("expected a dependency error, got {other:?}"),
    }
    assert!(!exp.dir().join("compose/run-0").exists());
}

#[test]
fn reruns_append_and_reproduce() {
    let root = tempfile::tempdir().unwrap();
    let exp = Experiment::new(root.path(), tiny_config("rerun"), Some(3), None).unwrap();
    let a = exp.run(Stage::Ingest).unwrap();
    let b = exp.run(Stage::Ingest).unwrap();
    assert_eq!((a.run, b.run), (0, 1));
    let strip = |r: &synth_pipeline::StageRecord| -> Vec<(String, String)> {
        r.outputs
            .iter()
            .map(|x| {
                (
                    x.path.splitn(3, '/').nth(2).unwrap().to_string(),
                    x.sha256.clone(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let m = exp.manifest().unwrap();
    assert_eq!(m.records.len(), 2);
    m.verify(&exp.dir()).unwrap();
}

#[test]
fn simulated_masks_skip_model_training() {
    let root = tempfile::tempdir().unwrap();
    let mut c = tiny_config("trained");
    c.train_ssi.scene_model = false;
    let trained = Experiment::new(root.path(), c, Some(5), None).unwrap();
    trained.run(Stage::Ingest).unwrap();
    let rec = trained.run(Stage::TrainSsiAll).unwrap();
    let models = trained.dir().join(rec.dir()).join("models");

    let mut c = tiny_config("ss");
    c.ingest.simulated_masks = 4;
    c.generate.mask_source = MaskSource::Simulated;
    let ss = Experiment::new(root.path(), c.clone(), Some(5), None).unwrap();
    ss.run(Stage::Ingest).unwrap();
    match ss.run(Stage::GenerateOrgans) {
        Err(PipelineError::Dependency { missing, .. }) => assert_eq!(missing, Stage::TrainSsiAll),
        other => panic!("expected a dependency error, got {other:?}"),
    }
    c.generate.registry_dir = Some(models);
    let ss = Experiment::new(root.path(), c, Some(5), None).unwrap();
    let gen = ss.run(Stage::GenerateOrgans).unwrap();
    assert_eq!(gen.summary["n_scenes"], 4);
    assert!(gen.inputs.iter().all(|r| r.stage != Stage::TrainSsiAll));
    ss.run(Stage::Compose).unwrap();
    let text = std::fs::read_to_string(ss.dir().join("compose/run-0/provenance.json")).unwrap();
    let infos: serde_json::Value = serde_json::from_str(&text).unwrap();
    let bg = serde_json::to_value(BackgroundSource::BackgroundRender).unwrap();
    assert!(infos
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["background_source"] == bg));
}

#[test]
fn seeds_do_not_collide() {
    let mut seen = HashSet::with_capacity(1_000_000);
    for stage in Stage::ALL {
        for i in 0..100_000u64 {
            assert!(
                seen.insert(stage_seed(11, stage, "item", i)),
                "collision at {stage}/{i}"
            );
        }
    }
    assert_eq!(seen.len(), 1_000_000);
    assert_eq!(
        stage_seed(11, Stage::Refine, "item", 5),
        stage_seed(11, Stage::Refine, "item", 5)
    );
    assert_ne!(
        stage_seed(11, Stage::Refine, "item", 5),
        stage_seed(12, Stage::Refine, "item", 5)
    );
}

fn synth(root: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_synth"))
        .args(args)
        .env("SYNTH_ARTIFACT_ROOT", root)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let good = root.path().join("good.toml");
    std::fs::write(&good, tiny_config("cli").to_toml()).unwrap();
    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "[train_ssi]\nsteps = -3\n").unwrap();
    let g = good.to_str().unwrap();

    let (code, err) = synth(
        root.path(),
        &["ingest", "--config", bad.to_str().unwrap(), "--seed", "1"],
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("train_ssi.steps"), "{err}");
    let (code, err) = synth(root.path(), &["compose", "--config", g, "--seed", "1"]);
    assert_eq!(code, 3, "{err}");
    let (code, _) = synth(
        root.path(),
        &["ingest", "--config", "/nonexistent/cfg.toml"],
    );
    assert_eq!(code, 4);
    let (code, err) = synth(root.path(), &["ingest", "--config", g, "--seed", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(root
        .path()
        .join("cli/ingest/run-0/dataset/manifest.jsonl")
        .exists());
    let (code, err) = synth(root.path(), &["verify", "--experiment", "cli"]);
    assert_eq!(code, 0, "{err}");
    let (code, err) = synth(root.path(), &["report", "--experiment", "cli"]);
    assert_eq!(code, 0, "{err}");
}
