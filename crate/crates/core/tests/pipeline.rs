use std::fs;
use std::path::Path;

use emoedit_core::config::RunConfig;
use emoedit_core::domain::manifest::read_jsonl;
use emoedit_core::domain::PairRecord;
use emoedit_core::pipeline::{run_pipeline, RunLayout, StageStatus};

fn small_config(root: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/small.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.artifact_root = root.to_path_buf();
    cfg
}

#[test]
fn second_run_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    let first = run_pipeline(&cfg).unwrap();
    assert_eq!(first.stages.len(), 7);
    assert!(first.stages.iter().all(|(_, s)| *s == StageStatus::Ran), "{:?}", first.stages);

    let layout = RunLayout::new(dir.path());
    let epgs: Vec<PairRecord> = read_jsonl(&layout.epgs_manifest()).unwrap();
    assert!(!epgs.is_empty());
    assert_eq!(first.edit.edits.len(), 2);
    for e in &first.edit.edits {
        assert!((1..=2).contains(&e.iterations));
    }
    assert!(layout.root.join("report/summary.json").exists());
    assert!(layout.root.join("run_config.toml").exists());
    let triples_before = fs::read(layout.triples_manifest()).unwrap();

    let second = run_pipeline(&cfg).unwrap();
    assert!(second.stages.iter().all(|(_, s)| *s == StageStatus::Cached), "{:?}", second.stages);
    assert_eq!(fs::read(layout.triples_manifest()).unwrap(), triples_before);
    assert_eq!(second.metrics, first.metrics);

    // a changed editor setting reruns training and everything downstream
    let mut changed = cfg.clone();
    changed.editor.steps += 2;
    let third = run_pipeline(&changed).unwrap();
    let status: Vec<StageStatus> = third.stages.iter().map(|(_, s)| *s).collect();
    use StageStatus::{Cached, Ran};
    assert_eq!(status, [Cached, Cached, Cached, Cached, Ran, Ran, Ran]);
    assert_eq!(third.editor.steps, cfg.editor.steps + 2);
}
