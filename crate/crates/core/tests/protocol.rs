use std::path::Path;

use sha2::{Digest, Sha256};

use sacnn_core::assistant::{AblationMask, Head, GRID_MANIFEST_HEADER};
use sacnn_core::harness::{assistant_file, AssistMode, Experiment, ExperimentConfig, DETECTOR_A_FILE, DETECTOR_B_FILE};

fn config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        synthetic_count: 16,
        image_size: 32,
        split_ratio: 0.5,
        detector_epochs: 6,
        assistant_epochs: 2,
        transfer_count: 6,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn digest(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

#[test]
fn transfer_leaves_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        assist_mode: AssistMode::Assistant,
        ..config(dir.path())
    };
    let mut ex = Experiment::prepare(c.clone()).unwrap();
    ex.run_cross_detector().unwrap();
    let ckpts = [
        dir.path().join(DETECTOR_A_FILE),
        dir.path().join(DETECTOR_B_FILE),
        dir.path().join(assistant_file(Head::Continuous)),
    ];
    let before: Vec<_> = ckpts.iter().map(|p| digest(p)).collect();

    // A fresh run that loads the frozen models from their checkpoints.
    let frozen = ExperimentConfig {
        detector_checkpoint: Some(ckpts[0].clone()),
        assistant_checkpoint: Some(ckpts[2].clone()),
        ..c
    };
    let mut again = Experiment::prepare(frozen).unwrap();
    let t = again.run_transfer().unwrap().clone();
    again.emit_report().unwrap();
    ex.run_transfer().unwrap();
    let after: Vec<_> = ckpts.iter().map(|p| digest(p)).collect();
    assert_eq!(before, after);
    assert!(t.out_of_distribution);
    assert_eq!(t.covers, 6);
    assert_eq!(ex.report().transfer.as_ref().unwrap(), &t);
    let csv = std::fs::read_to_string(dir.path().join("transfer.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",true,6,"));
}

#[test]
fn second_detector_is_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut ex = Experiment::prepare(config(dir.path())).unwrap();
    let cross = ex.run_cross_detector().unwrap().clone();
    assert!(cross.checkpoints_differ);
    assert_ne!(digest(&dir.path().join(DETECTOR_A_FILE)), digest(&dir.path().join(DETECTOR_B_FILE)));
    let a = ex.report().assisted.as_ref().unwrap();
    assert_eq!(cross.familiar_delta_pp, a.delta_pp);
    ex.emit_report().unwrap();
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("Familiar detector delta") && md.contains("unfamiliar detector delta"));
}

#[test]
fn sigma_ablation_keeps_other_multipliers_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        ablation: AblationMask::SIGMA_ONLY,
        ..config(dir.path())
    };
    let mut ex = Experiment::prepare(c).unwrap();
    ex.run_assisted().unwrap();
    ex.emit_report().unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("grid_manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some(GRID_MANIFEST_HEADER));
    let mut rows = 0;
    for row in lines {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[3], f[4]), ("1", "1"), "{row}");
        rows += 1;
    }
    assert_eq!(rows, 16 * 7);
    let params = std::fs::read_to_string(dir.path().join("assisted_params.csv")).unwrap();
    for row in params.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[2], f[3]), ("1", "1"));
    }
}

#[test]
fn discrete_assistant_mode_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        assist_mode: AssistMode::Assistant,
        assistant_head: Head::Discrete,
        ..config(dir.path())
    };
    let mut ex = Experiment::prepare(c).unwrap();
    let a = ex.run_assisted().unwrap().clone();
    assert!(a.choices.iter().all(|ch| ch.cell.is_some()));
    assert_eq!(a.histograms.iter().map(|h| h.total()).sum::<u64>(), 3 * 8);
    assert!(dir.path().join(assistant_file(Head::Discrete)).exists());
}

#[test]
fn insufficient_budget_points_to_lazy_mode() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        cache_budget_bytes: 1000,
        ..config(dir.path())
    };
    let mut ex = Experiment::prepare(c).unwrap();
    let err = ex.cache().err().unwrap().to_string();
    assert!(err.contains("lazy"), "{err}");
}
