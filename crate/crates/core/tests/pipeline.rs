use std::collections::BTreeMap;
use std::path::Path;

use cranio_core::models::{load_checkpoint, ModelKind};
use cranio_core::pipeline::{
    self, ExperimentConfig, Partition, RunLayout, SplitAssignment, FINETUNED_CKPT, SEGMENTATION_CKPT, SYNTHESIS_CKPT,
};
use cranio_core::volume::LABEL_NAMES;
use cranio_core::Error;

fn config(root: &Path, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: root.join("data"),
        out_dir: root.join("runs"),
        n_subjects: 8,
        grid: [32; 3],
        epochs,
        finetune_epochs: epochs,
        val_interval: 1,
        seed: 11,
        ..ExperimentConfig::default()
    }
}

/// Eight subjects at 32³: below the automatic split's minimum, so the
/// partition is written by hand (5/1/1 plus the atlas).
fn prepare_small(cfg: &ExperimentConfig) -> RunLayout {
    let layout = RunLayout::for_config(cfg);
    pipeline::write_cohort(&cfg.data_dir, 8, cfg.seed, cfg.grid).unwrap();
    let idx = pipeline::preprocess_cohort(&cfg.data_dir, &layout.preprocessed(), None, cfg.bias_order).unwrap();
    let pool: Vec<String> =
        idx.subjects.iter().map(|s| s.subject_id.clone()).filter(|id| *id != idx.reference).collect();
    let mut assignment = BTreeMap::new();
    for (i, id) in pool.iter().enumerate() {
        let p = match i {
            0 => Partition::Val,
            1 => Partition::Test,
            _ => Partition::Train,
        };
        assignment.insert(id.clone(), p);
    }
    let split = SplitAssignment { assignment };
    std::fs::write(layout.split(), serde_json::to_string(&split).unwrap()).unwrap();
    layout
}

#[test]
fn two_epoch_smoke_run_writes_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let layout = prepare_small(&cfg);

    let m = pipeline::train_synthesis(&cfg, &layout).unwrap();
    assert_eq!(m.loss_history.len(), 3);
    let ck = load_checkpoint(&layout.checkpoints(), SYNTHESIS_CKPT).unwrap();
    assert_eq!(ck.manifest.kind, ModelKind::Synthesis);
    pipeline::load_synthesis(&layout).unwrap();

    let base = pipeline::train_segmentation(&cfg, &layout).unwrap();
    let ft = pipeline::finetune_segmentation(&cfg, &layout).unwrap();
    assert_eq!(ft.tag, "FT");
    // the base weights never win FT selection once an epoch has been trained
    assert!(ft.epoch >= 1, "FT kept epoch {}", ft.epoch);
    assert_eq!(ft.parent_hash.as_deref(), Some(base.blob_sha256.as_str()));
    assert!((ft.config.seed, ft.kind) == (base.config.seed, ModelKind::Segmentation));

    let (metrics, stats) = pipeline::run_full_evaluation(&cfg, &layout).unwrap();
    // one Dice and one HD95 entry (value or recorded as undefined) per label
    for s in &metrics.subjects {
        for arm in pipeline::ARMS {
            let seg = &s.segmentation[arm];
            assert_eq!(seg.dice.len(), 8);
            assert_eq!(seg.hd95_mm.len() + seg.hd95_undefined.len(), 8);
            for l in &LABEL_NAMES[1..] {
                assert!(seg.dice.contains_key(*l));
            }
        }
        for kind in ["slices", "labels", "suture_heatmap"] {
            assert!(layout.figures().join(format!("{}_{kind}.png", s.subject_id)).exists());
        }
    }
    assert_eq!(stats.panel.bounds, BTreeMap::from([("dice".into(), 0.02), ("hd95_mm".into(), 3.0)]));
    assert_eq!(stats.panel.regions.len(), 16);
    assert!(layout.stats_txt().exists() && layout.metrics_csv().exists());
    assert!(layout.root.join("report.md").exists());
}

#[test]
fn zero_epoch_finetune_keeps_base_weights_and_training_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    let layout = prepare_small(&cfg);
    let s1 = pipeline::train_synthesis(&cfg, &layout).unwrap();
    let again = pipeline::train_synthesis(&cfg, &layout).unwrap();
    assert_eq!(s1.loss_history[1].train_loss, again.loss_history[1].train_loss);
    assert_eq!(s1.blob_sha256, again.blob_sha256);

    pipeline::train_segmentation(&cfg, &layout).unwrap();
    cfg.finetune_epochs = 0;
    let ft = pipeline::finetune_segmentation(&cfg, &layout).unwrap();
    let base = load_checkpoint(&layout.checkpoints(), SEGMENTATION_CKPT).unwrap();
    let tuned = load_checkpoint(&layout.checkpoints(), FINETUNED_CKPT).unwrap();
    assert_eq!(base.weights, tuned.weights);
    assert_eq!(ft.epoch, 0);
}

#[test]
fn missing_prerequisites_are_state_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let layout = RunLayout::for_config(&cfg);
    assert!(matches!(pipeline::train_synthesis(&cfg, &layout), Err(Error::State(_))));
    assert!(matches!(pipeline::evaluate(&cfg, &layout), Err(Error::State(_))));
    assert!(matches!(pipeline::stats(&cfg, &layout), Err(Error::State(_))));

    let layout = prepare_small(&cfg);
    assert!(matches!(pipeline::train_segmentation(&cfg, &layout).map(|_| ()), Ok(())));
    // fine-tuning needs the synthesis checkpoint as well
    assert!(matches!(pipeline::finetune_segmentation(&cfg, &layout), Err(Error::State(_))));
    assert!(matches!(pipeline::infer(&cfg, &layout), Err(Error::State(_))));
}

#[test]
fn nan_loss_aborts_with_a_diagnostic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 3);
    cfg.lr_generator = 1e30;
    cfg.lr_discriminator = 1e30;
    let layout = prepare_small(&cfg);
    match pipeline::train_synthesis(&cfg, &layout) {
        Err(Error::NonFiniteLoss { stage, batch, .. }) => {
            assert_eq!(stage, "synthesis");
            assert!(batch.contains("sub-"));
        }
        other => panic!("expected a NaN abort, got {other:?}"),
    }
    let dumps: Vec<_> = std::fs::read_dir(layout.diagnostics()).unwrap().collect();
    assert_eq!(dumps.len(), 1);
}

#[test]
fn automatic_split_excludes_the_atlas_and_partitions_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    cfg.n_subjects = 12;
    let layout = RunLayout::for_config(&cfg);
    pipeline::generate_phantoms(&cfg).unwrap();
    let split = pipeline::preprocess(&cfg, &layout).unwrap();
    let idx = pipeline::read_preprocessed(&layout.preprocessed()).unwrap();
    assert!(!split.assignment.contains_key(&idx.reference));
    assert_eq!(split.assignment.len(), 11);
    assert_eq!(split.counts(), [9, 1, 1]);
    // re-running is a no-op, and a cohort with other settings is refused
    pipeline::preprocess(&cfg, &layout).unwrap();
    cfg.n_subjects = 13;
    assert!(matches!(pipeline::preprocess(&cfg, &RunLayout::for_config(&cfg)), Err(Error::State(_))));
}
