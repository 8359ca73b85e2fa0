//! The pipeline commands on a deliberately small configuration.

use std::path::{Path, PathBuf};

use xpruner::config::RunConfig;
use xpruner::data::checkpoint::{load_checkpoint, Stage};
use xpruner::meter;
use xpruner::pipeline::{cmd_finetune, cmd_prune, cmd_report, cmd_train_baseline, cmd_train_masks, FOLD_REPORT};
use xpruner::prune::FoldReport;
use xpruner::Error;

fn small(dir: &Path) -> RunConfig {
    RunConfig {
        out_dir: dir.display().to_string(),
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        train_per_class: 12,
        test_per_class: 6,
        baseline_epochs: 3,
        mask_epochs: 2,
        search_epochs: 2,
        finetune_epochs: 2,
        batch_size: 8,
        ..RunConfig::default()
    }
}

struct Run {
    baseline: PathBuf,
    masked: PathBuf,
    pruned: PathBuf,
    finetuned: PathBuf,
    report: FoldReport,
}

fn full_run(cfg: &RunConfig) -> Run {
    let baseline = cmd_train_baseline(cfg).unwrap();
    let masked = cmd_train_masks(cfg, &baseline).unwrap();
    let (pruned, report) = cmd_prune(cfg, &masked).unwrap();
    let finetuned = cmd_finetune(cfg, &pruned).unwrap();
    Run {
        baseline,
        masked,
        pruned,
        finetuned,
        report,
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn end_to_end_artifacts_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let run = full_run(&cfg);
    let out = dir.path();

    // baseline metrics: header plus one row per epoch, epochs increasing
    let csv = read(&out.join("baseline_metrics.csv"));
    let epochs: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, vec![1, 2, 3]);

    // mask stats: one row per prunable unit
    let base = load_checkpoint(&run.baseline).unwrap();
    let stats = read(&out.join("mask_stats.csv"));
    assert_eq!(stats.lines().count() - 1, base.model.prunable_units().len());
    assert!(stats.starts_with("layer,kind,index,class_0_mean,class_1_mean,class_2_mean,score"));

    // frozen contract across mask training
    let masked = load_checkpoint(&run.masked).unwrap();
    assert_eq!(masked.stage, Stage::Masked);
    assert_eq!(masked.model.weight_digest(), base.model.weight_digest());
    assert!(masked.masks.is_some());

    // fold report on disk equals the returned one; FLOP ratio recomputes
    let on_disk: FoldReport = serde_json::from_str(&read(&out.join(FOLD_REPORT))).unwrap();
    assert_eq!(on_disk, run.report);
    let pruned = load_checkpoint(&run.pruned).unwrap();
    let input = [1, 16, 16];
    let ratio = meter::remaining_ratio(
        &meter::count_flops(&pruned.model, input).unwrap(),
        &meter::count_flops(&base.model, input).unwrap(),
    )
    .unwrap();
    assert!((ratio - run.report.flops_ratio).abs() < 1e-9);
    assert!((run.report.achieved_rate - cfg.alpha).abs() <= 0.05);
    for key in ["layer", "rate", "threshold", "kept_heads", "kept_neurons", "params_before", "params_after", "flops_before", "flops_after"] {
        assert!(read(&out.join(FOLD_REPORT)).contains(&format!("\"{key}\"")), "{key}");
    }

    // finetune metrics parse and are monotone in epoch
    let ft = read(&out.join("finetune_metrics.csv"));
    let rows: Vec<Vec<f64>> = ft
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
    assert_eq!(load_checkpoint(&run.finetuned).unwrap().stage, Stage::Finetuned);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(&small(a.path()));
    let rb = full_run(&small(b.path()));
    for name in [
        "baseline.ckpt",
        "baseline_metrics.csv",
        "masked.ckpt",
        "mask_metrics.csv",
        "mask_stats.csv",
        "search_metrics.csv",
        "fold_report.json",
        "pruned.ckpt",
        "finetuned.ckpt",
        "finetune_metrics.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(ra.report, rb.report);
}

#[test]
fn pipeline_order_and_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let baseline = cmd_train_baseline(&cfg).unwrap();

    // prune needs masks, finetune needs a pruned checkpoint
    assert!(matches!(cmd_prune(&cfg, &baseline), Err(Error::Pipeline(_))));
    assert!(matches!(cmd_finetune(&cfg, &baseline), Err(Error::Pipeline(_))));

    // architecture mismatch
    let other = RunConfig {
        embed_dim: 32,
        ..cfg.clone()
    };
    assert!(matches!(cmd_train_masks(&other, &baseline), Err(Error::Config { .. })));

    // impossible budget
    let masked = cmd_train_masks(&cfg, &baseline).unwrap();
    let greedy = RunConfig {
        alpha: 0.999,
        ..cfg.clone()
    };
    assert!(matches!(cmd_prune(&greedy, &masked), Err(Error::DegenerateArchitecture(_))));
    assert_eq!(Error::DegenerateArchitecture(String::new()).exit_code(), 5);

    // zero fine-tune epochs keep the weights
    let (pruned, _) = cmd_prune(&cfg, &masked).unwrap();
    let lazy = RunConfig {
        finetune_epochs: 0,
        ..cfg.clone()
    };
    let ft = cmd_finetune(&lazy, &pruned).unwrap();
    assert_eq!(load_checkpoint(&ft).unwrap().model.params(), load_checkpoint(&pruned).unwrap().model.params());

    // missing data files fail before any training
    let idx = RunConfig {
        data: "idx".into(),
        train_images: dir.path().join("nope-images").display().to_string(),
        train_labels: dir.path().join("nope-labels").display().to_string(),
        test_images: "x".into(),
        test_labels: "y".into(),
        ..cfg.clone()
    };
    let before = std::fs::read(&baseline).unwrap();
    assert!(matches!(cmd_train_baseline(&idx), Err(Error::Io { .. })));
    assert_eq!(std::fs::read(&baseline).unwrap(), before);
}

#[test]
fn report_rows_sort_by_alpha_and_match_fold_reports() {
    let root = tempfile::tempdir().unwrap();
    let base_cfg = small(&root.path().join("shared"));
    let baseline = cmd_train_baseline(&base_cfg).unwrap();
    let masked = cmd_train_masks(&base_cfg, &baseline).unwrap();
    let mut pruned = Vec::new();
    let mut folds = Vec::new();
    for alpha in [0.5, 0.2] {
        let cfg = RunConfig {
            alpha,
            out_dir: root.path().join(format!("a{alpha}")).display().to_string(),
            ..base_cfg.clone()
        };
        let (p, f) = cmd_prune(&cfg, &masked).unwrap();
        pruned.push(p);
        folds.push(f);
    }
    let report_cfg = RunConfig {
        out_dir: root.path().join("report").display().to_string(),
        ..base_cfg.clone()
    };
    let single = cmd_report(&report_cfg, &pruned[..1]).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert!(single.fold_report.is_some());
    assert!(root.path().join("report/report_layers.csv").exists());

    let all = vec![pruned[0].clone(), baseline.clone(), pruned[1].clone()];
    let report = cmd_report(&report_cfg, &all).unwrap();
    let alphas: Vec<f64> = report.rows.iter().map(|r| r.alpha).collect();
    assert_eq!(alphas, vec![0.0, 0.2, 0.5]);
    assert_eq!(report.rows[1].achieved_rate, folds[1].achieved_rate);
    assert_eq!(report.rows[2].achieved_rate, folds[0].achieved_rate);
    assert!((report.rows[2].flops_ratio - folds[0].flops_ratio).abs() < 1e-12);
    assert_eq!(report.rows[0].flops_ratio, 1.0);
    let csv = read(&root.path().join("report/report.csv"));
    assert_eq!(csv.lines().count(), 4);

    let foreign = RunConfig {
        heads: 4,
        out_dir: root.path().join("foreign").display().to_string(),
        ..base_cfg.clone()
    };
    let other = cmd_train_baseline(&foreign).unwrap();
    assert!(cmd_report(&report_cfg, &[baseline, other]).is_err());
}
