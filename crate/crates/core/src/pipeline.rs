//! The five pipeline commands. Each reads and writes files under the
//! configured output directory and is reproducible for a fixed config.
//!
//! | command          | reads            | writes                                           |
//! |------------------|------------------|--------------------------------------------------|
//! | `train-baseline` | data             | `baseline.ckpt`, `baseline_metrics.csv`          |
//! | `train-masks`    | baseline ckpt    | `masked.ckpt`, `mask_metrics.csv`, `mask_stats.csv` |
//! | `prune`          | masked ckpt      | `pruned.ckpt`, `search_metrics.csv`, `fold_report.json` |
//! | `finetune`       | pruned ckpt      | `finetuned.ckpt`, `finetune_metrics.csv`         |
//! | `report`         | any checkpoints  | `report.json`, `report.csv`, `report_layers.csv` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use crate::data::idx::load_idx;
use crate::data::{synth_split, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::mask::{init_masks, mask_training_step, unit_class_means, unit_score, MaskLossParts};
use crate::meter::{self, Architecture};
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::Sgd;
use crate::prune::{hard_prune, threshold_search, FoldReport, PruneState, SearchMetrics};
use crate::rng::{self, Stream};
use crate::train::{self, evaluate, EpochLog};

pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const MASKED_CKPT: &str = "masked.ckpt";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt";
pub const FOLD_REPORT: &str = "fold_report.json";

/// Train and test splits named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.data.as_str() {
        "synthetic" => synth_split(
            cfg.seed,
            &SynthConfig {
                num_classes: cfg.num_classes,
                train_per_class: cfg.train_per_class,
                test_per_class: cfg.test_per_class,
                image_size: cfg.image_size,
                noise: cfg.noise,
            },
        )?,
        "idx" => (
            load_idx(Path::new(&cfg.train_images), Path::new(&cfg.train_labels), cfg.num_classes, Split::Train)?,
            load_idx(Path::new(&cfg.test_images), Path::new(&cfg.test_labels), cfg.num_classes, Split::Test)?,
        ),
        other => return Err(Error::config("data", format!("unknown source {other:?}"))),
    };
    for ds in [&train, &test] {
        let want = [cfg.channels, cfg.image_size, cfg.image_size];
        if ds.image_shape() != want {
            return Err(Error::config(
                "image_size",
                format!("data images are {:?}, config expects {want:?}", ds.image_shape()),
            ));
        }
    }
    Ok((train, test))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(path, ckpt)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,train_accuracy,test_accuracy\n");
    for l in logs {
        let _ = writeln!(s, "{},{},{},{}", l.epoch, l.loss, l.train_accuracy, opt(l.test_accuracy));
    }
    s
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

fn check_architecture(cfg: &RunConfig, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if !same_architecture(&cfg.model_config(), &ckpt.model.config) {
        return Err(Error::config(
            "model",
            format!("{} was built for a different architecture than the config", path.display()),
        ));
    }
    Ok(())
}

/// Trains the unmasked model.
pub fn cmd_train_baseline(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (train_set, test) = load_data(cfg)?;
    let mut model = build_model(&cfg.model_config())?;
    let logs = train::train(&mut model, &train_set, Some(&test), &cfg.baseline_train())?;
    let out = cfg.out_dir();
    write(&out.join("baseline_metrics.csv"), &epoch_csv(&logs))?;
    let mut ckpt = Checkpoint::new(Stage::Baseline, model);
    ckpt.metadata.seed = cfg.seed;
    ckpt.metadata.history = logs;
    let path = out.join(BASELINE_CKPT);
    save(&path, &ckpt)?;
    Ok(path)
}

/// Per-epoch mask losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEpoch {
    pub epoch: usize,
    pub parts: MaskLossParts,
}

/// Trains class-conditional masks on the frozen baseline.
pub fn cmd_train_masks(cfg: &RunConfig, baseline: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let base = load_checkpoint(baseline)?;
    check_architecture(cfg, &base, baseline)?;
    let (train_set, _) = load_data(cfg)?;
    let mut model = base.model;
    let mut masks = init_masks(&mut model);
    let weights = cfg.mask_weights();
    let mut opt = Sgd::new(cfg.mask_lr, cfg.mask_momentum);
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut csv = String::from("epoch,total,ce,smooth,sparse\n");
    for epoch in 1..=cfg.mask_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng::shuffle(&mut rng, &mut order);
        let mut sum = MaskLossParts::default();
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let p = mask_training_step(&model, &mut masks, &mut opt, &x, &y, weights)?;
            sum.total += p.total;
            sum.ce += p.ce;
            sum.smooth += p.smooth;
            sum.sparse += p.sparse;
            batches += 1.0;
        }
        let _ = writeln!(
            csv,
            "{epoch},{},{},{},{}",
            sum.total / batches,
            sum.ce / batches,
            sum.smooth / batches,
            sum.sparse / batches
        );
        info!("mask epoch {epoch}: loss {:.5}", sum.total / batches);
    }
    let out = cfg.out_dir();
    write(&out.join("mask_metrics.csv"), &csv)?;

    let c = masks.num_classes;
    let mut stats = String::from("layer,kind,index");
    for k in 0..c {
        let _ = write!(stats, ",class_{k}_mean");
    }
    stats.push_str(",score\n");
    for u in model.prunable_units() {
        let _ = write!(stats, "{},{},{}", u.block, u.kind.as_str(), u.index);
        for m in unit_class_means(&masks, &u)? {
            let _ = write!(stats, ",{m}");
        }
        let _ = writeln!(stats, ",{}", unit_score(&masks, &u)?);
    }
    write(&out.join("mask_stats.csv"), &stats)?;

    let mut ckpt = Checkpoint::new(Stage::Masked, model);
    ckpt.masks = Some(masks);
    ckpt.metadata = base.metadata;
    let path = out.join(MASKED_CKPT);
    save(&path, &ckpt)?;
    Ok(path)
}

fn search_csv(history: &[SearchMetrics]) -> String {
    let mut s = String::from("step,loss,ce,penalty,rate,beta,gamma\n");
    for m in history {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", m.step, m.loss, m.ce, m.penalty, m.rate, m.beta, m.gamma);
    }
    s
}

/// Threshold search, then hard pruning with mask folding.
pub fn cmd_prune(cfg: &RunConfig, masked: &Path) -> Result<(PathBuf, FoldReport)> {
    cfg.validate()?;
    let ckpt = load_checkpoint(masked)?;
    check_architecture(cfg, &ckpt, masked)?;
    let mut masks = ckpt
        .masks
        .ok_or_else(|| Error::Pipeline(format!("{} holds no masks; run train-masks first", masked.display())))?;
    let (train_set, _) = load_data(cfg)?;
    let mut model = ckpt.model;
    let units = model.prunable_units();
    let mut state = PruneState::init(&masks, &units, cfg.prune_config())?;
    let outcome = threshold_search(
        &mut model,
        &mut masks,
        &mut state,
        &units,
        &train_set,
        cfg.batch_size,
        cfg.search_epochs,
        cfg.tolerance,
        cfg.seed,
    )?;
    let out = cfg.out_dir();
    write(&out.join("search_metrics.csv"), &search_csv(&outcome.history))?;
    if !outcome.converged {
        let achieved = state.accumulated_rate();
        return Err(Error::NonConvergence {
            achieved,
            alpha: cfg.alpha,
            gap: (achieved - cfg.alpha).abs(),
            steps: outcome.history.len(),
        });
    }
    let (pruned, report) = hard_prune(&model, &masks, &state, &units)?;
    write(&out.join(FOLD_REPORT), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut next = Checkpoint::new(Stage::Pruned, pruned);
    next.prune_state = Some(state);
    next.fold_report = Some(report.clone());
    next.metadata = ckpt.metadata;
    let path = out.join(PRUNED_CKPT);
    save(&path, &next)?;
    Ok((path, report))
}

/// Fine-tunes a pruned model.
pub fn cmd_finetune(cfg: &RunConfig, pruned: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ckpt = load_checkpoint(pruned)?;
    check_architecture(cfg, &ckpt, pruned)?;
    if ckpt.stage < Stage::Pruned {
        return Err(Error::Pipeline(format!(
            "{} is a {} checkpoint; fine-tuning needs a pruned one",
            pruned.display(),
            ckpt.stage.as_str()
        )));
    }
    let (train_set, test) = load_data(cfg)?;
    let mut model = ckpt.model;
    let logs = train::finetune(&mut model, &train_set, Some(&test), &cfg.finetune_train())?;
    let out = cfg.out_dir();
    write(&out.join("finetune_metrics.csv"), &epoch_csv(&logs))?;
    let mut next = Checkpoint::new(Stage::Finetuned, model);
    next.prune_state = ckpt.prune_state;
    next.fold_report = ckpt.fold_report;
    next.metadata.seed = cfg.seed;
    next.metadata.history = logs;
    let path = out.join(FINETUNED_CKPT);
    save(&path, &next)?;
    Ok(path)
}

/// One row of the consolidated report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub stage: Stage,
    /// Budget the checkpoint was pruned for; 0 when unpruned.
    pub alpha: f64,
    pub achieved_rate: f64,
    pub params: usize,
    pub flops: u64,
    /// FLOPs relative to the unpruned architecture.
    pub flops_ratio: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Per-layer fold lines when exactly one pruned checkpoint was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_report: Option<FoldReport>,
}

/// Accuracy and resource table over `checkpoints`, sorted by alpha.
pub fn cmd_report(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Report> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::config("checkpoints", "at least one checkpoint is required"));
    }
    let loaded = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| (p, c)))
        .collect::<Result<Vec<_>>>()?;
    let first = &loaded[0].1.model.config;
    for (p, c) in &loaded {
        if !same_architecture(first, &c.model.config) {
            return Err(Error::config(
                "checkpoints",
                format!("{} has a different base architecture than {}", p.display(), checkpoints[0].display()),
            ));
        }
    }
    check_architecture(cfg, &loaded[0].1, loaded[0].0)?;
    let (_, test) = load_data(cfg)?;
    let input = [first.channels, first.image_size, first.image_size];
    let full = meter::arch_flops(&Architecture::from_config(first), input)?;
    let mut rows = Vec::with_capacity(loaded.len());
    for (p, c) in &loaded {
        let r = meter::count_flops(&c.model, input)?;
        rows.push(ReportRow {
            checkpoint: p.display().to_string(),
            stage: c.stage,
            alpha: c.fold_report.as_ref().map_or(0.0, |f| f.alpha),
            achieved_rate: c.fold_report.as_ref().map_or(0.0, |f| f.achieved_rate),
            params: r.total_params,
            flops: r.flops_total,
            flops_ratio: meter::remaining_ratio(&r, &full)?,
            test_accuracy: evaluate(&c.model, &test, cfg.batch_size)?,
        });
    }
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let pruned: Vec<&FoldReport> = loaded.iter().filter_map(|(_, c)| c.fold_report.as_ref()).collect();
    let report = Report {
        rows,
        fold_report: (pruned.len() == 1 && loaded.len() == 1).then(|| pruned[0].clone()),
    };

    let out = cfg.out_dir();
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut csv = String::from("checkpoint,stage,alpha,achieved_rate,params,flops,flops_ratio,test_accuracy\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.checkpoint,
            r.stage.as_str(),
            r.alpha,
            r.achieved_rate,
            r.params,
            r.flops,
            r.flops_ratio,
            r.test_accuracy
        );
    }
    write(&out.join("report.csv"), &csv)?;
    if let Some(f) = &report.fold_report {
        write(&out.join("report_layers.csv"), &layer_csv(f))?;
    }
    Ok(report)
}

pub fn layer_csv(f: &FoldReport) -> String {
    let mut s = String::from(
        "layer,rate_heads,rate_neurons,threshold_heads,threshold_neurons,kept_heads,kept_neurons,params_before,params_after,flops_before,flops_after\n",
    );
    for l in &f.layers {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            l.layer,
            l.rate.heads,
            l.rate.neurons,
            l.threshold.heads,
            l.threshold.neurons,
            l.kept_heads.len(),
            l.kept_neurons.len(),
            l.params_before,
            l.params_after,
            l.flops_before,
            l.flops_after
        );
    }
    s
}

/// Loads a checkpoint's model, for callers that only need weights.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.model)
}
