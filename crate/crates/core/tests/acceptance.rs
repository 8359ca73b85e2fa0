//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. Set
//! `XPRUNER_ACCEPTANCE=1,5` to run a subset. The end-to-end criteria share
//! one pair of full pipeline runs at the default configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpruner::autodiff::{grad_check, Tape, Var};
use xpruner::config::RunConfig;
use xpruner::data::checkpoint::load_checkpoint;
use xpruner::mask::{
    init_masks, mask_loss_tape, masked_forward, smoothness_loss_tape, sparsity_loss_tape, MaskLossWeights, MaskSet,
};
use xpruner::meter::{arch_flops, remaining_ratio, Architecture};
use xpruner::model::{build_model, BlockKeep, BlockMaskVars, Model, ModelConfig, UnitKind};
use xpruner::pipeline::{self, cmd_finetune, cmd_prune, cmd_report, cmd_train_baseline, cmd_train_masks};
use xpruner::prune::{
    accumulated_rate_tape, hard_prune, lagrangian_tape, soft_prune, soft_prune_tape, threshold_search_step,
    weighted_rate, GateVariant, LayerInfo, PruneConfig, PruneState,
};
use xpruner::{Result, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const INSTANCES: u64 = 20;
const IDENTITY_TOL: f64 = 1e-12;
const REMOVAL_TOL: f64 = 1e-10;
const RATE_BAND: f64 = 0.02;
const RATE_STEPS: usize = 200;
const EXACT_TOL: f64 = 1e-12;
const FOLD_TOL: f64 = 1e-10;
const FLOP_SLACK: f64 = 0.05;
const BASELINE_TRAIN_ACC: f64 = 0.95;
const DROP_AT_HALF: f64 = 0.05;
const DROP_AT_TENTH: f64 = 0.02;
const RETAIN_REL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, cfg.channels, cfg.image_size, cfg.image_size], |_| rng.random())
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        depth: 2,
        num_classes: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn toy(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::default()
    }
}

/// Class slices all equal to one random base in `[0.5, 1.5)`.
fn uniform_masks(model: &Model, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = MaskSet::ones_for(model);
    for t in m.tensors_mut() {
        let c = t.shape()[0];
        let inner = t.numel() / c;
        let base: Vec<f64> = (0..inner).map(|_| rng.random_range(0.5..1.5)).collect();
        for ci in 0..c {
            t.data_mut()[ci * inner..(ci + 1) * inner].copy_from_slice(&base);
        }
    }
    m
}

fn flat(v: &[BlockMaskVars]) -> Vec<Var> {
    v.iter().flat_map(|b| [b.head, b.out_proj, b.fc1, b.fc2]).collect()
}

fn thetas(tape: &mut Tape, state: &PruneState) -> Vec<Var> {
    state.theta.iter().map(|&t| tape.constant(Tensor::scalar(t))).collect()
}

// 1 ----------------------------------------------------------------------

/// A fixed random linear functional of `parts`, so every entry reaches the
/// output with an O(1) weight.
fn readout(t: &mut Tape, parts: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut acc: Option<Var> = None;
    for &p in parts {
        let w = Tensor::from_fn(t.shape(p), |_| rng.random_range(-1.0..1.0));
        let w = t.constant(w);
        let s = t.mul(p, w)?;
        let s = t.sum(s)?;
        acc = Some(match acc {
            Some(a) => t.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one part"))
}

fn worst_of(errors: &mut Vec<f64>, name: &str, detail: &mut Vec<String>) {
    let w = errors.iter().cloned().fold(0.0, f64::max);
    detail.push(format!("{name} {w:.1e}"));
    errors.clear();
}

fn gradient_suite() -> Result<Outcome> {
    let mut detail = Vec::new();
    let mut all = Vec::new();
    let mut errs = Vec::new();

    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(3..6);
        let x = Tensor::from_fn(&[c, 6], |_| rng.random_range(0.2..1.5));
        let f = |t: &mut Tape, v: Var| {
            let b = BlockMaskVars {
                head: v,
                out_proj: v,
                fc1: v,
                fc2: v,
            };
            smoothness_loss_tape(t, &[b])
        };
        errs.push(grad_check(f, &x, GRAD_EPS)?);
    }
    all.extend(&errs);
    worst_of(&mut errs, "smooth", &mut detail);

    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.5));
        let f = |t: &mut Tape, v: Var| {
            let b = BlockMaskVars {
                head: v,
                out_proj: v,
                fc1: v,
                fc2: v,
            };
            sparsity_loss_tape(t, &[b])
        };
        errs.push(grad_check(f, &x, GRAD_EPS)?);
    }
    all.extend(&errs);
    worst_of(&mut errs, "sparse", &mut detail);

    for seed in 0..INSTANCES {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            embed_dim: 4,
            heads: 2,
            mlp_ratio: 1,
            depth: 2,
            num_classes: 2,
            seed,
            ..ModelConfig::default()
        };
        let mut m = build_model(&cfg)?;
        for t in m.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut masks = MaskSet::ones_for(&m);
        for t in masks.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..2.0));
        }
        let x = images(&cfg, 2, seed);
        let labels = [1, 0];
        let w = MaskLossWeights {
            smooth: 0.05,
            sparse: 0.05,
        };
        let (block, which) = ((seed / 4 % 2) as usize, (seed % 4) as usize);
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let mut mv = masks.bind(t, false);
            match which {
                0 => mv[block].head = v,
                1 => mv[block].out_proj = v,
                2 => mv[block].fc1 = v,
                _ => mv[block].fc2 = v,
            }
            Ok(mask_loss_tape(t, &m, &mv, &x, &labels, w)?.0)
        };
        errs.push(grad_check(f, masks.blocks[block].tensors()[which], GRAD_EPS)?);
    }
    all.extend(&errs);
    worst_of(&mut errs, "total", &mut detail);

    let mut theta_errs = Vec::new();
    for seed in 0..INSTANCES {
        let m = build_model(&tiny(seed))?;
        let units = m.prunable_units();
        let masks = uniform_masks(&m, seed);
        let state = PruneState::init(&masks, &units, PruneConfig::default())?;
        let block = (seed % 2) as usize;
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let mut mv = masks.bind(t, false);
            if seed % 4 < 2 {
                mv[block].head = v;
            } else {
                mv[block].fc1 = v;
            }
            let th = thetas(t, &state);
            let (g, _) = soft_prune_tape(t, &mv, &th, &state, &units)?;
            readout(t, &[g[block].head, g[block].fc1, g[block].fc2], seed)
        };
        let x = if seed % 4 < 2 {
            &masks.blocks[block].head
        } else {
            &masks.blocks[block].fc1
        };
        errs.push(grad_check(f, x, GRAD_EPS)?);
        let l = (seed % state.layers.len() as u64) as usize;
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let mv = masks.bind(t, false);
            let mut th = thetas(t, &state);
            th[l] = v;
            let (g, _) = soft_prune_tape(t, &mv, &th, &state, &units)?;
            let mut acc = t.sum(g[0].head)?;
            for p in flat(&g) {
                let s = t.square(p)?;
                let s = t.sum(s)?;
                acc = t.add(acc, s)?;
            }
            Ok(acc)
        };
        theta_errs.push(grad_check(f, &Tensor::scalar(state.theta[l]), GRAD_EPS)?);
    }
    all.extend(&errs);
    worst_of(&mut errs, "gate/masks", &mut detail);
    all.extend(&theta_errs);
    worst_of(&mut theta_errs, "gate/theta", &mut detail);

    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(2..7);
        let layers: Vec<LayerInfo> = (0..n)
            .map(|i| LayerInfo {
                block: i / 2,
                kind: if i % 2 == 0 {
                    UnitKind::AttentionHead
                } else {
                    UnitKind::MlpNeuron
                },
                units: 4,
                params: 4 * rng.random_range(1..500),
            })
            .collect();
        let r0 = Tensor::from_fn(&[n], |_| rng.random_range(0.0..0.7));
        let (alpha, beta, gamma) = (rng.random_range(0.1..0.9), rng.random_range(0.0..3.0), rng.random_range(-2.0..2.0));
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let rates: Vec<Var> = (0..n).map(|i| t.narrow(v, 0, i, 1)).collect::<Result<_>>()?;
            let r = accumulated_rate_tape(t, &rates, &layers)?;
            let b = t.constant(Tensor::scalar(beta));
            let g = t.constant(Tensor::scalar(gamma));
            lagrangian_tape(t, alpha, b, g, r)
        };
        errs.push(grad_check(f, &r0, GRAD_EPS)?);
    }
    all.extend(&errs);
    worst_of(&mut errs, "penalty/rates", &mut detail);

    let worst = all.iter().cloned().fold(0.0, f64::max);
    Ok(outcome(
        worst < GRAD_TOL,
        format!("max rel err {worst:.1e} < {GRAD_TOL:.0e} over {} checks ({})", all.len(), detail.join(", ")),
    ))
}

// 2 ----------------------------------------------------------------------

fn identity_and_removal() -> Result<Outcome> {
    let mut ident: f64 = 0.0;
    let mut removal: f64 = 0.0;
    for seed in 0..5 {
        let cfg = toy(seed);
        let mut m = build_model(&cfg)?;
        let masks = init_masks(&mut m);
        let x = images(&cfg, 6, seed);
        let sel = [0, 1, 2, 2, 1, 0];
        ident = ident.max(m.forward(&x)?.max_abs_diff(&masked_forward(&m, &masks, &x, &sel)?));

        // zero one head in block 0 and two neurons in block 1, for every class
        let mut zeroed = masks.clone();
        let dh = cfg.head_dim();
        let (d, hidden) = (cfg.embed_dim, cfg.mlp_hidden());
        let head = 1 + seed as usize % 3;
        let neurons = [5, 70 + seed as usize];
        for c in 0..cfg.num_classes {
            let b0 = &mut zeroed.blocks[0];
            let at = (c * cfg.heads + head) * dh;
            b0.head.data_mut()[at..at + dh].fill(0.0);
            let b1 = &mut zeroed.blocks[1];
            for &n in &neurons {
                b1.fc1.data_mut()[(c * hidden + n) * d..(c * hidden + n + 1) * d].fill(0.0);
                for r in 0..d {
                    b1.fc2.data_mut()[(c * d + r) * hidden + n] = 0.0;
                }
            }
        }
        let keep = vec![
            BlockKeep {
                heads: (0..cfg.heads).filter(|&h| h != head).collect(),
                neurons: (0..hidden).collect(),
            },
            BlockKeep {
                heads: (0..cfg.heads).collect(),
                neurons: (0..hidden).filter(|n| !neurons.contains(n)).collect(),
            },
        ];
        let pruned = m.apply_structural_prune(&keep)?;
        removal = removal.max(masked_forward(&m, &zeroed, &x, &sel)?.max_abs_diff(&pruned.forward(&x)?));
    }
    Ok(outcome(
        ident < IDENTITY_TOL && removal < REMOVAL_TOL,
        format!("all-ones masks {ident:.1e} < {IDENTITY_TOL:.0e}; zero-gated removal {removal:.1e} < {REMOVAL_TOL:.0e}"),
    ))
}

// 3 ----------------------------------------------------------------------

struct SearchTrace {
    first_hit: Option<usize>,
    final_gap: f64,
    worst_late: f64,
}

fn run_search(
    model: &Model,
    masks: &MaskSet,
    cfg: PruneConfig,
    start: Option<f64>,
    data: &xpruner::data::Dataset,
    batch: usize,
    steps: usize,
) -> Result<(SearchTrace, Model, MaskSet, PruneState)> {
    let mut model = model.clone();
    let mut masks = masks.clone();
    let units = model.prunable_units();
    let mut state = PruneState::init(&masks, &units, cfg)?;
    if let Some(r0) = start {
        for (r, l) in state.rate.iter_mut().zip(&state.layers) {
            *r = r0.min(l.max_rate());
        }
    }
    let mut trace = SearchTrace {
        first_hit: None,
        final_gap: 0.0,
        worst_late: 0.0,
    };
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|i| (step * batch + i) % data.len()).collect();
        let (x, y) = data.batch(&idx)?;
        threshold_search_step(&mut model, &mut masks, &mut state, &units, &x, &y)?;
        if trace.first_hit.is_none() && state.gap() <= RATE_BAND {
            trace.first_hit = Some(step + 1);
        }
        if step + 1 > steps / 2 {
            trace.worst_late = trace.worst_late.max(state.gap());
        }
    }
    trace.final_gap = state.gap();
    Ok((trace, model, masks, state))
}

fn rate_convergence(run: &Runs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&run.a.join(pipeline::MASKED_CKPT))?;
    let masks = ckpt.masks.expect("masked checkpoint");
    let cfg = RunConfig::default();
    let (train_set, _) = pipeline::load_data(&cfg)?;
    let mut pass = true;
    let mut detail = Vec::new();
    for alpha in [0.3, 0.5] {
        let pc = PruneConfig {
            alpha,
            ..cfg.prune_config()
        };
        // prescribed start (rates at alpha), default gate
        let (t, model, m, state) = run_search(&ckpt.model, &masks, pc.clone(), None, &train_set, cfg.batch_size, RATE_STEPS)?;
        let hit = t.first_hit.unwrap_or(usize::MAX);
        let ok = hit <= RATE_STEPS && t.final_gap <= RATE_BAND;
        // post-prune reduction per layer within one unit of r n
        let units = model.prunable_units();
        let (_, report) = hard_prune(&model, &m, &state, &units)?;
        let mut unit_ok = true;
        let mut removed_total = 0usize;
        for (l, info) in state.layers.iter().enumerate() {
            let lf = &report.layers[info.block];
            let kept = match info.kind {
                UnitKind::AttentionHead => lf.kept_heads.len(),
                UnitKind::MlpNeuron => lf.kept_neurons.len(),
            };
            let removed = (info.units - kept) * info.unit_params();
            removed_total += removed;
            let target = state.rate[l] * info.params as f64;
            unit_ok &= (removed as f64 - target).abs() < info.unit_params() as f64;
        }
        let target: f64 = state.rate.iter().zip(&state.layers).map(|(r, l)| r * l.params as f64).sum();
        pass &= ok && unit_ok;
        detail.push(format!(
            "alpha {alpha}: band at step {hit}, |R-alpha| {:.4} at step {RATE_STEPS}, removed {removed_total} vs sum r n {target:.1}{}",
            t.final_gap,
            if unit_ok { "" } else { " (off by more than one unit)" }
        ));
        // perturbed start, rectified gate; informational
        let start = if alpha < 0.4 { 0.05 } else { 0.8 };
        let rect = PruneConfig {
            gate: GateVariant::Rectified,
            ..pc
        };
        let (t, ..) = run_search(&ckpt.model, &masks, rect, Some(start), &train_set, cfg.batch_size, 2 * RATE_STEPS)?;
        let hit = t.first_hit.map_or("never".into(), |h| h.to_string());
        detail.push(format!(
            "from r={start} (rectified): band at step {hit}, worst |R-alpha| {:.4} over steps {}-{}",
            t.worst_late,
            RATE_STEPS + 1,
            2 * RATE_STEPS
        ));
    }
    Ok(outcome(pass, detail.join("; ")))
}

// 4 ----------------------------------------------------------------------

fn rate_exactness() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut grads_exact = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let n = rng.random_range(1..9);
        let params: Vec<usize> = (0..n).map(|_| rng.random_range(1..100_000)).collect();
        let rates: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: usize = params.iter().sum();
        let mut by_hand = 0.0;
        for i in (0..n).rev() {
            by_hand += rates[i] * params[i] as f64;
        }
        by_hand /= total as f64;
        worst = worst.max((weighted_rate(&rates, &params)? - by_hand).abs());

        let layers: Vec<LayerInfo> = params
            .iter()
            .enumerate()
            .map(|(i, &p)| LayerInfo {
                block: i / 2,
                kind: if i % 2 == 0 {
                    UnitKind::AttentionHead
                } else {
                    UnitKind::MlpNeuron
                },
                units: 1,
                params: p,
            })
            .collect();
        let mut tape = Tape::new();
        let r: Vec<Var> = rates.iter().map(|&v| tape.param(Tensor::scalar(v))).collect();
        let big = accumulated_rate_tape(&mut tape, &r, &layers)?;
        worst = worst.max((tape.value(big).item() - by_hand).abs());
        tape.backward(big)?;
        for (v, &p) in r.iter().zip(&params) {
            grads_exact &= tape.grad(*v).map(|g| g.item()) == Some(p as f64 / total as f64);
        }
    }
    Ok(outcome(
        worst <= EXACT_TOL && grads_exact,
        format!(
            "max |R - hand| {worst:.1e} <= {EXACT_TOL:.0e} on 10 configs; dR/dr = n/N {}",
            if grads_exact { "exactly" } else { "NOT exact" }
        ),
    ))
}

// 5 ----------------------------------------------------------------------

fn fold_equivalence() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut dropped = 0;
    for seed in 0..5 {
        let cfg = toy(seed);
        let m = build_model(&cfg)?;
        let units = m.prunable_units();
        let masks = uniform_masks(&m, 50 + seed);
        // rectified gates zero every dropped unit below its threshold
        let pc = PruneConfig {
            alpha: 0.3 + 0.05 * seed as f64,
            gate: GateVariant::Rectified,
            ..PruneConfig::default()
        };
        let state = PruneState::init(&masks, &units, pc)?;
        let (gated, d) = soft_prune(&masks, &state, &units)?;
        dropped += d.units.iter().filter(|g| !g.kept).count();
        let (pruned, _) = hard_prune(&m, &masks, &state, &units)?;
        let x = images(&cfg, 4, seed);
        let soft = masked_forward(&m, &gated, &x, &[0, 1, 2, 0])?;
        worst = worst.max(soft.max_abs_diff(&pruned.forward(&x)?));
    }
    Ok(outcome(
        worst < FOLD_TOL,
        format!("max |soft - folded| {worst:.1e} < {FOLD_TOL:.0e} on 5 models ({dropped} units removed)"),
    ))
}

// 6 ----------------------------------------------------------------------

fn flop_calibration() -> Result<Outcome> {
    let tiny = arch_flops(&Architecture::from_config(&ModelConfig::deit_tiny()), [3, 224, 224])?;
    let small = arch_flops(&Architecture::from_config(&ModelConfig::deit_small()), [3, 224, 224])?;
    let (t, s) = (tiny.flops_total as f64 / 1e9, small.flops_total as f64 / 1e9);
    let t_ok = ((t - 1.3) / 1.3).abs() <= FLOP_SLACK;
    let s_ok = ((s - 4.6) / 4.6).abs() <= FLOP_SLACK;
    let mut pruned = small.clone();
    pruned.flops_total = 2_400_000_000;
    let mut base = small.clone();
    base.flops_total = 4_600_000_000;
    let pct = (remaining_ratio(&pruned, &base)? * 1000.0).round() / 10.0;
    Ok(outcome(
        t_ok && s_ok && pct == 52.2,
        format!("DeiT-T {t:.3}G vs 1.3G, DeiT-S {s:.3}G vs 4.6G (slack {FLOP_SLACK}); 2.4G/4.6G -> {pct}%"),
    ))
}

// 7 and 8 ----------------------------------------------------------------

struct Runs {
    _root: tempfile::TempDir,
    a: PathBuf,
    b: PathBuf,
    seconds: f64,
}

struct Accuracies {
    baseline_train: f64,
    baseline_test: f64,
    half: f64,
    tenth: f64,
}

fn last_history(path: &Path) -> Result<xpruner::train::EpochLog> {
    let c = load_checkpoint(path)?;
    Ok(c.metadata.history.last().cloned().expect("history"))
}

/// Baseline, masks, then prune and fine-tune at alpha 0.5 (in `dir`) and
/// 0.1 (in `dir/alpha-0.1`), then a report over the three final models.
fn full_pipeline(dir: &Path) -> Result<Accuracies> {
    let cfg = RunConfig {
        out_dir: dir.display().to_string(),
        ..RunConfig::default()
    };
    let baseline = cmd_train_baseline(&cfg)?;
    let masked = cmd_train_masks(&cfg, &baseline)?;
    let (pruned, _) = cmd_prune(&cfg, &masked)?;
    let half = cmd_finetune(&cfg, &pruned)?;
    let tenth_cfg = RunConfig {
        alpha: 0.1,
        out_dir: dir.join("alpha-0.1").display().to_string(),
        ..cfg.clone()
    };
    let (pruned, _) = cmd_prune(&tenth_cfg, &masked)?;
    let tenth = cmd_finetune(&tenth_cfg, &pruned)?;
    let report_cfg = RunConfig {
        out_dir: dir.join("report").display().to_string(),
        ..cfg.clone()
    };
    cmd_report(&report_cfg, &[baseline.clone(), half.clone(), tenth.clone()])?;
    let b = last_history(&baseline)?;
    Ok(Accuracies {
        baseline_train: b.train_accuracy,
        baseline_test: b.test_accuracy.expect("test accuracy"),
        half: last_history(&half)?.test_accuracy.expect("test accuracy"),
        tenth: last_history(&tenth)?.test_accuracy.expect("test accuracy"),
    })
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn copy_tree(from: &Path, to: &Path) {
    for rel in files_under(from) {
        let dst = to.join(&rel);
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(from.join(&rel), dst).unwrap();
    }
}

/// Two full runs at the same configuration. The second run writes to the
/// same output directory (the configuration includes it) after the first
/// run's files are moved aside.
fn two_runs() -> Result<(Runs, Accuracies, Accuracies)> {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let live = root.path().join("run");
    let a = root.path().join("first");
    let first = full_pipeline(&live)?;
    copy_tree(&live, &a);
    std::fs::remove_dir_all(&live).unwrap();
    let second = full_pipeline(&live)?;
    Ok((
        Runs {
            _root: root,
            a,
            b: live,
            seconds: start.elapsed().as_secs_f64(),
        },
        first,
        second,
    ))
}

fn end_to_end(acc: &Accuracies, runs: &Runs) -> Outcome {
    let base_ok = acc.baseline_train >= BASELINE_TRAIN_ACC;
    let half_ok = acc.baseline_test - acc.half <= DROP_AT_HALF;
    let tenth_ok = acc.baseline_test - acc.tenth <= DROP_AT_TENTH;
    outcome(
        base_ok && half_ok && tenth_ok,
        format!(
            "baseline train {:.4} (>= {BASELINE_TRAIN_ACC}), test {:.4}; alpha 0.5 test {:.4} (drop <= {DROP_AT_HALF}); alpha 0.1 test {:.4} (drop <= {DROP_AT_TENTH}); two full runs {:.0}s",
            acc.baseline_train, acc.baseline_test, acc.half, acc.tenth, runs.seconds
        ),
    )
}

fn reproducibility(runs: &Runs) -> Outcome {
    let fa = files_under(&runs.a);
    let fb = files_under(&runs.b);
    let mut differing = Vec::new();
    for rel in &fa {
        if std::fs::read(runs.a.join(rel)).ok() != std::fs::read(runs.b.join(rel)).ok() {
            differing.push(rel.display().to_string());
        }
    }
    let ckpts = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    let reports = fa.iter().filter(|p| p.starts_with("report")).count();
    outcome(
        fa == fb && differing.is_empty(),
        if differing.is_empty() && fa == fb {
            format!("{} files identical, {ckpts} checkpoints and {reports} report files among them", fa.len())
        } else {
            format!("differing: {differing:?}; file lists equal: {}", fa == fb)
        },
    )
}

// 9 ----------------------------------------------------------------------

fn gate_asymptotics() -> Result<Outcome> {
    let cfg = tiny(0);
    let m = build_model(&cfg)?;
    let units = m.prunable_units();
    let (c, h, dh, d, hid) = (cfg.num_classes, cfg.heads, cfg.head_dim(), cfg.embed_dim, cfg.mlp_hidden());
    let theta = 0.75;
    // unit i scores exactly theta (i = 0) or theta + 0.5 + 0.125 (i - 1)
    let score = |i: usize| if i == 0 { theta } else { theta + 0.5 + 0.125 * (i - 1) as f64 };
    let mut masks = MaskSet::ones_for(&m);
    for b in &mut masks.blocks {
        for ci in 0..c {
            for u in 0..h {
                b.head.data_mut()[(ci * h + u) * dh..(ci * h + u + 1) * dh].fill(score(u));
            }
            for u in 0..hid {
                b.fc1.data_mut()[(ci * hid + u) * d..(ci * hid + u + 1) * d].fill(score(u));
                for r in 0..d {
                    b.fc2.data_mut()[(ci * d + r) * hid + u] = score(u);
                }
            }
        }
    }
    let mut worst_rel: f64 = 0.0;
    let mut zero_ok = true;
    for rate in [0.0, 0.4] {
        let mut state = PruneState::init(
            &masks,
            &units,
            PruneConfig {
                alpha: 0.2,
                ..PruneConfig::default()
            },
        )?;
        state.theta.iter_mut().for_each(|t| *t = theta);
        state.rate.iter_mut().for_each(|r| *r = rate);
        let (gated, decision) = soft_prune(&masks, &state, &units)?;
        for g in &decision.units {
            let b = (&masks.blocks[g.unit.block], &gated.blocks[g.unit.block]);
            let mut entries = Vec::new();
            for ci in 0..c {
                match g.unit.kind {
                    UnitKind::AttentionHead => {
                        for k in 0..dh {
                            let at = (ci * h + g.unit.index) * dh + k;
                            entries.push((b.0.head.data()[at], b.1.head.data()[at]));
                        }
                    }
                    UnitKind::MlpNeuron => {
                        for k in 0..d {
                            let at = (ci * hid + g.unit.index) * d + k;
                            entries.push((b.0.fc1.data()[at], b.1.fc1.data()[at]));
                            let at = (ci * d + k) * hid + g.unit.index;
                            entries.push((b.0.fc2.data()[at], b.1.fc2.data()[at]));
                        }
                    }
                }
            }
            let l = g.unit.layer();
            if g.score == state.theta[l] {
                zero_ok &= g.gate == 0.0 && entries.iter().all(|e| e.1 == 0.0);
            } else if g.kept && g.score - state.theta[l] >= 0.5 {
                for (raw, out) in entries {
                    worst_rel = worst_rel.max(((out - raw) / raw).abs());
                }
            }
        }
    }
    Ok(outcome(
        worst_rel <= RETAIN_REL && zero_ok,
        format!(
            "n=10: kept units with s-theta >= 0.5 retain entries to {worst_rel:.2e} (<= {RETAIN_REL:.0e}); s = theta gives zero gates {}",
            if zero_ok { "exactly" } else { "NOT exactly" }
        ),
    ))
}

// ------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("XPRUNER_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(u32, &str, Result<Outcome>, f64)> = Vec::new();
    let mut timed = |k: u32, name: &'static str, f: &mut dyn FnMut() -> Result<Outcome>| {
        if wanted(k) {
            let t = Instant::now();
            let r = f();
            results.push((k, name, r, t.elapsed().as_secs_f64()));
        }
    };
    timed(1, "gradient suite", &mut gradient_suite);
    timed(2, "identity and zero-gated removal", &mut identity_and_removal);
    timed(4, "accumulated-rate exactness", &mut rate_exactness);
    timed(5, "fold equivalence", &mut fold_equivalence);
    timed(6, "FLOP meter calibration", &mut flop_calibration);
    timed(9, "gate asymptotics", &mut gate_asymptotics);
    let need_runs = [3, 7, 8].iter().any(|&k| wanted(k));
    if need_runs {
        match two_runs() {
            Ok((runs, acc, _)) => {
                timed(3, "rate convergence", &mut || rate_convergence(&runs));
                timed(7, "end-to-end desk scale", &mut || Ok(end_to_end(&acc, &runs)));
                timed(8, "reproducibility", &mut || Ok(reproducibility(&runs)));
            }
            Err(e) => {
                for (k, name) in [(3, "rate convergence"), (7, "end-to-end desk scale"), (8, "reproducibility")] {
                    let msg = format!("pipeline run failed: {e}");
                    timed(k, name, &mut || Err(xpruner::Error::Pipeline(msg.clone())));
                }
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (k, name, r, secs) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {k} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
