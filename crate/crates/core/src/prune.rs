//! Threshold search, hard pruning and mask folding.
//!
//! Every block contributes two prunable layers: its attention heads and its
//! MLP neurons (see [`PrunableUnit::layer`]). Each layer owns a threshold
//! `theta` and a pruning rate `r`. During the search the masks are gated per
//! unit:
//!
//! ```text
//! kept unit:    e -> e * tanh(n (s - theta))
//! dropped unit: e -> p * tanh(n (s - theta))
//! ```
//!
//! where `s` is the unit score and the kept set is the top
//! `ceil((1 - r) * units)` units by score. The selection is treated as a
//! constant of each step; rates only learn through the budget penalty
//! `beta (alpha - R)^2 + gamma (alpha - R)`.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{mask_vars_flat, MaskSet};
use crate::meter::{self, Architecture};
use crate::model::{BlockKeep, BlockMaskVars, MaskContext, Model, PrunableUnit, UnitKind};
use crate::optim::{Adam, Sgd};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Slack used when turning a rate into a kept count, so that rates like
/// `1/3` do not round up an extra unit.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVariant {
    /// Dropped entries become `p * tanh(n (s - theta))`, sign included.
    #[default]
    Verbatim,
    /// As `Verbatim`, floored at zero.
    Rectified,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One gate per unit, from the unit score.
    #[default]
    Unit,
    /// One gate per mask entry, from the entry itself. Cannot be folded into
    /// unit removal exactly; meant for experiments.
    Elementwise,
}

impl std::str::FromStr for GateVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "rectified" => Ok(Self::Rectified),
            _ => Err(Error::config("gate", format!("expected verbatim or rectified, got {s:?}"))),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "elementwise" => Ok(Self::Elementwise),
            _ => Err(Error::config("granularity", format!("expected unit or elementwise, got {s:?}"))),
        }
    }
}

/// Hyperparameters of the search phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Target fraction of prunable parameters to remove.
    pub alpha: f64,
    pub n: f64,
    pub p: f64,
    pub gate: GateVariant,
    pub granularity: Granularity,
    /// Adam step size for thresholds and rates.
    pub lr_prune: f64,
    /// SGD step size for masks and weights.
    pub lr_other: f64,
    /// Ascent step size for the multipliers.
    pub lr_dual: f64,
    pub momentum: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n: 10.0,
            p: 500.0,
            gate: GateVariant::Verbatim,
            granularity: Granularity::Unit,
            lr_prune: 0.02,
            lr_other: 5e-4,
            lr_dual: 0.02,
            momentum: 0.9,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        for (name, v) in [
            ("n", self.n),
            ("p", self.p),
            ("lr_prune", self.lr_prune),
            ("lr_other", self.lr_other),
            ("lr_dual", self.lr_dual),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One prunable layer: all heads or all neurons of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub block: usize,
    pub kind: UnitKind,
    pub units: usize,
    /// Prunable parameters `n^l`.
    pub params: usize,
}

impl LayerInfo {
    pub fn unit_params(&self) -> usize {
        self.params / self.units
    }

    /// Largest rate that still keeps one unit.
    pub fn max_rate(&self) -> f64 {
        1.0 - 1.0 / self.units as f64
    }
}

/// Groups `units` by prunable layer. Every layer index below the largest one
/// must own at least one unit.
pub fn layer_info(units: &[PrunableUnit]) -> Result<Vec<LayerInfo>> {
    let count = units.iter().map(|u| u.layer() + 1).max().unwrap_or(0);
    if count == 0 {
        return Err(Error::invalid("prune", "no prunable units"));
    }
    let mut out: Vec<Option<LayerInfo>> = vec![None; count];
    for u in units {
        let e = out[u.layer()].get_or_insert(LayerInfo {
            block: u.block,
            kind: u.kind,
            units: 0,
            params: 0,
        });
        e.units += 1;
        e.params += u.param_count;
    }
    out.into_iter()
        .enumerate()
        .map(|(l, e)| e.ok_or_else(|| Error::invalid("prune", format!("prunable layer {l} has no units"))))
        .collect()
}

/// Number of units kept at rate `r`: `ceil((1 - r) * units)`, at least one.
pub fn kept_count(rate: f64, units: usize) -> usize {
    let k = ((1.0 - rate) * units as f64 - COUNT_SLACK).ceil();
    (k.max(1.0) as usize).min(units)
}

/// Indices of the `k` best scores, ties to the lower index, sorted ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// `R = sum_l r^l n^l / N`.
pub fn weighted_rate(rates: &[f64], params: &[usize]) -> Result<f64> {
    if rates.len() != params.len() {
        return Err(Error::invalid("accumulated_rate", "one rate per layer required"));
    }
    let total: usize = params.iter().sum();
    if total == 0 {
        return Err(Error::invalid("accumulated_rate", "no prunable parameters"));
    }
    let n = total as f64;
    Ok(rates.iter().zip(params).map(|(r, &p)| r * p as f64 / n).sum())
}

/// `beta (alpha - R)^2 + gamma (alpha - R)`.
pub fn lagrangian(alpha: f64, beta: f64, gamma: f64, rate: f64) -> f64 {
    let gap = alpha - rate;
    beta * gap * gap + gamma * gap
}

/// Mutable state of the threshold search, including optimizer moments so a
/// checkpointed search resumes exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub config: PruneConfig,
    pub layers: Vec<LayerInfo>,
    pub theta: Vec<f64>,
    pub rate: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub step: usize,
    prune_opt: Adam,
    mask_opt: Sgd,
    weight_opt: Sgd,
}

/// Per-unit outcome of a gating pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitGate {
    pub unit: PrunableUnit,
    pub score: f64,
    pub kept: bool,
    /// `tanh(n (s - theta))`
    pub gate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub units: Vec<UnitGate>,
}

impl GateDecision {
    /// Kept unit indices per block.
    pub fn keep_lists(&self, depth: usize) -> Vec<BlockKeep> {
        let mut keep = vec![BlockKeep::default(); depth];
        for g in self.units.iter().filter(|g| g.kept) {
            match g.unit.kind {
                UnitKind::AttentionHead => keep[g.unit.block].heads.push(g.unit.index),
                UnitKind::MlpNeuron => keep[g.unit.block].neurons.push(g.unit.index),
            }
        }
        keep
    }
}

/// Smallest largest-possible budget: the fraction removable while every
/// prunable layer keeps one unit.
pub fn max_budget(layers: &[LayerInfo]) -> f64 {
    let rates: Vec<f64> = layers.iter().map(LayerInfo::max_rate).collect();
    let params: Vec<usize> = layers.iter().map(|l| l.params).collect();
    weighted_rate(&rates, &params).unwrap_or(0.0)
}

/// Scores of every unit of `layer`, in unit order.
fn layer_scores(masks: &MaskSet, layer: &LayerInfo) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mv = masks.bind(&mut tape, false);
    let s = score_tape(&mut tape, &mv[layer.block], layer.kind, masks.num_classes)?;
    Ok(tape.value(s).data().to_vec())
}

impl PruneState {
    /// Starts a search: every rate at `alpha`, multipliers at zero and each
    /// threshold halfway between the lowest kept and highest dropped score.
    pub fn init(masks: &MaskSet, units: &[PrunableUnit], config: PruneConfig) -> Result<Self> {
        config.validate()?;
        let layers = layer_info(units)?;
        let budget = max_budget(&layers);
        if config.alpha > budget {
            return Err(Error::DegenerateArchitecture(format!(
                "alpha = {} exceeds {budget:.4}, the most that can be removed while keeping one unit per layer",
                config.alpha
            )));
        }
        let rate: Vec<f64> = layers.iter().map(|l| config.alpha.min(l.max_rate())).collect();
        let mut theta = Vec::with_capacity(layers.len());
        for (l, &r) in layers.iter().zip(&rate) {
            let scores = layer_scores(masks, l)?;
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let k = kept_count(r, l.units);
            theta.push(if k < l.units {
                0.5 * (sorted[k - 1] + sorted[k])
            } else {
                sorted[k - 1] - 0.5
            });
        }
        Ok(Self {
            prune_opt: Adam::new(config.lr_prune),
            mask_opt: Sgd::new(config.lr_other, config.momentum),
            weight_opt: Sgd::new(config.lr_other, config.momentum),
            config,
            layers,
            theta,
            rate,
            beta: 0.0,
            gamma: 0.0,
            step: 0,
        })
    }

    pub fn accumulated_rate(&self) -> f64 {
        let params: Vec<usize> = self.layers.iter().map(|l| l.params).collect();
        weighted_rate(&self.rate, &params).expect("layers validated at init")
    }

    pub fn gap(&self) -> f64 {
        (self.accumulated_rate() - self.config.alpha).abs()
    }

    fn check_units(&self, units: &[PrunableUnit]) -> Result<()> {
        if layer_info(units)? != self.layers {
            return Err(Error::invalid("prune", "unit list does not match the prune state"));
        }
        Ok(())
    }
}

/// `R` over the rate handles.
pub fn accumulated_rate_tape(tape: &mut Tape, rates: &[Var], layers: &[LayerInfo]) -> Result<Var> {
    let total: usize = layers.iter().map(|l| l.params).sum();
    if total == 0 || rates.len() != layers.len() {
        return Err(Error::invalid("accumulated_rate", "rates and layers disagree or N = 0"));
    }
    let mut acc: Option<Var> = None;
    for (&r, l) in rates.iter().zip(layers) {
        let term = tape.scale(r, l.params as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one layer"))
}

pub fn lagrangian_tape(tape: &mut Tape, alpha: f64, beta: Var, gamma: Var, rate: Var) -> Result<Var> {
    let neg = tape.scale(rate, -1.0)?;
    let gap = tape.add_scalar(neg, alpha)?;
    let sq = tape.square(gap)?;
    let quad = tape.mul(beta, sq)?;
    let lin = tape.mul(gamma, gap)?;
    tape.add(quad, lin)
}

/// Unit scores of one prunable layer as a `(units,)` handle: the mean over
/// every entry the unit owns.
fn score_tape(tape: &mut Tape, m: &BlockMaskVars, kind: UnitKind, classes: usize) -> Result<Var> {
    match kind {
        UnitKind::AttentionHead => {
            let dh = tape.shape(m.head)[2];
            let s = tape.sum_keep(m.head, 1)?;
            tape.scale(s, 1.0 / (classes * dh) as f64)
        }
        UnitKind::MlpNeuron => {
            let d = tape.shape(m.fc1)[2];
            let a = tape.sum_keep(m.fc1, 1)?;
            let b = tape.sum_keep(m.fc2, 2)?;
            let s = tape.add(a, b)?;
            tape.scale(s, 1.0 / (2 * classes * d) as f64)
        }
    }
}

fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    let a = tape.abs(x)?;
    let s = tape.add(x, a)?;
    tape.scale(s, 0.5)
}

/// Gates one mask tensor whose unit axis broadcasts as `unit_shape`.
#[allow(clippy::too_many_arguments)]
fn gate_tensor(
    tape: &mut Tape,
    mask: Var,
    unit_gate: Var,
    theta: Var,
    kept: &[bool],
    unit_shape: &[usize],
    config: &PruneConfig,
) -> Result<Var> {
    let keep = tape.constant(Tensor::from_fn(unit_shape, |i| f64::from(u8::from(kept[i]))));
    let drop = tape.constant(Tensor::from_fn(unit_shape, |i| f64::from(u8::from(!kept[i]))));
    let t = match config.granularity {
        Granularity::Unit => tape.reshape(unit_gate, unit_shape)?,
        Granularity::Elementwise => {
            let u = tape.sub(mask, theta)?;
            let u = tape.scale(u, config.n)?;
            tape.tanh(u)?
        }
    };
    let kept_part = tape.mul(t, keep)?;
    let kept_part = tape.mul(mask, kept_part)?;
    let mut dropped = tape.scale(t, config.p)?;
    if config.gate == GateVariant::Rectified {
        dropped = relu(tape, dropped)?;
    }
    let dropped = tape.mul(dropped, drop)?;
    tape.add(kept_part, dropped)
}

/// Records the gated masks on `tape`. Returns the gated handles and the
/// gating decision (scores and gates as values).
pub fn soft_prune_tape(
    tape: &mut Tape,
    masks: &[BlockMaskVars],
    theta: &[Var],
    state: &PruneState,
    units: &[PrunableUnit],
) -> Result<(Vec<BlockMaskVars>, GateDecision)> {
    state.check_units(units)?;
    let classes = tape.shape(masks[0].head)[0];
    let cfg = &state.config;
    let mut gated = masks.to_vec();
    let mut decision = Vec::with_capacity(units.len());
    for (l, info) in state.layers.iter().enumerate() {
        let m = masks[info.block];
        let s = score_tape(tape, &m, info.kind, classes)?;
        let scores = tape.value(s).data().to_vec();
        let kept_idx = top_k(&scores, kept_count(state.rate[l], info.units));
        let mut kept = vec![false; info.units];
        kept_idx.iter().for_each(|&i| kept[i] = true);
        let u = tape.sub(s, theta[l])?;
        let u = tape.scale(u, cfg.n)?;
        let g = tape.tanh(u)?;
        let gates = tape.value(g).data().to_vec();
        for i in 0..info.units {
            decision.push(UnitGate {
                unit: PrunableUnit {
                    block: info.block,
                    kind: info.kind,
                    index: i,
                    param_count: info.unit_params(),
                },
                score: scores[i],
                kept: kept[i],
                gate: gates[i],
            });
        }
        let n = info.units;
        let out = &mut gated[info.block];
        match info.kind {
            UnitKind::AttentionHead => {
                out.head = gate_tensor(tape, m.head, g, theta[l], &kept, &[1, n, 1], cfg)?;
            }
            UnitKind::MlpNeuron => {
                out.fc1 = gate_tensor(tape, m.fc1, g, theta[l], &kept, &[1, n, 1], cfg)?;
                out.fc2 = gate_tensor(tape, m.fc2, g, theta[l], &kept, &[1, 1, n], cfg)?;
            }
        }
    }
    Ok((gated, GateDecision { units: decision }))
}

fn theta_vars(tape: &mut Tape, state: &PruneState, requires_grad: bool) -> Vec<Var> {
    state
        .theta
        .iter()
        .map(|&t| tape.leaf(Tensor::scalar(t), requires_grad))
        .collect()
}

/// Gated masks `M_hat` as values.
pub fn soft_prune(masks: &MaskSet, state: &PruneState, units: &[PrunableUnit]) -> Result<(MaskSet, GateDecision)> {
    let mut tape = Tape::new();
    let mv = masks.bind(&mut tape, false);
    let th = theta_vars(&mut tape, state, false);
    let (gated, decision) = soft_prune_tape(&mut tape, &mv, &th, state, units)?;
    let mut out = masks.clone();
    for (dst, src) in out.tensors_mut().into_iter().zip(mask_vars_flat(&gated)) {
        *dst = tape.value(src).clone();
    }
    Ok((out, decision))
}

/// Metrics of one search step. `rate` is `R` after the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub penalty: f64,
    pub rate: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Records `CE(masked forward with gated masks) + L_R`.
struct SearchGraph {
    loss: Var,
    ce: Var,
    penalty: Var,
    weights: Vec<Var>,
    masks: Vec<Var>,
    theta: Vec<Var>,
    rates: Vec<Var>,
    beta: Var,
    gamma: Var,
}

fn search_graph(
    tape: &mut Tape,
    model: &Model,
    masks: &MaskSet,
    state: &PruneState,
    units: &[PrunableUnit],
    images: &Tensor,
    labels: &[usize],
) -> Result<SearchGraph> {
    let step = state.step;
    let nonfinite = |term| move |e: Error| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, step },
        other => other,
    };
    let vars = model.bind(tape, true);
    let mv = masks.bind(tape, true);
    let theta = theta_vars(tape, state, true);
    let rates: Vec<Var> = state.rate.iter().map(|&r| tape.param(Tensor::scalar(r))).collect();
    let beta = tape.param(Tensor::scalar(state.beta));
    let gamma = tape.param(Tensor::scalar(state.gamma));
    let (gated, _) = soft_prune_tape(tape, &mv, &theta, state, units).map_err(nonfinite("gate"))?;
    let ctx = MaskContext {
        blocks: &gated,
        class_select: labels,
    };
    let ce = model
        .forward_tape(tape, &vars, images, Some(&ctx))
        .and_then(|logits| tape.cross_entropy(logits, labels))
        .map_err(nonfinite("ce"))?;
    let r = accumulated_rate_tape(tape, &rates, &state.layers)?;
    let penalty = lagrangian_tape(tape, state.config.alpha, beta, gamma, r).map_err(nonfinite("budget"))?;
    let loss = tape.add(ce, penalty).map_err(nonfinite("total"))?;
    Ok(SearchGraph {
        loss,
        ce,
        penalty,
        weights: vars.all(),
        masks: mask_vars_flat(&mv),
        theta,
        rates,
        beta,
        gamma,
    })
}

/// Loss the next search step would see, without updating anything.
pub fn search_loss(
    model: &Model,
    masks: &MaskSet,
    state: &PruneState,
    units: &[PrunableUnit],
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let g = search_graph(&mut tape, model, masks, state, units, images, labels)?;
    Ok(tape.value(g.loss).item())
}

/// One joint step: descend thresholds and rates (Adam), masks and weights
/// (SGD with momentum) on `CE + L_R`; ascend the multipliers on `L_R`.
pub fn threshold_search_step(
    model: &mut Model,
    masks: &mut MaskSet,
    state: &mut PruneState,
    units: &[PrunableUnit],
    images: &Tensor,
    labels: &[usize],
) -> Result<SearchMetrics> {
    masks.check_matches(model)?;
    let mut tape = Tape::new();
    let g = search_graph(&mut tape, model, masks, state, units, images, labels)?;
    let value = |v: Var| tape.value(v).item();
    let (loss, ce, penalty) = (value(g.loss), value(g.ce), value(g.penalty));
    for (term, v) in [("ce", ce), ("budget", penalty), ("total", loss)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, step: state.step });
        }
    }
    tape.backward(g.loss)?;
    let grads = |vs: &[Var]| -> Vec<Option<Tensor>> { vs.iter().map(|&v| tape.grad(v)).collect() };

    let mut tr: Vec<Tensor> = state.theta.iter().chain(&state.rate).map(|&v| Tensor::scalar(v)).collect();
    let tr_grads = grads(&[g.theta.as_slice(), g.rates.as_slice()].concat());
    state.prune_opt.step(&mut tr.iter_mut().collect::<Vec<_>>(), &tr_grads);
    let nl = state.layers.len();
    for l in 0..nl {
        state.theta[l] = tr[l].item();
        state.rate[l] = tr[nl + l].item().clamp(0.0, state.layers[l].max_rate());
    }
    state.mask_opt.step(&mut masks.tensors_mut(), &grads(&g.masks));
    model.frozen = false;
    state.weight_opt.step(&mut model.params_mut(), &grads(&g.weights));

    let lr = state.config.lr_dual;
    let gb = tape.grad(g.beta).map_or(0.0, |t| t.item());
    let gg = tape.grad(g.gamma).map_or(0.0, |t| t.item());
    state.beta = (state.beta + lr * gb).max(0.0);
    state.gamma += lr * gg;
    state.step += 1;
    Ok(SearchMetrics {
        step: state.step,
        loss,
        ce,
        penalty,
        rate: state.accumulated_rate(),
        beta: state.beta,
        gamma: state.gamma,
    })
}

/// Result of a full search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub converged: bool,
    pub epochs: usize,
    pub history: Vec<SearchMetrics>,
}

/// Runs search epochs over `data` until `|R - alpha| <= tolerance` at the end
/// of an epoch or `max_epochs` is reached.
#[allow(clippy::too_many_arguments)]
pub fn threshold_search(
    model: &mut Model,
    masks: &mut MaskSet,
    state: &mut PruneState,
    units: &[PrunableUnit],
    data: &Dataset,
    batch_size: usize,
    max_epochs: usize,
    tolerance: f64,
    seed: u64,
) -> Result<SearchOutcome> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut rng = rng::stream(seed, Stream::Shuffle);
    let mut history = Vec::new();
    for epoch in 1..=max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(&mut rng, &mut order);
        for chunk in order.chunks(batch_size) {
            let (x, y) = data.batch(chunk)?;
            let m = threshold_search_step(model, masks, state, units, &x, &y)?;
            debug!("search step {}: loss {:.5} R {:.4}", m.step, m.loss, m.rate);
            history.push(m);
        }
        let gap = state.gap();
        info!("search epoch {epoch}: R = {:.4}, |R - alpha| = {gap:.4}", state.accumulated_rate());
        if gap <= tolerance {
            return Ok(SearchOutcome {
                converged: true,
                epochs: epoch,
                history,
            });
        }
    }
    Ok(SearchOutcome {
        converged: false,
        epochs: max_epochs,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindPair {
    pub heads: f64,
    pub neurons: f64,
}

/// Per-block line of the fold report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFold {
    pub layer: usize,
    pub rate: KindPair,
    pub threshold: KindPair,
    pub kept_heads: Vec<usize>,
    pub kept_neurons: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub alpha: f64,
    /// `sum_l r^l n^l / N` at fold time.
    pub target_rate: f64,
    /// Fraction of prunable parameters actually removed.
    pub achieved_rate: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_ratio: f64,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerFold>,
}

fn class_mean(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[0];
    let inner = t.numel() / c;
    let mut out = vec![0.0; inner];
    for chunk in t.data().chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

fn hadamard(w: &mut Tensor, m: &[f64]) {
    w.data_mut().iter_mut().zip(m).for_each(|(a, b)| *a *= b);
}

/// Removes the dropped units and folds the class-averaged gated masks into
/// the surviving weights. The result is an ordinary unmasked model.
pub fn hard_prune(
    model: &Model,
    masks: &MaskSet,
    state: &PruneState,
    units: &[PrunableUnit],
) -> Result<(Model, FoldReport)> {
    masks.check_matches(model)?;
    let (gated, decision) = soft_prune(masks, state, units)?;
    let mut folded = model.clone();
    let dh = model.config.head_dim();
    for (blk, m) in folded.blocks.iter_mut().zip(&gated.blocks) {
        // Scaling a head's value rows scales its output because attention
        // rows sum to one.
        let head = class_mean(&m.head);
        for (row, &s) in head.iter().enumerate() {
            debug_assert!(row < blk.heads * dh);
            let d = blk.wv.shape()[1];
            blk.wv.data_mut()[row * d..(row + 1) * d].iter_mut().for_each(|v| *v *= s);
            blk.bv.data_mut()[row] *= s;
        }
        hadamard(&mut blk.wo, &class_mean(&m.out_proj));
        hadamard(&mut blk.w1, &class_mean(&m.fc1));
        hadamard(&mut blk.w2, &class_mean(&m.fc2));
    }
    let keep = decision.keep_lists(model.blocks.len());
    let mut pruned = folded.apply_structural_prune(&keep)?;
    pruned.frozen = false;

    let c = &model.config;
    let input = [c.channels, c.image_size, c.image_size];
    let before = meter::count_flops(model, input)?;
    let after = meter::count_flops(&pruned, input)?;
    let arch_before = Architecture::of(model);
    let arch_after = Architecture::of(&pruned);
    let block_params = |a: &Architecture, b: usize| -> usize {
        let lp = a.layer_params();
        lp[2 * b] + lp[2 * b + 1]
    };
    let fixed = {
        let d = c.embed_dim;
        6 * d
    };
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (b, k) in keep.iter().enumerate() {
        let pick = |kind: UnitKind, v: &[f64]| -> f64 {
            let l = state
                .layers
                .iter()
                .position(|i| i.block == b && i.kind == kind)
                .expect("every block has both layers");
            v[l]
        };
        layers.push(LayerFold {
            layer: b,
            rate: KindPair {
                heads: pick(UnitKind::AttentionHead, &state.rate),
                neurons: pick(UnitKind::MlpNeuron, &state.rate),
            },
            threshold: KindPair {
                heads: pick(UnitKind::AttentionHead, &state.theta),
                neurons: pick(UnitKind::MlpNeuron, &state.theta),
            },
            kept_heads: k.heads.clone(),
            kept_neurons: k.neurons.clone(),
            params_before: block_params(&arch_before, b) + fixed,
            params_after: block_params(&arch_after, b) + fixed,
            flops_before: before.flops_per_block[b].total(),
            flops_after: after.flops_per_block[b].total(),
        });
    }
    let removed = before.prunable_params - after.prunable_params;
    let report = FoldReport {
        alpha: state.config.alpha,
        target_rate: state.accumulated_rate(),
        achieved_rate: removed as f64 / before.prunable_params as f64,
        params_before: before.total_params,
        params_after: after.total_params,
        flops_before: before.flops_total,
        flops_after: after.flops_total,
        flops_ratio: meter::remaining_ratio(&after, &before)?,
        input_shape: input,
        layers,
    };
    Ok((pruned, report))
}
