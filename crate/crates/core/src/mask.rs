//! Class-conditional explainability masks.
//!
//! Every block carries four masks, all with the class axis first:
//!
//! | mask       | shape                    | gates                               |
//! |------------|--------------------------|-------------------------------------|
//! | `head`     | `(C, heads, head_dim)`   | each head's output slice            |
//! | `out_proj` | `(C, d, heads*head_dim)` | attention output projection weights |
//! | `fc1`      | `(C, hidden, d)`         | first MLP matrix                    |
//! | `fc2`      | `(C, d, hidden)`         | second MLP matrix                   |
//!
//! During the forward pass sample `i` uses class slice `class_select[i]`.
//! Linear masks multiply the weight matrix elementwise before the product.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BlockMaskVars, MaskContext, Model, PrunableUnit, UnitKind};
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub head: Tensor,
    pub out_proj: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

impl BlockMask {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.head, &self.out_proj, &self.fc1, &self.fc2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.head, &mut self.out_proj, &mut self.fc1, &mut self.fc2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub num_classes: usize,
    pub blocks: Vec<BlockMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLossWeights {
    pub smooth: f64,
    pub sparse: f64,
}

impl Default for MaskLossWeights {
    fn default() -> Self {
        Self {
            smooth: 1e-3,
            sparse: 1e-3,
        }
    }
}

impl MaskLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth >= 0.0) {
            return Err(Error::config("lambda_smooth", "must be >= 0"));
        }
        if !(self.sparse >= 0.0) {
            return Err(Error::config("lambda_sparse", "must be >= 0"));
        }
        Ok(())
    }
}

/// Loss components of one mask-training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskLossParts {
    pub total: f64,
    pub ce: f64,
    pub smooth: f64,
    pub sparse: f64,
}

impl MaskSet {
    /// All-ones masks shaped for `model`.
    pub fn ones_for(model: &Model) -> Self {
        Self::filled(model, 1.0)
    }

    pub fn filled(model: &Model, value: f64) -> Self {
        let c = model.config.num_classes;
        let d = model.config.embed_dim;
        let dh = model.config.head_dim();
        let blocks = model
            .blocks
            .iter()
            .map(|b| BlockMask {
                head: Tensor::full(&[c, b.heads, dh], value),
                out_proj: Tensor::full(&[c, d, b.heads * dh], value),
                fc1: Tensor::full(&[c, b.hidden, d], value),
                fc2: Tensor::full(&[c, d, b.hidden], value),
            })
            .collect();
        Self {
            num_classes: c,
            blocks,
        }
    }

    pub fn num_entries(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    pub fn check_matches(&self, model: &Model) -> Result<()> {
        let expect = MaskSet::filled(model, 0.0);
        let ok = self.num_classes == expect.num_classes
            && self.blocks.len() == expect.blocks.len()
            && self
                .tensors()
                .iter()
                .zip(expect.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("masks", "mask shapes do not match the model"))
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<BlockMaskVars> {
        self.blocks
            .iter()
            .map(|b| BlockMaskVars {
                head: tape.leaf(b.head.clone(), requires_grad),
                out_proj: tape.leaf(b.out_proj.clone(), requires_grad),
                fc1: tape.leaf(b.fc1.clone(), requires_grad),
                fc2: tape.leaf(b.fc2.clone(), requires_grad),
            })
            .collect()
    }
}

pub(crate) fn mask_vars_flat(v: &[BlockMaskVars]) -> Vec<Var> {
    v.iter().flat_map(|b| [b.head, b.out_proj, b.fc1, b.fc2]).collect()
}

/// All-ones masks for `model`, which is frozen from here on.
pub fn init_masks(model: &mut Model) -> MaskSet {
    model.frozen = true;
    MaskSet::ones_for(model)
}

/// Logits with per-sample class-conditional masks.
pub fn masked_forward(model: &Model, masks: &MaskSet, images: &Tensor, class_select: &[usize]) -> Result<Tensor> {
    masks.check_matches(model)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mv = masks.bind(&mut tape, false);
    let ctx = MaskContext {
        blocks: &mv,
        class_select,
    };
    let y = model.forward_tape(&mut tape, &vars, images, Some(&ctx))?;
    Ok(tape.value(y).clone())
}

/// `sum_l sum_c |D2 M^l[c]|_1` with `D2` the replicate-padded second
/// difference along the class axis.
pub fn smoothness_loss_tape(tape: &mut Tape, blocks: &[BlockMaskVars]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for v in mask_vars_flat(blocks) {
        let d2 = tape.second_diff(v, 0)?;
        let a = tape.abs(d2)?;
        let s = tape.sum(a)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `sum_c || concat(tensors)[c] ||_2` for tensors sharing a leading class axis.
pub fn group_l2_tape(tape: &mut Tape, tensors: &[Var]) -> Result<Var> {
    let mut sq: Option<Var> = None;
    for &t in tensors {
        let s = tape.square(t)?;
        let s = tape.sum_keep(s, 0)?;
        sq = Some(match sq {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let sq = sq.ok_or_else(|| Error::invalid("group_l2", "no tensors"))?;
    let norms = tape.sqrt(sq)?;
    tape.sum(norms)
}

/// `sum_l sum_c ||M^l[c]||_2`, where `M^l[c]` gathers every mask entry of
/// block `l` for class `c`.
pub fn sparsity_loss_tape(tape: &mut Tape, blocks: &[BlockMaskVars]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for b in blocks {
        let s = group_l2_tape(tape, &[b.head, b.out_proj, b.fc1, b.fc2])?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

pub fn smoothness_loss(masks: &MaskSet) -> Result<f64> {
    if masks.num_classes < 2 {
        warn!("smoothness loss needs at least two classes; returning 0");
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let v = masks.bind(&mut tape, false);
    let l = smoothness_loss_tape(&mut tape, &v)?;
    Ok(tape.value(l).item())
}

pub fn sparsity_loss(masks: &MaskSet) -> Result<f64> {
    let mut tape = Tape::new();
    let v = masks.bind(&mut tape, false);
    let l = sparsity_loss_tape(&mut tape, &v)?;
    Ok(tape.value(l).item())
}

/// Records `CE + lambda_sm * L_smooth + lambda_sp * L_sparse` on `tape`.
pub fn mask_loss_tape(
    tape: &mut Tape,
    model: &Model,
    mask_vars: &[BlockMaskVars],
    images: &Tensor,
    labels: &[usize],
    weights: MaskLossWeights,
) -> Result<(Var, MaskLossParts)> {
    let vars = model.bind(tape, false);
    let ctx = MaskContext {
        blocks: mask_vars,
        class_select: labels,
    };
    let logits = model.forward_tape(tape, &vars, images, Some(&ctx))?;
    let ce = tape.cross_entropy(logits, labels)?;
    let sm = if model.config.num_classes < 2 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        smoothness_loss_tape(tape, mask_vars)?
    };
    let sp = sparsity_loss_tape(tape, mask_vars)?;
    let sm_w = tape.scale(sm, weights.smooth)?;
    let sp_w = tape.scale(sp, weights.sparse)?;
    let total = tape.add(ce, sm_w)?;
    let total = tape.add(total, sp_w)?;
    let parts = MaskLossParts {
        total: tape.value(total).item(),
        ce: tape.value(ce).item(),
        smooth: tape.value(sm).item(),
        sparse: tape.value(sp).item(),
    };
    Ok((total, parts))
}

/// One SGD-with-momentum update of the masks on a labelled batch. The
/// model must be frozen and is never modified.
pub fn mask_training_step(
    model: &Model,
    masks: &mut MaskSet,
    opt: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    weights: MaskLossWeights,
) -> Result<MaskLossParts> {
    if !model.frozen {
        return Err(Error::WeightsNotFrozen);
    }
    masks.check_matches(model)?;
    let mut tape = Tape::new();
    let mv = masks.bind(&mut tape, true);
    let (loss, parts) = mask_loss_tape(&mut tape, model, &mv, images, labels, weights)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = mask_vars_flat(&mv).into_iter().map(|v| tape.grad(v)).collect();
    opt.step(&mut masks.tensors_mut(), &grads);
    Ok(parts)
}

/// Mean of the unit's entries within each class slice, `C` values.
pub fn unit_class_means(masks: &MaskSet, unit: &PrunableUnit) -> Result<Vec<f64>> {
    (0..masks.num_classes)
        .map(|c| unit_entries(masks, unit, c..c + 1).map(|(s, n)| s / n as f64))
        .collect()
}

fn unit_entries(masks: &MaskSet, unit: &PrunableUnit, classes: std::ops::Range<usize>) -> Result<(f64, usize)> {
    let bad = || Error::invalid("unit_score", format!("unknown unit {unit:?}"));
    let b = masks.blocks.get(unit.block).ok_or_else(bad)?;
    match unit.kind {
        UnitKind::AttentionHead => {
            let (c, h, dh) = (b.head.shape()[0], b.head.shape()[1], b.head.shape()[2]);
            if unit.index >= h {
                return Err(bad());
            }
            let mut s = 0.0;
            for ci in classes.clone() {
                let base = (ci * h + unit.index) * dh;
                s += b.head.data()[base..base + dh].iter().sum::<f64>();
            }
            Ok((s, classes.len().min(c) * dh))
        }
        UnitKind::MlpNeuron => {
            let (c, hidden, d) = (b.fc1.shape()[0], b.fc1.shape()[1], b.fc1.shape()[2]);
            if unit.index >= hidden {
                return Err(bad());
            }
            let mut s = 0.0;
            for ci in classes.clone() {
                let row = (ci * hidden + unit.index) * d;
                s += b.fc1.data()[row..row + d].iter().sum::<f64>();
                for r in 0..d {
                    s += b.fc2.data()[(ci * d + r) * hidden + unit.index];
                }
            }
            Ok((s, 2 * classes.len().min(c) * d))
        }
    }
}

/// Mean of every mask entry that belongs to `unit`, over all classes.
///
/// A head owns its slice of the head mask; a neuron owns its row of the
/// `fc1` mask and its column of the `fc2` mask.
pub fn unit_score(masks: &MaskSet, unit: &PrunableUnit) -> Result<f64> {
    let (sum, n) = unit_entries(masks, unit, 0..masks.num_classes)?;
    Ok(sum / n as f64)
}
