//! Parameter and FLOP accounting.
//!
//! FLOPs follow the convention of the common ViT tables: one multiply-
//! accumulate counts as one operation, softmax and layer norm cost five
//! operations per element. Counts depend on the architecture only, never on
//! weight values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const NORM_OPS_PER_ELEMENT: u64 = 5;
const SOFTMAX_OPS_PER_ELEMENT: u64 = 5;

/// Shape of a (possibly pruned) model: heads and MLP width per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub blocks: Vec<BlockShape>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub heads: usize,
    pub hidden: usize,
}

impl Architecture {
    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            blocks: vec![
                BlockShape {
                    heads: config.heads,
                    hidden: config.mlp_hidden(),
                };
                config.depth
            ],
        }
    }

    pub fn of(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockShape {
                    heads: b.heads,
                    hidden: b.hidden,
                })
                .collect(),
        }
    }

    fn head_params(&self) -> usize {
        let (d, dh) = (self.config.embed_dim, self.config.head_dim());
        3 * (dh * d + dh) + d * dh
    }

    fn neuron_params(&self) -> usize {
        2 * self.config.embed_dim + 1
    }

    /// Prunable parameters per prunable layer: heads of block `l` at index
    /// `2l`, neurons at `2l + 1`.
    pub fn layer_params(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| [b.heads * self.head_params(), b.hidden * self.neuron_params()])
            .collect()
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let d = c.embed_dim;
        let embed = d * c.patch_dim() + d + d + c.num_tokens() * d;
        let fixed_per_block = 4 * d + d + d; // two norms, output bias, second MLP bias
        let blocks: usize = self.layer_params().iter().sum::<usize>() + fixed_per_block * self.blocks.len();
        embed + blocks + 2 * d + c.num_classes * d + c.num_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total_params: usize,
    pub prunable_params: usize,
    pub layer_params: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub attention: u64,
    pub mlp: u64,
    pub norm: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp + self.norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub total_params: usize,
    pub prunable_params: usize,
    pub layer_params: Vec<usize>,
    /// `(channels, height, width)` the FLOPs were computed for.
    pub input_shape: [usize; 3],
    pub flops_total: u64,
    pub flops_embed: u64,
    pub flops_per_block: Vec<BlockFlops>,
    pub flops_head: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining_ratio: Option<f64>,
}

impl ResourceReport {
    pub fn against(mut self, baseline: &ResourceReport) -> Result<Self> {
        self.remaining_ratio = Some(remaining_ratio(&self, baseline)?);
        Ok(self)
    }
}

/// Exact parameter counts by enumerating the model's tensors.
pub fn count_params(model: &Model) -> ParamCount {
    let layer_params: Vec<usize> = model
        .blocks
        .iter()
        .flat_map(|b| {
            let heads = b.wq.numel() + b.bq.numel() + b.wk.numel() + b.bk.numel() + b.wv.numel() + b.bv.numel()
                + b.wo.numel();
            let neurons = b.w1.numel() + b.b1.numel() + b.w2.numel();
            [heads, neurons]
        })
        .collect();
    ParamCount {
        total_params: model.num_params(),
        prunable_params: layer_params.iter().sum(),
        layer_params,
    }
}

pub fn count_flops(model: &Model, input_shape: [usize; 3]) -> Result<ResourceReport> {
    arch_flops(&Architecture::of(model), input_shape)
}

/// Analytic FLOP and parameter report for an architecture.
pub fn arch_flops(arch: &Architecture, input_shape: [usize; 3]) -> Result<ResourceReport> {
    let c = &arch.config;
    let [ch, h, w] = input_shape;
    if ch != c.channels || h % c.patch_size != 0 || w % c.patch_size != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "count_flops",
            format!("input {input_shape:?} incompatible with {} channels, patch {}", c.channels, c.patch_size),
        ));
    }
    let patches = ((h / c.patch_size) * (w / c.patch_size)) as u64;
    let t = patches + 1;
    let d = c.embed_dim as u64;
    let dh = c.head_dim() as u64;
    let flops_embed = patches * c.patch_dim() as u64 * d;
    let flops_per_block: Vec<BlockFlops> = arch
        .blocks
        .iter()
        .map(|b| {
            let (heads, hidden) = (b.heads as u64, b.hidden as u64);
            let inner = heads * dh;
            let qkv = 3 * t * d * inner;
            let scores = heads * t * t * dh;
            let softmax = SOFTMAX_OPS_PER_ELEMENT * heads * t * t;
            let mix = heads * t * t * dh;
            let proj = t * inner * d;
            BlockFlops {
                attention: qkv + scores + softmax + mix + proj,
                mlp: 2 * t * d * hidden,
                norm: 2 * NORM_OPS_PER_ELEMENT * t * d,
            }
        })
        .collect();
    let flops_head = NORM_OPS_PER_ELEMENT * t * d + d * c.num_classes as u64;
    let flops_total = flops_embed + flops_per_block.iter().map(BlockFlops::total).sum::<u64>() + flops_head;
    let layer_params = arch.layer_params();
    Ok(ResourceReport {
        total_params: arch.param_count(),
        prunable_params: layer_params.iter().sum(),
        layer_params,
        input_shape,
        flops_total,
        flops_embed,
        flops_per_block,
        flops_head,
        remaining_ratio: None,
    })
}

/// `flops(pruned) / flops(baseline)`.
pub fn remaining_ratio(pruned: &ResourceReport, baseline: &ResourceReport) -> Result<f64> {
    if baseline.flops_total == 0 {
        return Err(Error::invalid("remaining_ratio", "baseline has zero FLOPs"));
    }
    Ok(pruned.flops_total as f64 / baseline.flops_total as f64)
}
