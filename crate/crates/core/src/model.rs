//! Tiny DeiT-style vision transformer with a registry of prunable units.
//!
//! Blocks are pre-norm: `x + Proj(MHA(LN(x)))` then `x + W2 gelu(W1 LN(x))`.
//! Each block may have its own head count and MLP width once pruned; the
//! per-head width stays `embed_dim / heads` of the original config.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 3,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("{} does not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// DeiT-Tiny at 224x224, ImageNet head.
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 1000,
            seed: 0,
        }
    }

    /// DeiT-Small at 224x224, ImageNet head.
    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            heads: 6,
            ..Self::deit_tiny()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub heads: usize,
    pub hidden: usize,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Set while masks are trained; weights must not change.
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    AttentionHead,
    MlpNeuron,
}

impl UnitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitKind::AttentionHead => "attention-head",
            UnitKind::MlpNeuron => "mlp-neuron",
        }
    }
}

/// One removable structure: an attention head or an MLP hidden neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunableUnit {
    pub block: usize,
    pub kind: UnitKind,
    pub index: usize,
    /// Parameters removed with this unit, biases included.
    pub param_count: usize,
}

impl PrunableUnit {
    /// Index of the prunable layer this unit belongs to. Every block has two
    /// prunable layers: its attention heads (`2 * block`) and its MLP neurons
    /// (`2 * block + 1`).
    pub fn layer(&self) -> usize {
        prunable_layer(self.block, self.kind)
    }
}

pub fn prunable_layer(block: usize, kind: UnitKind) -> usize {
    2 * block + usize::from(kind == UnitKind::MlpNeuron)
}

/// Surviving unit indices of one block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockKeep {
    pub heads: Vec<usize>,
    pub neurons: Vec<usize>,
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    patch_w: Var,
    patch_b: Var,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<[Var; 16]>,
    norm_g: Var,
    norm_b: Var,
    head_w: Var,
    head_b: Var,
}

impl ModelVars {
    /// Handles in the same order as [`Model::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls_token, self.pos_embed];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.extend([self.norm_g, self.norm_b, self.head_w, self.head_b]);
        v
    }
}

/// Class-conditional mask handles for one block, class axis first.
#[derive(Clone, Copy, Debug)]
pub struct BlockMaskVars {
    /// `(C, heads, head_dim)`
    pub head: Var,
    /// `(C, embed_dim, heads * head_dim)`
    pub out_proj: Var,
    /// `(C, hidden, embed_dim)`
    pub fc1: Var,
    /// `(C, embed_dim, hidden)`
    pub fc2: Var,
}

/// Masks plus the class slice each sample selects.
#[derive(Clone, Copy, Debug)]
pub struct MaskContext<'a> {
    pub blocks: &'a [BlockMaskVars],
    pub class_select: &'a [usize],
}

// Block tensor slots.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// Builds a freshly initialized model. Weights are drawn from a truncated
/// normal (std 0.02) on the `Init` stream of `config.seed`; biases start at
/// zero and layer-norm gains at one.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, Stream::Init);
    let mut w = |shape: &[usize]| Tensor::from_fn(shape, |_| rng::trunc_normal(&mut rng, INIT_STD));
    let d = config.embed_dim;
    let hd = config.heads * config.head_dim();
    let hidden = config.mlp_hidden();
    let patch_w = w(&[d, config.patch_dim()]);
    let cls_token = w(&[1, 1, d]);
    let pos_embed = w(&[1, config.num_tokens(), d]);
    let mut blocks = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        blocks.push(Block {
            heads: config.heads,
            hidden,
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: w(&[hd, d]),
            bq: Tensor::zeros(&[hd]),
            wk: w(&[hd, d]),
            bk: Tensor::zeros(&[hd]),
            wv: w(&[hd, d]),
            bv: Tensor::zeros(&[hd]),
            wo: w(&[d, hd]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: w(&[hidden, d]),
            b1: Tensor::zeros(&[hidden]),
            w2: w(&[d, hidden]),
            b2: Tensor::zeros(&[d]),
        });
    }
    let head_w = w(&[config.num_classes, d]);
    Ok(Model {
        config: config.clone(),
        patch_w,
        patch_b: Tensor::zeros(&[d]),
        cls_token,
        pos_embed,
        blocks,
        norm_g: Tensor::ones(&[d]),
        norm_b: Tensor::zeros(&[d]),
        head_w,
        head_b: Tensor::zeros(&[config.num_classes]),
        frozen: false,
    })
}

/// Splits `(B, C, S, S)` images into `(B, patches, patch*patch*C)` rows,
/// patches in raster order, each flattened channel-last.
pub fn patchify(config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    let (c, size, p) = (config.channels, config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != size || s[3] != size {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![0, c, size, size],
        });
    }
    let b = s[0];
    let grid = size / p;
    let pd = config.patch_dim();
    let data = images.data();
    let mut out = vec![0.0; b * grid * grid * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (bi * grid * grid + gy * grid + gx) * pd;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            let src = ((bi * c + ch) * size + gy * p + y) * size + gx * p + x;
                            out[row + (y * p + x) * c + ch] = data[src];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

/// `x W^T + b`, where the weight is optionally masked per sample:
/// `(M[y_i] ⊙ W)` for sample `i`.
fn linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    mask: Option<(Var, &[usize])>,
) -> Result<Var> {
    let y = match mask {
        None => {
            let wt = tape.transpose(w)?;
            tape.matmul(x, wt)?
        }
        Some((m, classes)) => {
            let per_sample = tape.gather(m, classes)?;
            let wm = tape.mul(per_sample, w)?;
            let wt = tape.transpose(wm)?;
            tape.matmul(x, wt)?
        }
    };
    tape.add(y, b)
}

impl Model {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.norm_g, &self.norm_b, &self.head_w, &self.head_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.norm_g,
            &mut self.norm_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        ModelVars {
            patch_w: leaf(&self.patch_w),
            patch_b: leaf(&self.patch_b),
            cls_token: leaf(&self.cls_token),
            pos_embed: leaf(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.tensors().map(&mut leaf))
                .collect(),
            norm_g: leaf(&self.norm_g),
            norm_b: leaf(&self.norm_b),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }

    /// Token embeddings `(B, tokens, d)` including class token and positions.
    fn embed(&self, tape: &mut Tape, vars: &ModelVars, images: &Tensor) -> Result<Var> {
        let patches = patchify(&self.config, images)?;
        let batch = patches.shape()[0];
        let x = tape.constant(patches);
        let e = linear(tape, x, vars.patch_w, vars.patch_b, None)?;
        let zeros = tape.constant(Tensor::zeros(&[batch, 1, self.config.embed_dim]));
        let cls = tape.add(zeros, vars.cls_token)?;
        let tokens = tape.concat(cls, e, 1)?;
        tape.add(tokens, vars.pos_embed)
    }

    /// Per-head attention outputs `(B, heads, tokens, head_dim)` of block
    /// `layer` applied to already-normalized tokens `x`.
    pub fn attention_heads(&self, tape: &mut Tape, vars: &ModelVars, layer: usize, x: Var) -> Result<Var> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::invalid("attention", format!("no block {layer}")))?;
        let bv = &vars.blocks[layer];
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: s,
                rhs: vec![0, 0, self.config.embed_dim],
            });
        }
        let (batch, tokens) = (s[0], s[1]);
        let (h, dh) = (blk.heads, self.config.head_dim());
        let mut split = |w: usize, b: usize| -> Result<Var> {
            let y = linear(tape, x, bv[w], bv[b], None)?;
            let y = tape.reshape(y, &[batch, tokens, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(WQ, BQ)?;
        let k = split(WK, BK)?;
        let v = split(WV, BV)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        tape.matmul(attn, v)
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        layer: usize,
        x: Var,
        masks: Option<&MaskContext<'_>>,
    ) -> Result<Var> {
        let blk = &self.blocks[layer];
        let bv = &vars.blocks[layer];
        let s = tape.shape(x).to_vec();
        let (batch, tokens) = (s[0], s[1]);
        let dh = self.config.head_dim();
        let bm = masks.map(|m| (m.blocks[layer], m.class_select));

        let h = tape.layer_norm(x, bv[LN1_G], bv[LN1_B], LN_EPS)?;
        let mut heads = self.attention_heads(tape, vars, layer, h)?;
        if let Some((m, classes)) = bm {
            let g = tape.gather(m.head, classes)?;
            let g = tape.reshape(g, &[batch, blk.heads, 1, dh])?;
            heads = tape.mul(heads, g)?;
        }
        let merged = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[batch, tokens, blk.heads * dh])?;
        let attn = linear(tape, merged, bv[WO], bv[BO], bm.map(|(m, c)| (m.out_proj, c)))?;
        let x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, bv[LN2_G], bv[LN2_B], LN_EPS)?;
        let f = linear(tape, h, bv[W1], bv[B1], bm.map(|(m, c)| (m.fc1, c)))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, bv[W2], bv[B2], bm.map(|(m, c)| (m.fc2, c)))?;
        tape.add(x, f)
    }

    /// Logits `(B, C)`. With `masks`, every block applies the class slices
    /// selected per sample; without, all masks are implicitly one.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: &Tensor,
        masks: Option<&MaskContext<'_>>,
    ) -> Result<Var> {
        if let Some(m) = masks {
            if m.blocks.len() != self.blocks.len() {
                return Err(Error::invalid("masked_forward", "mask set does not match model depth"));
            }
            if m.class_select.len() != images.shape().first().copied().unwrap_or(0) {
                return Err(Error::invalid("masked_forward", "class_select length differs from batch"));
            }
            let c = self.config.num_classes;
            if let Some(&bad) = m.class_select.iter().find(|&&y| y >= c) {
                return Err(Error::invalid("masked_forward", format!("class index {bad} >= {c}")));
            }
        }
        let mut x = self.embed(tape, vars, images)?;
        for layer in 0..self.blocks.len() {
            x = self.block_forward(tape, vars, layer, x, masks)?;
        }
        let x = tape.layer_norm(x, vars.norm_g, vars.norm_b, LN_EPS)?;
        let cls = tape.narrow(x, 1, 0, 1)?;
        let batch = tape.shape(cls)[0];
        let cls = tape.reshape(cls, &[batch, self.config.embed_dim])?;
        linear(tape, cls, vars.head_w, vars.head_b, None)
    }

    /// Unmasked logits on a throwaway tape.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let y = self.forward_tape(&mut tape, &vars, images, None)?;
        Ok(tape.value(y).clone())
    }

    /// Per-head attention outputs for block `layer` on `(B, tokens, d)` input.
    pub fn attention_forward(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.attention_heads(&mut tape, &vars, layer, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn head_unit_params(&self) -> usize {
        let (d, dh) = (self.config.embed_dim, self.config.head_dim());
        // Q, K, V rows with biases plus the output-projection columns.
        3 * (dh * d + dh) + d * dh
    }

    pub fn neuron_unit_params(&self) -> usize {
        // W1 row + bias, W2 column.
        2 * self.config.embed_dim + 1
    }

    /// Every attention head and MLP neuron, ordered by block, kind, index.
    pub fn prunable_units(&self) -> Vec<PrunableUnit> {
        let mut out = Vec::new();
        for (block, blk) in self.blocks.iter().enumerate() {
            out.extend((0..blk.heads).map(|index| PrunableUnit {
                block,
                kind: UnitKind::AttentionHead,
                index,
                param_count: self.head_unit_params(),
            }));
            out.extend((0..blk.hidden).map(|index| PrunableUnit {
                block,
                kind: UnitKind::MlpNeuron,
                index,
                param_count: self.neuron_unit_params(),
            }));
        }
        out
    }

    /// Physically removes every head and neuron not listed in `keep`.
    pub fn apply_structural_prune(&self, keep: &[BlockKeep]) -> Result<Model> {
        if keep.len() != self.blocks.len() {
            return Err(Error::invalid("prune", "keep list length differs from depth"));
        }
        let dh = self.config.head_dim();
        let mut out = self.clone();
        for (l, (blk, k)) in out.blocks.iter_mut().zip(keep).enumerate() {
            if k.heads.is_empty() || k.neurons.is_empty() {
                return Err(Error::DegenerateArchitecture(format!(
                    "block {l} would keep {} heads and {} neurons",
                    k.heads.len(),
                    k.neurons.len()
                )));
            }
            check_keep(l, "head", &k.heads, blk.heads)?;
            check_keep(l, "neuron", &k.neurons, blk.hidden)?;
            let rows: Vec<usize> = k
                .heads
                .iter()
                .flat_map(|&h| h * dh..(h + 1) * dh)
                .collect();
            for (w, b) in [
                (&mut blk.wq, &mut blk.bq),
                (&mut blk.wk, &mut blk.bk),
                (&mut blk.wv, &mut blk.bv),
            ] {
                *w = w.index_select(0, &rows)?;
                *b = b.index_select(0, &rows)?;
            }
            blk.wo = blk.wo.index_select(1, &rows)?;
            blk.w1 = blk.w1.index_select(0, &k.neurons)?;
            blk.b1 = blk.b1.index_select(0, &k.neurons)?;
            blk.w2 = blk.w2.index_select(1, &k.neurons)?;
            blk.heads = k.heads.len();
            blk.hidden = k.neurons.len();
        }
        Ok(out)
    }

    /// Order-sensitive FNV-1a digest of every parameter bit pattern.
    pub fn weight_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn check_keep(block: usize, what: &str, idx: &[usize], extent: usize) -> Result<()> {
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= extent) {
        return Err(Error::invalid(
            "prune",
            format!("block {block}: {what} indices {idx:?} must be strictly increasing and < {extent}"),
        ));
    }
    Ok(())
}
