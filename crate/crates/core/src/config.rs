//! Run configuration.
//!
//! Sources, later wins: built-in defaults, a flat `key = value` file, the
//! `XPRUNER_OUT` environment variable (output directory only), command-line
//! flags. Keys may be written with dashes or underscores; `#` starts a
//! comment.
//!
//! ```text
//! # toy run
//! alpha = 0.3
//! mask-epochs = 10
//! gate = rectified
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskLossWeights;
use crate::model::ModelConfig;
use crate::prune::{GateVariant, Granularity, PruneConfig};
use crate::train::TrainConfig;

pub const OUT_ENV: &str = "XPRUNER_OUT";

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every knob of the pipeline. Flag and file key names are the field
        /// names in kebab case.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// Field names in declaration order, snake case.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.trim();
                match key.replace('-', "_").as_str() {
                    $( stringify!($field) => self.$field = parse_value(key, value.trim())?, )*
                    _ => return Err(Error::config(key, "unknown configuration key")),
                }
                Ok(())
            }

            /// `key = value` lines for every field, readable by [`RunConfig::parse`].
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field).replace('_', "-"), self.$field)); )*
                out
            }
        }

        /// Command-line overrides, one optional flag per field.
        #[derive(Clone, Debug, Default, clap::Args)]
        pub struct Overrides {
            $( $(#[doc = $doc])* #[arg(long, global = true)] pub $field: Option<$ty>, )*
        }

        impl Overrides {
            pub fn apply(&self, cfg: &mut RunConfig) {
                $( if let Some(v) = &self.$field { cfg.$field = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Master seed; every random stream derives from it.
    seed: u64 = 0,
    /// Output directory (also settable through XPRUNER_OUT).
    out_dir: String = "runs".into(),
    image_size: usize = 32,
    patch_size: usize = 8,
    channels: usize = 1,
    embed_dim: usize = 64,
    depth: usize = 2,
    heads: usize = 4,
    mlp_ratio: usize = 2,
    num_classes: usize = 3,
    /// `synthetic` or `idx`.
    data: String = "synthetic".into(),
    train_per_class: usize = 200,
    test_per_class: usize = 50,
    /// Pixel noise of the synthetic gratings.
    noise: f64 = 0.1,
    train_images: String = String::new(),
    train_labels: String = String::new(),
    test_images: String = String::new(),
    test_labels: String = String::new(),
    batch_size: usize = 32,
    baseline_epochs: usize = 30,
    baseline_lr: f64 = 1e-3,
    mask_epochs: usize = 20,
    mask_lr: f64 = 0.01,
    mask_momentum: f64 = 0.9,
    lambda_smooth: f64 = 1e-3,
    lambda_sparse: f64 = 1e-3,
    /// Fraction of prunable parameters to remove.
    alpha: f64 = 0.5,
    /// Gate sharpness.
    n: f64 = 10.0,
    /// Suppression scale of dropped units.
    p: f64 = 500.0,
    /// `verbatim` or `rectified`.
    gate: GateVariant = GateVariant::Verbatim,
    /// `unit` or `elementwise`.
    granularity: Granularity = Granularity::Unit,
    prune_lr: f64 = 0.02,
    other_lr: f64 = 5e-4,
    dual_lr: f64 = 0.02,
    prune_momentum: f64 = 0.9,
    /// Cap on threshold-search epochs.
    search_epochs: usize = 10,
    tolerance: f64 = 0.02,
    finetune_epochs: usize = 10,
    finetune_lr: f64 = 5e-4,
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateVariant::Verbatim => "verbatim",
            GateVariant::Rectified => "rectified",
        })
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Unit => "unit",
            Granularity::Elementwise => "elementwise",
        })
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of `self`.
    pub fn parse(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected key = value, got {raw:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `XPRUNER_OUT`, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.parse(&text)?;
        }
        if let Ok(dir) = std::env::var(OUT_ENV) {
            if !dir.is_empty() {
                cfg.out_dir = dir;
            }
        }
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.prune_config().validate()?;
        self.mask_weights().validate()?;
        for (name, v) in [
            ("baseline_lr", self.baseline_lr),
            ("mask_lr", self.mask_lr),
            ("finetune_lr", self.finetune_lr),
            ("tolerance", self.tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_momentum) {
            return Err(Error::config("mask_momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise", "must be >= 0"));
        }
        match self.data.as_str() {
            "synthetic" => {
                if self.train_per_class == 0 || self.test_per_class == 0 {
                    return Err(Error::config("train_per_class", "per-split counts must be positive"));
                }
                if self.channels != 1 {
                    return Err(Error::config("channels", "synthetic data is single-channel"));
                }
            }
            "idx" => {
                for (name, v) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if v.is_empty() {
                        return Err(Error::config(name, "required when data = idx"));
                    }
                }
            }
            other => return Err(Error::config("data", format!("expected synthetic or idx, got {other:?}"))),
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            alpha: self.alpha,
            n: self.n,
            p: self.p,
            gate: self.gate,
            granularity: self.granularity,
            lr_prune: self.prune_lr,
            lr_other: self.other_lr,
            lr_dual: self.dual_lr,
            momentum: self.prune_momentum,
        }
    }

    pub fn mask_weights(&self) -> MaskLossWeights {
        MaskLossWeights {
            smooth: self.lambda_smooth,
            sparse: self.lambda_sparse,
        }
    }

    pub fn baseline_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.baseline_epochs,
            lr: self.baseline_lr,
            batch_size: self.batch_size,
            weight_decay: 0.0,
            seed: self.seed,
        }
    }

    pub fn finetune_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            ..self.baseline_train()
        }
    }
}
