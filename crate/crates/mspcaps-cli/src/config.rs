//! Run configuration: a flat JSON schema with per-dataset defaults, where
//! command-line flags override file values and the fully resolved result is
//! echoed next to the run artifacts.

use mspcaps::error::{Error, Result};
use mspcaps::model::{ModelConfig, RoutingKind};
use mspcaps::train::Seeds;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub preset: String,
    pub routing: RoutingKind,
    pub dr_iters: usize,
    pub patch_size: usize,
    pub weight_shared: Option<bool>,
    pub scale_mask: [bool; 3],
    pub dropout_rate: Option<f64>,
    // custom-preset architecture fields
    pub channels: [usize; 3],
    pub convs_per_block: usize,
    pub capsule_dims: [usize; 3],
    pub d_mid: usize,
    pub d_out: usize,
    pub num_classes: usize,
    // data
    pub dataset: String,
    pub data_dir: PathBuf,
    pub limit_train: Option<usize>,
    pub limit_eval: Option<usize>,
    // training
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    // seeds
    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub seed_dropout: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tiny = ModelConfig::tiny();
        RunConfig {
            preset: "tiny".into(),
            routing: RoutingKind::Car,
            dr_iters: 3,
            patch_size: 4,
            weight_shared: None,
            scale_mask: [true, true, true],
            dropout_rate: None,
            channels: tiny.channels,
            convs_per_block: tiny.convs_per_block,
            capsule_dims: tiny.capsule_dims,
            d_mid: tiny.d_mid,
            d_out: tiny.d_out,
            num_classes: tiny.num_classes,
            dataset: "cifar10".into(),
            data_dir: PathBuf::from("data"),
            limit_train: None,
            limit_eval: None,
            epochs: None,
            batch_size: 128,
            base_lr: None,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            min_lr: 1e-6,
            seed_init: 0,
            seed_shuffle: 1,
            seed_dropout: 2,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

/// Canonical dataset key: lower-case, separators stripped.
pub fn canonical_dataset(name: &str) -> String {
    name.to_ascii_lowercase().replace(['-', '_'], "")
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{} at line {}, column {}",
                e,
                e.line(),
                e.column()
            ))
        })
    }

    /// Fills every per-dataset default in place, making the config
    /// self-contained: loading the resolved file reproduces the run exactly.
    pub fn resolve(&mut self) -> Result<()> {
        let ds = canonical_dataset(&self.dataset);
        if self.epochs.is_none() {
            // 300-epoch recipe, shortened to 100 for the easiest dataset
            self.epochs = Some(if ds == "mnist" { 100 } else { 300 });
        }
        if self.base_lr.is_none() {
            self.base_lr = Some(if ds == "fashionmnist" { 1e-4 } else { 5e-4 });
        }
        if self.dropout_rate.is_none() {
            // routing dropout is omitted for SVHN
            self.dropout_rate = Some(if ds == "svhn" { 0.0 } else { 0.1 });
        }
        if self.weight_shared.is_none() {
            self.weight_shared = Some(self.preset != "large");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match canonical_dataset(&self.dataset).as_str() {
            "mnist" | "fashionmnist" => 1,
            _ => 3,
        }
    }

    /// Builds the architecture description. `resolve` must have run.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "tiny" => ModelConfig::tiny(),
            "large" => ModelConfig::large(),
            "custom" => {
                let mut c = ModelConfig::tiny();
                c.channels = self.channels;
                c.convs_per_block = self.convs_per_block;
                c.capsule_dims = self.capsule_dims;
                c.d_mid = self.d_mid;
                c.d_out = self.d_out;
                c.num_classes = self.num_classes;
                c
            }
            other => return Err(Error::Config(format!("unknown preset `{other}` (tiny|large|custom)"))),
        };
        cfg.routing = self.routing;
        cfg.dr_iters = self.dr_iters;
        cfg.patch_size = self.patch_size;
        cfg.scale_mask = self.scale_mask;
        cfg.in_channels = self.in_channels();
        if let Some(ws) = self.weight_shared {
            cfg.weight_shared = ws;
        }
        if let Some(rate) = self.dropout_rate {
            cfg.dropout_rate = rate;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            init: self.seed_init,
            shuffle: self.seed_shuffle,
            dropout: self.seed_dropout,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}
