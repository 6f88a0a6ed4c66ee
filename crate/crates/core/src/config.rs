//! Flat, typed run configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, FrontendKind};
use crate::model::ModelConfig;
use crate::trainer::{ScratchConfig, SearchConfig};

/// Every knob of a run. Unknown keys are rejected; missing keys take the
/// full-size defaults. Relative data paths are resolved against the
/// directory of the file they were read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub frontend: FrontendKind,
    pub frontend_learnable: bool,
    pub filters: usize,
    pub kernel_len: usize,
    pub sample_rate: u32,
    pub frontend_pool: usize,
    pub mask_max: usize,
    pub samples: usize,
    pub channels: usize,
    pub cells: usize,
    pub expand_positions: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,

    pub search_epochs: usize,
    pub warmup_epochs: usize,
    pub search_batch: usize,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub w_lr: f64,
    pub k_c: usize,

    pub train_epochs: usize,
    pub train_batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub freeze_frontend: bool,

    pub train_protocol: Option<PathBuf>,
    pub train_wav_dir: Option<PathBuf>,
    pub dev_protocol: Option<PathBuf>,
    pub dev_wav_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(
            0,
            &ModelConfig::full(),
            &SearchConfig::default(),
            &ScratchConfig::default(),
        )
    }
}

impl RunConfig {
    pub fn from_parts(
        seed: u64,
        model: &ModelConfig,
        search: &SearchConfig,
        scratch: &ScratchConfig,
    ) -> Self {
        let f = &model.frontend;
        RunConfig {
            seed,
            frontend: f.kind,
            frontend_learnable: f.learnable,
            filters: f.filters,
            kernel_len: f.kernel_len,
            sample_rate: f.sample_rate,
            frontend_pool: f.pool,
            mask_max: f.mask_max,
            samples: model.samples,
            channels: model.channels,
            cells: model.cells,
            expand_positions: model.expand_positions.clone(),
            gru_hidden: model.gru_hidden,
            gru_layers: model.gru_layers,
            embedding_dim: model.embedding_dim,
            leaky_slope: model.leaky_slope,
            search_epochs: search.epochs,
            warmup_epochs: search.warmup_epochs,
            search_batch: search.batch,
            alpha_lr: search.alpha_lr,
            alpha_weight_decay: search.alpha_weight_decay,
            w_lr: search.w_lr,
            k_c: search.k_c,
            train_epochs: scratch.epochs,
            train_batch: scratch.batch,
            lr_max: scratch.lr_max,
            lr_min: scratch.lr_min,
            freeze_frontend: scratch.freeze_frontend,
            train_protocol: None,
            train_wav_dir: None,
            dev_protocol: None,
            dev_wav_dir: None,
            out_dir: None,
        }
    }

    /// The desk-scale configuration used for the synthetic end-to-end run.
    pub fn toy() -> Self {
        RunConfig::from_parts(0, &ModelConfig::toy(), &toy_search(), &toy_scratch())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig {
                kind: self.frontend,
                learnable: self.frontend_learnable,
                filters: self.filters,
                kernel_len: self.kernel_len,
                sample_rate: self.sample_rate,
                pool: self.frontend_pool,
                mask_max: self.mask_max,
            },
            samples: self.samples,
            channels: self.channels,
            cells: self.cells,
            expand_positions: self.expand_positions.clone(),
            gru_hidden: self.gru_hidden,
            gru_layers: self.gru_layers,
            embedding_dim: self.embedding_dim,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.search_epochs,
            warmup_epochs: self.warmup_epochs,
            batch: self.search_batch,
            alpha_lr: self.alpha_lr,
            alpha_weight_decay: self.alpha_weight_decay,
            w_lr: self.w_lr,
            k_c: self.k_c,
            seed: self.seed,
        }
    }

    pub fn scratch(&self) -> ScratchConfig {
        ScratchConfig {
            epochs: self.train_epochs,
            batch: self.train_batch,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            seed: self.seed,
            freeze_frontend: self.freeze_frontend,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.search().validate()?;
        self.scratch().validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.train_protocol,
            &mut cfg.train_wav_dir,
            &mut cfg.dev_protocol,
            &mut cfg.dev_wav_dir,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

fn toy_search() -> SearchConfig {
    SearchConfig {
        epochs: 6,
        warmup_epochs: 2,
        w_lr: 1e-3,
        ..SearchConfig::default()
    }
}

fn toy_scratch() -> ScratchConfig {
    ScratchConfig {
        epochs: 15,
        lr_max: 1e-3,
        lr_min: 4e-4,
        batch: 16,
        ..ScratchConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_size_settings() {
        let c = RunConfig::default();
        assert_eq!(c.search(), SearchConfig::default());
        assert_eq!(c.scratch(), ScratchConfig::default());
        assert_eq!(c.model(), ModelConfig::full());
        assert_eq!(
            (c.search_epochs, c.warmup_epochs, c.search_batch, c.k_c),
            (30, 10, 14, 2)
        );
        assert_eq!(
            (c.alpha_lr, c.alpha_weight_decay, c.w_lr),
            (6e-4, 1e-3, 5e-5)
        );
        assert_eq!(
            (c.train_epochs, c.train_batch, c.lr_max, c.lr_min),
            (100, 32, 5e-5, 2e-5)
        );
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::parse("seed = 7\nk_c = 4\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.k_c, 4);
        assert_eq!(partial.gru_hidden, 1024);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(
            RunConfig::parse("sed = 7\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("k_c = \"two\"\n").is_err());
        assert!(RunConfig::parse("warmup_epochs = 40\n").is_err());
        assert!(RunConfig::parse("frontend = \"mfcc\"\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "train_protocol = \"data/train.txt\"\nout_dir = \"/abs/out\"\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.train_protocol.unwrap(), dir.path().join("data/train.txt"));
        assert_eq!(c.out_dir.unwrap(), PathBuf::from("/abs/out"));
    }
}
