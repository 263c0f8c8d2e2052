//! Run configuration: every knob of a training run as a flat set of
//! dotted keys (`sampler.M=60`), parse and serialize, plus the two named
//! presets. Serialized configs are diff-able experiment records and
//! re-run to identical results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::EncoderConfig;
use crate::numerics::SgdConfig;
use crate::sampler::{SamplerConfig, SamplerMode};

/// Which preset a config starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Hyperparameters as published (M=60, K=4, d'=128, 30 epochs), on
    /// the synthetic desk-scale dataset.
    Paper,
    /// Scaled down for seconds-scale epochs (N=2000, M=16, K=4, 15 epochs).
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected paper | desk)"
            ))),
        }
    }
}

/// Complete description of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Global seed; setting it re-derives the per-module seeds.
    pub seed: u64,
    pub epochs: usize,
    /// Interval (in steps) between fraction-CSV rows.
    pub log_interval: usize,
    /// Evaluate every N epochs (0 = final epoch only).
    pub eval_every: usize,
    /// Fraction of each place's images held out as queries.
    pub eval_holdout: f64,
    /// Weight of the proxy-branch loss in the training objective.
    pub proxy_loss_weight: f64,
    /// Detach the proxy head's input so its loss never reaches the encoder.
    pub detach_proxy_input: bool,
    /// Load this dataset file instead of generating one.
    pub dataset_path: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub sgd: SgdConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Desk => Self::desk(seed),
            Preset::Paper => Self::paper(seed),
        }
    }

    pub fn desk(seed: u64) -> Self {
        // Noise levels put neighboring places inside each other's image
        // scatter: archetypes overlap into a continuum rather than
        // forming disjoint islands. Batches that are all-hard with no
        // easy negatives destabilize a from-scratch encoder, so the desk
        // run needs this overlap (and the gentler learning rate below)
        // for index-based sampling to help rather than hurt.
        let mut loss = LossConfig::new(LossKind::Triplet);
        loss.contrastive_neg_margin = 0.7;
        RunConfig {
            seed,
            epochs: 15,
            log_interval: 25,
            eval_every: 1,
            eval_holdout: 0.25,
            proxy_loss_weight: 1.0,
            detach_proxy_input: false,
            dataset_path: None,
            generator: GeneratorConfig {
                n_places: 2000,
                images_per_place_min: 6,
                images_per_place_max: 6,
                feature_dim: 32,
                n_archetypes: 50,
                sigma_within: 0.11,
                sigma_archetype: 0.12,
                seed,
            },
            encoder: EncoderConfig {
                input_dim: 32,
                hidden_dim: 64,
                embed_dim: 32,
                proxy_dim: 16,
                seed: seed.wrapping_add(1),
            },
            loss,
            sampler: SamplerConfig {
                m: 16,
                k: 4,
                mode: SamplerMode::Random,
                seed: seed.wrapping_add(2),
            },
            sgd: SgdConfig {
                learning_rate: 0.02,
                momentum: 0.95,
                weight_decay: 1e-4,
                lr_decay_factor: 0.3,
                lr_decay_every_epochs: 5,
            },
        }
    }

    pub fn paper(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        cfg.epochs = 30;
        cfg.sampler.m = 60;
        cfg.sampler.k = 4;
        cfg.encoder.hidden_dim = 256;
        cfg.encoder.embed_dim = 256;
        cfg.encoder.proxy_dim = 128;
        cfg.sgd.learning_rate = 0.05;
        cfg
    }

    /// Global-seed update: re-derives the module seeds. Set module seed
    /// keys afterwards to pin them individually.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.encoder.seed = seed.wrapping_add(1);
        self.sampler.seed = seed.wrapping_add(2);
    }

    /// Seed for the query/reference split, derived from the global seed.
    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("run.epochs must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("run.log_interval must be >= 1".into()));
        }
        if !(0.0 < self.eval_holdout && self.eval_holdout < 1.0) {
            return Err(Error::Config(
                "run.eval_holdout must be in (0,1): training needs held-out queries".into(),
            ));
        }
        if !(self.proxy_loss_weight >= 0.0 && self.proxy_loss_weight.is_finite()) {
            return Err(Error::Config(
                "run.proxy_loss_weight must be non-negative".into(),
            ));
        }
        if self.dataset_path.is_none() {
            self.generator.validate()?;
            if self.generator.feature_dim != self.encoder.input_dim {
                return Err(Error::Config(format!(
                    "generator.feature_dim ({}) must equal encoder.input_dim ({})",
                    self.generator.feature_dim, self.encoder.input_dim
                )));
            }
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.sgd.validate()?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value '{value}' for {what}"));
        macro_rules! parse {
            ($what:expr) => {
                value.parse().map_err(|_| bad($what))?
            };
        }
        match key {
            "run.seed" => self.set_seed(parse!(key)),
            "run.epochs" => self.epochs = parse!(key),
            "run.log_interval" => self.log_interval = parse!(key),
            "run.eval_every" => self.eval_every = parse!(key),
            "run.eval_holdout" => self.eval_holdout = parse!(key),
            "run.proxy_loss_weight" => self.proxy_loss_weight = parse!(key),
            "model.detach_input" => self.detach_proxy_input = parse!(key),
            "dataset.path" => {
                self.dataset_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "generator.n_places" => self.generator.n_places = parse!(key),
            "generator.images_per_place_min" => self.generator.images_per_place_min = parse!(key),
            "generator.images_per_place_max" => self.generator.images_per_place_max = parse!(key),
            "generator.feature_dim" => self.generator.feature_dim = parse!(key),
            "generator.n_archetypes" => self.generator.n_archetypes = parse!(key),
            "generator.sigma_within" => self.generator.sigma_within = parse!(key),
            "generator.sigma_archetype" => self.generator.sigma_archetype = parse!(key),
            "generator.seed" => self.generator.seed = parse!(key),
            "encoder.input_dim" => self.encoder.input_dim = parse!(key),
            "encoder.hidden_dim" => self.encoder.hidden_dim = parse!(key),
            "encoder.embed_dim" => self.encoder.embed_dim = parse!(key),
            "encoder.proxy_dim" => self.encoder.proxy_dim = parse!(key),
            "encoder.seed" => self.encoder.seed = parse!(key),
            "loss.kind" => self.loss.kind = parse!(key),
            "loss.triplet_margin" => self.loss.triplet_margin = parse!(key),
            "loss.contrastive_pos_margin" => self.loss.contrastive_pos_margin = parse!(key),
            "loss.contrastive_neg_margin" => self.loss.contrastive_neg_margin = parse!(key),
            "loss.ms_alpha" => self.loss.ms_alpha = parse!(key),
            "loss.ms_beta" => self.loss.ms_beta = parse!(key),
            "loss.ms_lambda" => self.loss.ms_lambda = parse!(key),
            "loss.ms_eps" => self.loss.ms_eps = parse!(key),
            "loss.ohm" => self.loss.ohm_enabled = parse!(key),
            "sampler.M" => self.sampler.m = parse!(key),
            "sampler.K" => self.sampler.k = parse!(key),
            "sampler.mode" => self.sampler.mode = parse!(key),
            "sampler.seed" => self.sampler.seed = parse!(key),
            "sgd.learning_rate" => self.sgd.learning_rate = parse!(key),
            "sgd.momentum" => self.sgd.momentum = parse!(key),
            "sgd.weight_decay" => self.sgd.weight_decay = parse!(key),
            "sgd.lr_decay_factor" => self.sgd.lr_decay_factor = parse!(key),
            "sgd.lr_decay_every_epochs" => self.sgd.lr_decay_every_epochs = parse!(key),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// All keys in stable order. `run.seed` comes first so that replaying
    /// the list re-derives and then pins every module seed.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("run.seed".into(), self.seed.to_string()),
            ("run.epochs".into(), self.epochs.to_string()),
            ("run.log_interval".into(), self.log_interval.to_string()),
            ("run.eval_every".into(), self.eval_every.to_string()),
            ("run.eval_holdout".into(), self.eval_holdout.to_string()),
            (
                "run.proxy_loss_weight".into(),
                self.proxy_loss_weight.to_string(),
            ),
            (
                "model.detach_input".into(),
                self.detach_proxy_input.to_string(),
            ),
        ];
        if let Some(p) = &self.dataset_path {
            kv.push(("dataset.path".into(), p.display().to_string()));
        }
        kv.extend([
            (
                "generator.n_places".into(),
                self.generator.n_places.to_string(),
            ),
            (
                "generator.images_per_place_min".into(),
                self.generator.images_per_place_min.to_string(),
            ),
            (
                "generator.images_per_place_max".into(),
                self.generator.images_per_place_max.to_string(),
            ),
            (
                "generator.feature_dim".into(),
                self.generator.feature_dim.to_string(),
            ),
            (
                "generator.n_archetypes".into(),
                self.generator.n_archetypes.to_string(),
            ),
            (
                "generator.sigma_within".into(),
                self.generator.sigma_within.to_string(),
            ),
            (
                "generator.sigma_archetype".into(),
                self.generator.sigma_archetype.to_string(),
            ),
            ("generator.seed".into(), self.generator.seed.to_string()),
            ("encoder.input_dim".into(), self.encoder.input_dim.to_string()),
            (
                "encoder.hidden_dim".into(),
                self.encoder.hidden_dim.to_string(),
            ),
            ("encoder.embed_dim".into(), self.encoder.embed_dim.to_string()),
            ("encoder.proxy_dim".into(), self.encoder.proxy_dim.to_string()),
            ("encoder.seed".into(), self.encoder.seed.to_string()),
            ("loss.kind".into(), self.loss.kind.to_string()),
            (
                "loss.triplet_margin".into(),
                self.loss.triplet_margin.to_string(),
            ),
            (
                "loss.contrastive_pos_margin".into(),
                self.loss.contrastive_pos_margin.to_string(),
            ),
            (
                "loss.contrastive_neg_margin".into(),
                self.loss.contrastive_neg_margin.to_string(),
            ),
            ("loss.ms_alpha".into(), self.loss.ms_alpha.to_string()),
            ("loss.ms_beta".into(), self.loss.ms_beta.to_string()),
            ("loss.ms_lambda".into(), self.loss.ms_lambda.to_string()),
            ("loss.ms_eps".into(), self.loss.ms_eps.to_string()),
            ("loss.ohm".into(), self.loss.ohm_enabled.to_string()),
            ("sampler.M".into(), self.sampler.m.to_string()),
            ("sampler.K".into(), self.sampler.k.to_string()),
            ("sampler.mode".into(), self.sampler.mode.to_string()),
            ("sampler.seed".into(), self.sampler.seed.to_string()),
            (
                "sgd.learning_rate".into(),
                self.sgd.learning_rate.to_string(),
            ),
            ("sgd.momentum".into(), self.sgd.momentum.to_string()),
            ("sgd.weight_decay".into(), self.sgd.weight_decay.to_string()),
            (
                "sgd.lr_decay_factor".into(),
                self.sgd.lr_decay_factor.to_string(),
            ),
            (
                "sgd.lr_decay_every_epochs".into(),
                self.sgd.lr_decay_every_epochs.to_string(),
            ),
        ]);
        kv
    }

    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies `key=value` lines (comments with `#`, blank lines allowed)
    /// on top of the current config.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("line {}", lineno + 1),
                msg: format!("expected key=value, found '{line}'"),
            })?;
            self.set_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_config_text(&text)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_text())?;
        Ok(())
    }
}
