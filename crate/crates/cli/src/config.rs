//! Flat run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use recdiff::diffusion::NoiseScale;
use recdiff::gem::GemKind;
use recdiff::inference::RetrievalMode;
use recdiff::trainer::{TrainConfig, Variant};
use recdiff::{Error, Execution, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parses a snake_case enum the same way the config file does.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unknown value `{s}`"))
}

/// Every key is optional so a file, the flags and the resolved record share
/// one shape. A fully resolved config has every key set.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Prepared dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Ablation preset; sets the four loss/noise flags.
    #[arg(long, value_parser = parse_enum::<Variant>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Number of guidance vectors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interests: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
    /// Number of diffusion steps.
    #[arg(long = "T", id = "T")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    /// Reconstruction loss weight.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Denoiser sampled-softmax weight.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// History truncation; defaults to the dataset's.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_gem_loss: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_recon_loss: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_ssm_loss: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_grw: Option<bool>,
    /// `self_attentive` or `rule_based`.
    #[arg(long, value_parser = parse_enum::<GemKind>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gem: Option<GemKind>,
    /// `diffusion` or `guidance`.
    #[arg(long, value_parser = parse_enum::<RetrievalMode>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalMode>,
    /// `stddev` or `variance`.
    #[arg(long, value_parser = parse_enum::<NoiseScale>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<NoiseScale>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// `parallel` or `sequential`.
    #[arg(long, value_parser = parse_enum::<Execution>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub execution: Option<Execution>,
}

macro_rules! layer {
    ($base:expr, $top:expr, $($f:ident),*) => {
        RunConfig { $($f: $top.$f.clone().or_else(|| $base.$f.clone()),)* }
    };
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    /// Keys set in `top` win over keys set in `self`.
    pub fn overlay(&self, top: &RunConfig) -> RunConfig {
        layer!(
            self, top, data, variant, dim, batch_size, interests, lr, negatives, steps, beta_start, beta_end, lambda,
            mu, max_len, use_gem_loss, use_recon_loss, use_ssm_loss, use_grw, gem, retrieval, noise_scale, seed,
            epochs, patience, clip_norm, execution
        )
    }

    /// Applies the keys onto the library defaults. `dataset_max_len` fills
    /// `max_len` when unset. A variant preset must agree with any of the
    /// four flags given explicitly.
    pub fn train_config(&self, dataset_max_len: usize) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            max_len: dataset_max_len,
            ..TrainConfig::default()
        };
        if let Some(v) = self.variant {
            let preset = v.flags();
            let given = [
                ("use_gem_loss", self.use_gem_loss, preset.0),
                ("use_recon_loss", self.use_recon_loss, preset.1),
                ("use_ssm_loss", self.use_ssm_loss, preset.2),
                ("use_grw", self.use_grw, preset.3),
            ];
            for (name, flag, want) in given {
                if flag.is_some_and(|f| f != want) {
                    return Err(Error::Config(format!(
                        "variant {v:?} sets {name} = {want}, which conflicts with the explicit {name} = {}",
                        !want
                    )));
                }
            }
            v.apply(&mut cfg);
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),*) => { $(if let Some(x) = self.$src { cfg.$($dst).+ = x; })* };
        }
        set!(
            dim => dim, batch_size => batch_size, interests => interests, lr => lr, negatives => negatives,
            steps => schedule.steps, beta_start => schedule.beta_start, beta_end => schedule.beta_end,
            lambda => lambda, mu => mu, max_len => max_len, use_gem_loss => use_gem_loss,
            use_recon_loss => use_recon_loss, use_ssm_loss => use_ssm_loss, use_grw => use_grw, gem => gem,
            retrieval => retrieval, noise_scale => noise_scale, seed => seed, epochs => epochs,
            patience => patience, clip_norm => clip_norm, execution => execution
        );
        // Schedule defaults scale with T unless pinned explicitly.
        if self.steps.is_some() && self.beta_start.is_none() && self.beta_end.is_none() {
            let spec = recdiff::diffusion::ScheduleSpec::scaled_linear(cfg.schedule.steps);
            cfg.schedule.beta_start = spec.beta_start;
            cfg.schedule.beta_end = spec.beta_end;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved record of `cfg`, keeping `data` and `variant`.
    pub fn resolved(&self, cfg: &TrainConfig) -> RunConfig {
        RunConfig {
            data: self.data.clone(),
            variant: self.variant,
            dim: Some(cfg.dim),
            batch_size: Some(cfg.batch_size),
            interests: Some(cfg.interests),
            lr: Some(cfg.lr),
            negatives: Some(cfg.negatives),
            steps: Some(cfg.schedule.steps),
            beta_start: Some(cfg.schedule.beta_start),
            beta_end: Some(cfg.schedule.beta_end),
            lambda: Some(cfg.lambda),
            mu: Some(cfg.mu),
            max_len: Some(cfg.max_len),
            use_gem_loss: Some(cfg.use_gem_loss),
            use_recon_loss: Some(cfg.use_recon_loss),
            use_ssm_loss: Some(cfg.use_ssm_loss),
            use_grw: Some(cfg.use_grw),
            gem: Some(cfg.gem),
            retrieval: Some(cfg.retrieval),
            noise_scale: Some(cfg.noise_scale),
            seed: Some(cfg.seed),
            epochs: Some(cfg.epochs),
            patience: Some(cfg.patience),
            clip_norm: Some(cfg.clip_norm),
            execution: Some(cfg.execution),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
