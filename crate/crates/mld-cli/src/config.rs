use std::fs;
use std::path::Path;

use mld::cond::TextEmbedProvider;
use mld::diffusion::{CondSource, DiffusionConfig, SamplerSpec};
use mld::eval::ExtractorConfig;
use mld::motion::SynthSpec;
use mld::vae::VaeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, CliResult};

/// Where text embeddings come from. The hash provider is a deterministic
/// random projection of character n-gram counts; the table provider serves
/// vectors precomputed offline and imported as a TSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Hash { seed: u64, dim: usize },
    Table { path: String },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        // The default width matches CondConfig::default().provider_dim so a
        // configuration built entirely from defaults is coherent.
        ProviderConfig::Hash { seed: 17, dim: 64 }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> mld::Result<TextEmbedProvider> {
        match self {
            ProviderConfig::Hash { seed, dim } => TextEmbedProvider::hash(*seed, *dim),
            ProviderConfig::Table { path } => TextEmbedProvider::load_table(Path::new(path)),
        }
    }
}

/// One experiment's full hyperparameter surface: model shapes, schedule,
/// guidance, training lengths, sampling settings, the text provider, the
/// synthetic-corpus recipe, and the evaluation extractor. Every knob is
/// addressable by name in the JSON config file; unknown keys are rejected
/// at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Left null it falls back to the MLD_SEED environment
    /// variable and then to 0; the echoed config always shows the resolved
    /// value.
    pub seed: Option<u64>,
    /// Worker-thread cap for parallel sections (evaluate). 1 means serial.
    pub threads: usize,
    pub vae: VaeConfig,
    pub vae_epochs: usize,
    pub diffusion: DiffusionConfig,
    pub diffusion_epochs: usize,
    pub sampler: SamplerSpec,
    pub provider: ProviderConfig,
    pub synth: SynthSpec,
    pub extractor: ExtractorConfig,
    pub extractor_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: 1,
            vae: VaeConfig::default(),
            vae_epochs: 200,
            diffusion: DiffusionConfig::default(),
            diffusion_epochs: 200,
            sampler: SamplerSpec::default(),
            provider: ProviderConfig::default(),
            synth: SynthSpec::default(),
            extractor: ExtractorConfig::default(),
            extractor_epochs: 40,
        }
    }
}

impl RunConfig {
    /// Read a config file, or start from defaults when no file is given.
    /// Parse failures and unknown keys are usage errors.
    pub fn load(path: Option<&Path>) -> CliResult<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    /// Check every module-level invariant before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        self.vae.validate().map_err(usage)?;
        self.diffusion.validate().map_err(usage)?;
        self.sampler
            .validate(self.diffusion.schedule.t_steps)
            .map_err(usage)?;
        self.extractor.validate().map_err(usage)?;
        if self.vae.d != self.diffusion.denoiser.d {
            return Err(CliError::Usage(format!(
                "vae latent width {} must match denoiser width {}",
                self.vae.d, self.diffusion.denoiser.d
            )));
        }
        if self.diffusion.source == CondSource::Text {
            if let ProviderConfig::Hash { dim, .. } = &self.provider {
                if *dim != self.diffusion.cond.provider_dim {
                    return Err(CliError::Usage(format!(
                        "hash provider dim {} must match diffusion.cond.provider_dim {}",
                        dim, self.diffusion.cond.provider_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fix the seed from, in priority order, an explicit flag, the config
    /// file, the MLD_SEED environment variable, and finally 0. The resolved
    /// value is written back so the echoed config is self-contained.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env_seed: Option<&str>) -> CliResult<u64> {
        let from_env = match env_seed {
            None => None,
            Some(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| usage(format!("MLD_SEED must be an unsigned integer, got {s:?}")))?,
            ),
        };
        let seed = flag.or(self.seed).or(from_env).unwrap_or(0);
        self.seed = Some(seed);
        Ok(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"vae_epoch": 3}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("vae_epoch"), "{err}");

        fs::write(&p, r#"{"vae": {"n_latent_token": 1}}"#).unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn off_preset_latent_count_is_a_usage_error() {
        let mut cfg = RunConfig::default();
        cfg.vae.n_latent_tokens = 3;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("[1, 2, 5, 7, 10]"), "{err}");
        cfg.vae.allow_any_n = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn cross_width_and_provider_dim_checks() {
        let mut cfg = RunConfig::default();
        cfg.vae.d = 128;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("128"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.provider = ProviderConfig::Hash { seed: 1, dim: 32 };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("provider_dim"), "{err}");
    }

    #[test]
    fn seed_resolution_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(Some(5), Some("9")).unwrap(), 5);
        let mut cfg = RunConfig {
            seed: Some(7),
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolve_seed(None, Some("9")).unwrap(), 7);
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(None, Some("9")).unwrap(), 9);
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(None, None).unwrap(), 0);
        assert_eq!(cfg.seed, Some(0));
        let mut cfg = RunConfig::default();
        assert!(cfg.resolve_seed(None, Some("x")).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
