pub mod bench;
pub mod evaluate;
pub mod inspect;
pub mod sample;
pub mod synth;
pub mod train_diffusion;
pub mod train_vae;

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::Common;

/// A loaded configuration with the shared flags applied and the seed fixed.
pub struct Prepared {
    pub cfg: RunConfig,
    pub seed: u64,
    /// Whether any run-level source (flag, config file, MLD_SEED) named the
    /// seed, as opposed to the silent fallback to 0.
    pub seed_was_explicit: bool,
}

/// Load the config file, apply the shared flags, and resolve the seed. Each
/// command applies its own overrides afterwards and then validates.
pub fn prepare(common: &Common) -> CliResult<Prepared> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if common.allow_any_n {
        cfg.vae.allow_any_n = true;
    }
    let env_seed = std::env::var("MLD_SEED").ok();
    let seed_was_explicit =
        common.seed.is_some() || cfg.seed.is_some() || env_seed.is_some();
    let seed = cfg.resolve_seed(common.seed, env_seed.as_deref())?;
    Ok(Prepared {
        cfg,
        seed,
        seed_was_explicit,
    })
}

/// Accept either a manifest file or a directory holding `manifest.jsonl`.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.jsonl")
    } else {
        p.to_path_buf()
    }
}

/// Emit the final machine-readable result of a command on stdout.
pub fn print_summary(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable summary"));
}
