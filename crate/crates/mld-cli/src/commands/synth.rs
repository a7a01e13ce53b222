use std::path::PathBuf;

use clap::Args;
use mld::motion::{synth_corpus, PoseLayout};

use super::{prepare, print_summary};
use crate::error::{usage, CliResult};
use crate::rundir::RunDir;
use crate::Common;

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,

    /// Corpus output directory (default <run-dir>/data)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Number of sequences
    #[arg(long)]
    pub sequences: Option<usize>,

    /// Number of action classes
    #[arg(long)]
    pub actions: Option<usize>,

    /// Shortest sequence length in frames
    #[arg(long)]
    pub min_len: Option<usize>,

    /// Longest sequence length in frames
    #[arg(long)]
    pub max_len: Option<usize>,

    /// Joint count of the skeleton
    #[arg(long)]
    pub joints: Option<usize>,

    /// Frame rate stamped on every sequence
    #[arg(long)]
    pub fps: Option<f32>,
}

pub fn run(args: SynthArgs) -> CliResult<()> {
    let prepared = prepare(&args.common)?;
    let (mut cfg, seed) = (prepared.cfg, prepared.seed);
    if let Some(v) = args.sequences {
        cfg.synth.n_sequences = v;
    }
    if let Some(v) = args.actions {
        cfg.synth.n_actions = v;
    }
    if let Some(v) = args.min_len {
        cfg.synth.min_len = v;
    }
    if let Some(v) = args.max_len {
        cfg.synth.max_len = v;
    }
    if let Some(v) = args.joints {
        cfg.synth.n_joints = v;
    }
    if let Some(v) = args.fps {
        cfg.synth.fps = v;
    }
    // A run-level seed (flag, top-level config value, or MLD_SEED) overrides
    // the generator's own seed field; otherwise the nested value stands.
    if args.common.seed.is_some()
        || cfg.seed != Some(0)
        || std::env::var("MLD_SEED").is_ok()
    {
        cfg.synth.seed = seed;
    }
    cfg.seed = Some(cfg.synth.seed);
    cfg.validate()?;
    let layout =
        PoseLayout::new(cfg.synth.n_joints, cfg.synth.include_root).map_err(usage)?;

    let rd = RunDir::create(&args.common.run_dir)?;
    let out = args.out.unwrap_or_else(|| rd.root().join("data"));
    rd.write_config(&cfg)?;

    let entries = synth_corpus(&cfg.synth, &out).map_err(|e| match e {
        mld::Error::InvalidArgument(_) => usage(e),
        other => other.into(),
    })?;

    let total_frames: usize = entries.iter().map(|e| e.length).sum();
    print_summary(&serde_json::json!({
        "command": "synth-data",
        "manifest": out.join("manifest.jsonl"),
        "sequences": entries.len(),
        "actions": cfg.synth.n_actions,
        "feature_dim": layout.feature_dim(),
        "total_frames": total_frames,
        "seed": cfg.synth.seed,
    }));
    Ok(())
}
