//! Motion data: frame feature layouts, sequences and SMPL parameters,
//! normalization statistics, ".mot" file and manifest I/O, and the synthetic
//! corpus generator.

mod io;
mod layout;
mod synth;
mod types;

pub use io::{
    import_raw_f32, load_motion, read_manifest, read_mot, save_motion, write_manifest,
    write_mot, Corpus, CorpusEntry,
};
pub use layout::PoseLayout;
pub use synth::{contact_bits, generate, synth_corpus, SynthSpec};
pub use types::{MotionSequence, NormStats, SmplMotion};
