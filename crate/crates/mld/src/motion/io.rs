use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::layout::PoseLayout;
use super::types::{MotionSequence, NormStats};
use crate::numerics::Tensor;
use crate::{Error, Result};

const MOT_MAGIC: [u8; 4] = *b"MOTN";
const MOT_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Write a 2-D tensor as a ".mot" file: magic "MOTN", u32 LE version, u32 LE
/// row count, u32 LE column count, then row-major f32 LE payload.
pub fn write_mot(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut buf = Vec::with_capacity(16 + t.numel() * 4);
    buf.extend_from_slice(&MOT_MAGIC);
    buf.extend_from_slice(&MOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path_str(path), e))
}

/// Read a ".mot" tensor. Rejects wrong magic, newer versions, truncated
/// payloads, and trailing garbage.
pub fn read_mot(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| Error::Truncated {
        path: path_str(path),
        detail: "file shorter than the 16-byte header".into(),
    })?;
    let magic: [u8; 4] = header[0..4].try_into().expect("fixed slice");
    if magic != MOT_MAGIC {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: MOT_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("fixed slice"));
    if version > MOT_VERSION {
        return Err(Error::VersionUnsupported {
            path: path_str(path),
            found: version,
            max: MOT_VERSION,
        });
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().expect("fixed slice")) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().expect("fixed slice")) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::CorruptTable {
            path: path_str(path),
            detail: format!("degenerate shape {rows}x{cols}"),
        });
    }
    let expected = rows * cols * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path_str(path), e))?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path_str(path),
            detail: format!(
                "payload holds {} bytes, header declares {rows}x{cols} ({expected} bytes)",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::CorruptTable {
            path: path_str(path),
            detail: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")))
        .collect();
    Tensor::from_vec(vec![rows, cols], data)
}

/// Save a motion clip; the frame rate travels in the manifest, not the file.
pub fn save_motion(path: &Path, seq: &MotionSequence) -> Result<()> {
    write_mot(path, &seq.data)
}

/// Load a motion clip, checking the stored width against `layout`.
pub fn load_motion(path: &Path, layout: PoseLayout, fps: f32) -> Result<MotionSequence> {
    let data = read_mot(path)?;
    if data.cols() != layout.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "load_motion",
            detail: format!(
                "{} has width {}, layout expects {}",
                path_str(path),
                data.cols(),
                layout.feature_dim()
            ),
        });
    }
    MotionSequence::new(layout, fps, data)
}

/// Import a raw little-endian f32 array with caller-declared dims.
pub fn import_raw_f32(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path_str(path),
            detail: format!(
                "raw file holds {} bytes, declared {rows}x{cols} needs {expected}",
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")))
        .collect();
    Tensor::from_vec(vec![rows, cols], data)
}

impl NormStats {
    /// Store as two single-row ".mot" files: `<prefix>.mean.mot` and
    /// `<prefix>.std.mot`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let f = self.feature_dim();
        let mean = Tensor::from_vec(vec![1, f], self.mean.clone())?;
        let std = Tensor::from_vec(vec![1, f], self.std.clone())?;
        write_mot(&stats_path(prefix, "mean"), &mean)?;
        write_mot(&stats_path(prefix, "std"), &std)
    }

    pub fn load(prefix: &Path) -> Result<NormStats> {
        let mean = read_mot(&stats_path(prefix, "mean"))?;
        let std = read_mot(&stats_path(prefix, "std"))?;
        if mean.rows() != 1 || std.rows() != 1 || mean.cols() != std.cols() {
            return Err(Error::ShapeMismatch {
                op: "norm_stats_load",
                detail: format!("mean {:?} vs std {:?}", mean.dims(), std.dims()),
            });
        }
        Ok(NormStats {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }
}

fn stats_path(prefix: &Path, which: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push('.');
    name.push_str(which);
    name.push_str(".mot");
    prefix.with_file_name(name)
}

/// One corpus manifest line.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusEntry {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_id: Option<usize>,
    pub length: usize,
    pub fps: f32,
}

/// Write one JSON object per line.
pub fn write_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(line)?);
    }
    Ok(entries)
}

/// A loaded corpus: manifest entries paired with their motions.
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub motions: Vec<MotionSequence>,
}

impl Corpus {
    /// Load every motion referenced by a manifest. Relative manifest paths
    /// resolve against the manifest's own directory; the layout is inferred
    /// from the stored feature width.
    pub fn load(manifest_path: &Path) -> Result<Corpus> {
        let entries = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut motions = Vec::with_capacity(entries.len());
        for e in &entries {
            let p = base.join(&e.path);
            let data = read_mot(&p)?;
            let layout = PoseLayout::infer(data.cols()).ok_or_else(|| {
                Error::CorruptTable {
                    path: path_str(&p),
                    detail: format!("width {} matches no pose layout", data.cols()),
                }
            })?;
            if data.rows() != e.length {
                return Err(Error::CorruptTable {
                    path: path_str(&p),
                    detail: format!(
                        "manifest declares {} frames, file holds {}",
                        e.length,
                        data.rows()
                    ),
                });
            }
            motions.push(MotionSequence::new(layout, e.fps, data)?);
        }
        Ok(Corpus { entries, motions })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
